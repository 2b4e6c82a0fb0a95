//! Stable-manifold equation systems from unstable eigenfunctions,
//! costate-map solves by damped Newton with continuation, feedback
//! evaluation, and comparison against reference laws.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::basis::{BoxDomain, QuadratureRule};
use crate::error::CoreError;
use crate::model::{OcpModel, UStar};
use crate::poly::Poly;
use crate::spectral::{symplectic_coupling, EigenPair, Eigenfunction, GalerkinMatrix};

type C64 = Complex<f64>;

/// The zero system cutting out the approximate stable manifold:
/// n_x real polynomial equations in (x, lambda).
#[derive(Debug, Clone)]
pub struct StableManifoldSystem {
    /// y-space polynomials, one per equation.
    pub equations: Vec<Poly>,
    /// d equations / d lambda, n_x x n_x.
    pub jacobian_lambda: Vec<Vec<Poly>>,
    /// Eigenvalues whose eigenfunctions were selected.
    pub selected: Vec<C64>,
    /// Unstable eigenvalues left out (diagnostic).
    pub unselected_unstable: Vec<C64>,
    pub n_x: usize,
}

impl StableManifoldSystem {
    pub fn residual(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.equations.len(), self.equations.iter().map(|e| e.eval(y)))
    }
}

/// Picks unstable (Re kappa > tau) non-flagged eigenfunctions, ordered
/// by decreasing mirrored-coupling magnitude |omega(Psi_k, Psi_-k)|,
/// until exactly n_x real equations are accumulated. A complex
/// conjugate pair contributes two equations (Re Psi, Im Psi); a real
/// eigenvalue contributes one.
pub fn select_unstable(
    eigs: &[EigenPair],
    gm: &GalerkinMatrix,
    quad: &QuadratureRule,
    tau: f64,
    n_x: usize,
) -> Result<StableManifoldSystem, CoreError> {
    struct Candidate {
        kappa: C64,
        psi: Eigenfunction,
        coupling: f64,
    }
    let fns: Vec<Option<Eigenfunction>> = eigs
        .iter()
        .map(|e| {
            if e.flagged {
                None
            } else {
                Some(Eigenfunction::from_pair(e, &gm.basis))
            }
        })
        .collect();
    let mut candidates = Vec::new();
    for (i, e) in eigs.iter().enumerate() {
        if e.flagged || e.kappa.re <= tau || e.kappa.im < 0.0 {
            continue; // conjugates enter implicitly through Re/Im parts
        }
        // mirror partner: unflagged eigenvalue closest to -kappa
        let partner = eigs
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && !o.flagged)
            .min_by(|a, b| {
                let da = (a.1.kappa + e.kappa).norm();
                let db = (b.1.kappa + e.kappa).norm();
                da.partial_cmp(&db).unwrap().then(a.0.cmp(&b.0))
            });
        let coupling = match partner {
            Some((j, o)) if (o.kappa + e.kappa).norm() <= 1e-2 * e.kappa.norm().max(1.0) => {
                symplectic_coupling(
                    fns[i].as_ref().unwrap(),
                    fns[j].as_ref().unwrap(),
                    quad,
                )?
                .norm()
            }
            _ => 0.0,
        };
        candidates.push(Candidate {
            kappa: e.kappa,
            psi: fns[i].clone().unwrap(),
            coupling,
        });
    }
    if candidates.is_empty() {
        return Err(CoreError::NoUnstableEigenvalues { tau });
    }
    candidates.sort_by(|a, b| {
        b.coupling
            .partial_cmp(&a.coupling)
            .unwrap()
            .then(b.kappa.re.partial_cmp(&a.kappa.re).unwrap())
            .then(b.kappa.im.partial_cmp(&a.kappa.im).unwrap())
    });

    let mut equations: Vec<Poly> = Vec::with_capacity(n_x);
    let mut selected = Vec::new();
    let mut unselected = Vec::new();
    for c in candidates {
        let need = n_x - equations.len();
        let contributes = if c.kappa.im > 0.0 { 2 } else { 1 };
        if contributes > need {
            unselected.push(c.kappa);
            if c.kappa.im > 0.0 {
                unselected.push(c.kappa.conj());
            }
            continue;
        }
        // normalize each equation for Newton conditioning; the zero
        // set is invariant under scaling
        let norm_push = |eq: Poly, out: &mut Vec<Poly>| {
            let m = eq.max_abs_coeff();
            out.push(if m > 0.0 { eq.scale(1.0 / m) } else { eq });
        };
        norm_push(c.psi.psi_re.clone(), &mut equations);
        selected.push(c.kappa);
        if c.kappa.im > 0.0 {
            norm_push(c.psi.psi_im.clone(), &mut equations);
            selected.push(c.kappa.conj());
        }
    }
    if equations.len() < n_x {
        return Err(CoreError::InsufficientEquations {
            got: equations.len(),
            need: n_x,
        });
    }
    let jacobian_lambda = equations
        .iter()
        .map(|e| {
            (0..n_x)
                .map(|l| e.diff(n_x + l))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StableManifoldSystem {
        equations,
        jacobian_lambda,
        selected,
        unselected_unstable: unselected,
        n_x,
    })
}

#[derive(Debug, Clone)]
pub struct NewtonOpts {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CostateSolve {
    pub lambda: DVector<f64>,
    pub iters: usize,
    pub residual: f64,
}

/// The synthesized feedback mu(x) = u*(x, Lambda(x)), with Lambda
/// defined implicitly by the stable-manifold system.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub system: StableManifoldSystem,
    pub ustar: UStar,
    pub model: OcpModel,
    pub newton: NewtonOpts,
    /// Riccati warm start: seed lambda = P x when available.
    pub warm_start: Option<DMatrix<f64>>,
    /// Most recent solve, reused as a continuation seed along
    /// trajectories and grid sweeps.
    last: RefCell<Option<DVector<f64>>>,
}

impl FeedbackLaw {
    pub fn new(
        system: StableManifoldSystem,
        ustar: UStar,
        model: OcpModel,
        newton: NewtonOpts,
        warm_start: Option<DMatrix<f64>>,
    ) -> Self {
        FeedbackLaw {
            system,
            ustar,
            model,
            newton,
            warm_start,
            last: RefCell::new(None),
        }
    }

    /// Solves the costate equations from an explicit Newton seed,
    /// bypassing the usual seed cascade (used for perturbed restarts).
    pub fn solve_costate_from(
        &self,
        x: &[f64],
        seed: &DVector<f64>,
    ) -> Result<CostateSolve, CoreError> {
        let sol = self.newton_from(x, seed)?;
        *self.last.borrow_mut() = Some(sol.lambda.clone());
        Ok(sol)
    }

    fn newton_from(&self, x: &[f64], seed: &DVector<f64>) -> Result<CostateSolve, CoreError> {
        let n = self.system.n_x;
        let mut lam = seed.clone();
        let point = |lam: &DVector<f64>| -> Vec<f64> {
            x.iter().chain(lam.iter()).copied().collect()
        };
        let res = |lam: &DVector<f64>| -> DVector<f64> {
            self.system.residual(&point(lam))
        };
        let mut r = res(&lam);
        for iter in 0..self.newton.max_iter {
            if r.norm() <= self.newton.tol {
                // require a nonsingular lambda-Jacobian at the solution
                let y = point(&lam);
                let j = DMatrix::from_fn(n, n, |k, l| self.system.jacobian_lambda[k][l].eval(&y));
                if j.lu().try_inverse().is_none() {
                    return Err(CoreError::NewtonFailure {
                        x: x.to_vec(),
                        reason: "singular lambda-Jacobian at the solution".into(),
                    });
                }
                return Ok(CostateSolve {
                    lambda: lam,
                    iters: iter,
                    residual: r.norm(),
                });
            }
            let y = point(&lam);
            let j = DMatrix::from_fn(n, n, |k, l| self.system.jacobian_lambda[k][l].eval(&y));
            let step = j.lu().solve(&r).ok_or_else(|| CoreError::NewtonFailure {
                x: x.to_vec(),
                reason: "singular lambda-Jacobian".into(),
            })?;
            let mut alpha = 1.0;
            let base = r.norm();
            let mut accepted = false;
            for _ in 0..=self.newton.max_halvings {
                let trial = &lam - alpha * &step;
                let rt = res(&trial);
                if rt.norm() < base {
                    lam = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(CoreError::NewtonFailure {
                    x: x.to_vec(),
                    reason: format!("damping stalled at residual {base:.3e}"),
                });
            }
        }
        if r.norm() <= self.newton.tol {
            Ok(CostateSolve {
                lambda: lam,
                iters: self.newton.max_iter,
                residual: r.norm(),
            })
        } else {
            Err(CoreError::NewtonFailure {
                x: x.to_vec(),
                reason: format!("no convergence in {} iterations", self.newton.max_iter),
            })
        }
    }

    /// Solves the manifold system for Lambda(x) with warm-started
    /// damped Newton; falls back to continuation along the ray from
    /// the origin when direct seeds fail.
    pub fn solve_costate(&self, x: &[f64]) -> Result<CostateSolve, CoreError> {
        let n = self.system.n_x;
        let xv = DVector::from_row_slice(x);
        let mut seeds: Vec<DVector<f64>> = Vec::new();
        if let Some(lam) = self.last.borrow().clone() {
            seeds.push(lam);
        }
        if let Some(p) = &self.warm_start {
            seeds.push(p * &xv);
        }
        seeds.push(DVector::zeros(n));
        seeds.push(xv.clone());
        let mut first_err = None;
        for seed in &seeds {
            match self.newton_from(x, seed) {
                Ok(sol) => {
                    *self.last.borrow_mut() = Some(sol.lambda.clone());
                    return Ok(sol);
                }
                Err(e) => first_err = first_err.or(Some(e)),
            }
        }
        // continuation from the origin along t * x
        let mut lam = DVector::zeros(n);
        let steps = 16;
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            let xt: Vec<f64> = x.iter().map(|v| v * t).collect();
            match self.newton_from(&xt, &lam) {
                Ok(sol) => lam = sol.lambda,
                Err(_) => {
                    return Err(first_err.unwrap_or(CoreError::NewtonFailure {
                        x: x.to_vec(),
                        reason: "continuation from the origin failed".into(),
                    }))
                }
            }
        }
        let sol = self.newton_from(x, &lam)?;
        *self.last.borrow_mut() = Some(sol.lambda.clone());
        Ok(sol)
    }

    /// mu(x) = u*(x, Lambda(x)).
    pub fn feedback_eval(&self, x: &[f64]) -> Result<DVector<f64>, CoreError> {
        let sol = self.solve_costate(x)?;
        let y: Vec<f64> = x.iter().chain(sol.lambda.iter()).copied().collect();
        self.ustar.eval(&self.model, &y)
    }

    /// Solves Lambda on a grid, sweeping nodes outward from the origin
    /// so each solve warm-starts from the nearest solved neighbor.
    /// Results are returned in input order.
    pub fn solve_grid(&self, points: &[Vec<f64>]) -> Vec<Result<CostateSolve, CoreError>> {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let norm2 = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        order.sort_by(|&a, &b| {
            norm2(&points[a])
                .partial_cmp(&norm2(&points[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut results: Vec<Option<Result<CostateSolve, CoreError>>> =
            (0..points.len()).map(|_| None).collect();
        let mut solved: Vec<(usize, DVector<f64>)> = Vec::new();
        for &i in &order {
            let x = &points[i];
            // nearest already-solved node as seed
            let neighbor = solved
                .iter()
                .min_by(|a, b| {
                    let da: f64 = points[a.0]
                        .iter()
                        .zip(x)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    let db: f64 = points[b.0]
                        .iter()
                        .zip(x)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(_, lam)| lam.clone());
            let res = match neighbor {
                Some(seed) => self.newton_from(x, &seed).or_else(|_| self.solve_costate(x)),
                None => self.solve_costate(x),
            };
            if let Ok(sol) = &res {
                solved.push((i, sol.lambda.clone()));
            }
            results[i] = Some(res);
        }
        results.into_iter().map(|r| r.unwrap()).collect()
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    pub l2sq_error: f64,
    pub max_error: f64,
    pub failed_nodes: Vec<Vec<f64>>,
}

/// Squared-integral and max error of the synthesized law against a
/// reference polynomial law over a state box, by quadrature.
pub fn compare_reference(
    law: &FeedbackLaw,
    reference: &[Poly],
    x_box: &BoxDomain,
    quad: &QuadratureRule,
) -> Result<ComparisonReport, CoreError> {
    assert_eq!(reference.len(), law.model.n_u);
    assert_eq!(quad.dim(), x_box.dim());
    let failed: RefCell<Vec<Vec<f64>>> = RefCell::new(Vec::new());
    let max_err = RefCell::new(0.0f64);
    let l2sq = quad.integrate_fn(|x| {
        match law.feedback_eval(x) {
            Ok(u) => {
                let mut acc = 0.0;
                for (j, r) in reference.iter().enumerate() {
                    let d = u[j] - r.eval(x);
                    acc += d * d;
                    let mut m = max_err.borrow_mut();
                    *m = m.max(d.abs());
                }
                acc
            }
            Err(_) => {
                failed.borrow_mut().push(x.to_vec());
                0.0
            }
        }
    });
    Ok(ComparisonReport {
        l2sq_error: l2sq,
        max_error: max_err.into_inner(),
        failed_nodes: failed.into_inner(),
    })
}
