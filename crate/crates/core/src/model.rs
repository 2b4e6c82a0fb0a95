//! Problem data: dynamics and stage cost as exact polynomials, the
//! Hamiltonian, the parametric control minimizer, and the lifted
//! state-costate vector field with its Jacobian.
//!
//! Variable conventions:
//! - "xu" space: `[x_1..x_nx, u_1..u_nu]`
//! - "xul" space: `[x_1..x_nx, u_1..u_nu, l_1..l_nx]`
//! - "y" space: `[x_1..x_nx, l_1..l_nx]` (the lifted phase space)

use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;
use crate::poly::Poly;

/// Infinite-horizon optimal control problem with polynomial data.
#[derive(Debug, Clone)]
pub struct OcpModel {
    pub n_x: usize,
    pub n_u: usize,
    /// Dynamics components, polynomials over xu space.
    pub f: Vec<Poly>,
    /// Stage cost over xu space.
    pub l: Poly,
    /// Optimal average cost offset; used in cost evaluation only.
    pub l_star: f64,
    pub affine_in_u: bool,
    pub quadratic_in_u: bool,
}

impl OcpModel {
    pub fn new(
        n_x: usize,
        n_u: usize,
        f: Vec<Poly>,
        l: Poly,
        l_star: f64,
    ) -> Result<Self, CoreError> {
        let nv = n_x + n_u;
        if f.len() != n_x {
            return Err(CoreError::InvalidModel(format!(
                "dynamics has {} components, state dimension is {}",
                f.len(),
                n_x
            )));
        }
        if f.iter().any(|p| p.nvars() != nv) || l.nvars() != nv {
            return Err(CoreError::InvalidModel(
                "f and l must be polynomials over (x, u)".into(),
            ));
        }
        let affine_in_u = f
            .iter()
            .all(|p| (0..n_u).all(|j| p.degree_in(n_x + j) <= 1));
        let quadratic_in_u = {
            // u-Hessian of l constant and positive definite
            let mut constant = true;
            let mut hess = DMatrix::zeros(n_u, n_u);
            'outer: for j in 0..n_u {
                for k in 0..n_u {
                    let h = l
                        .diff(n_x + j)
                        .and_then(|d| d.diff(n_x + k))
                        .map_err(|e| CoreError::InvalidModel(e.to_string()))?;
                    if h.total_degree() > 0 {
                        constant = false;
                        break 'outer;
                    }
                    hess[(j, k)] = h.eval(&vec![0.0; n_x + n_u]);
                }
            }
            constant && is_positive_definite(&hess)
        };
        Ok(OcpModel {
            n_x,
            n_u,
            f,
            l,
            l_star,
            affine_in_u,
            quadratic_in_u,
        })
    }

    /// Constant u-Hessian of the stage cost (valid when `quadratic_in_u`).
    pub fn control_hessian(&self) -> DMatrix<f64> {
        let origin = vec![0.0; self.n_x + self.n_u];
        DMatrix::from_fn(self.n_u, self.n_u, |j, k| {
            self.l
                .diff(self.n_x + j)
                .unwrap()
                .diff(self.n_x + k)
                .unwrap()
                .eval(&origin)
        })
    }
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

/// Parametric minimizer of the Hamiltonian over the control.
#[derive(Debug, Clone)]
pub enum UStar {
    /// u*(x, l) as polynomials over y space.
    ClosedForm { u_expr: Vec<Poly> },
    /// Implicit minimizer solved by damped Newton per query point.
    NewtonImplicit {
        /// H_u components over xul space.
        h_u: Vec<Poly>,
        /// H_uu entries over xul space (row-major n_u x n_u).
        h_uu: Vec<Vec<Poly>>,
        tol: f64,
        max_iter: usize,
    },
}

impl UStar {
    /// Evaluate the minimizer at a state-costate point `y = (x, l)`.
    pub fn eval(&self, model: &OcpModel, y: &[f64]) -> Result<DVector<f64>, CoreError> {
        match self {
            UStar::ClosedForm { u_expr } => {
                Ok(DVector::from_iterator(u_expr.len(), u_expr.iter().map(|p| p.eval(y))))
            }
            UStar::NewtonImplicit {
                h_u,
                h_uu,
                tol,
                max_iter,
            } => {
                let n_x = model.n_x;
                let n_u = model.n_u;
                let mut u = DVector::zeros(n_u);
                let point = |u: &DVector<f64>| -> Vec<f64> {
                    let mut p = Vec::with_capacity(2 * n_x + n_u);
                    p.extend_from_slice(&y[..n_x]);
                    p.extend(u.iter().copied());
                    p.extend_from_slice(&y[n_x..]);
                    p
                };
                let res_norm = |u: &DVector<f64>| {
                    let pt = point(u);
                    h_u.iter().map(|p| p.eval(&pt).powi(2)).sum::<f64>().sqrt()
                };
                for _ in 0..*max_iter {
                    let pt = point(&u);
                    let g = DVector::from_iterator(n_u, h_u.iter().map(|p| p.eval(&pt)));
                    if g.norm() <= *tol {
                        return Ok(u);
                    }
                    let hess = DMatrix::from_fn(n_u, n_u, |j, k| h_uu[j][k].eval(&pt));
                    let chol = hess
                        .clone()
                        .cholesky()
                        .ok_or(CoreError::HessianNotPositiveDefinite)?;
                    let step = chol.solve(&g);
                    // damped update: halve on residual increase
                    let base = g.norm();
                    let mut alpha = 1.0;
                    for _ in 0..20 {
                        let trial = &u - alpha * &step;
                        if res_norm(&trial) < base {
                            break;
                        }
                        alpha *= 0.5;
                    }
                    u -= alpha * step;
                }
                let pt = point(&u);
                let g = DVector::from_iterator(n_u, h_u.iter().map(|p| p.eval(&pt)));
                if g.norm() <= *tol {
                    Ok(u)
                } else {
                    Err(CoreError::NewtonFailure {
                        x: y.to_vec(),
                        reason: format!("control Newton residual {:.3e}", g.norm()),
                    })
                }
            }
        }
    }
}

/// H(x, u, l) = l^T f(x, u) + stage cost, over xul space.
pub fn hamiltonian(model: &OcpModel) -> Poly {
    let n_x = model.n_x;
    let n_u = model.n_u;
    let nv = n_x + n_u + n_x;
    // embed xu-space polys: x_i -> i, u_j -> n_x + j
    let map: Vec<usize> = (0..n_x + n_u).collect();
    let mut h = model.l.embed(nv, &map);
    for (i, fi) in model.f.iter().enumerate() {
        let lam = Poly::var(nv, n_x + n_u + i);
        h = h.add(&lam.mul(&fi.embed(nv, &map)));
    }
    h
}

/// Builds the parametric minimizer of the Hamiltonian.
///
/// With `affine_in_u` and `quadratic_in_u`, H_u = R u + b(x, l) is linear
/// in u with constant positive definite R, so u* = -R^{-1} b in closed
/// form. Otherwise a per-point Newton functor is returned.
pub fn minimize_hamiltonian_control(model: &OcpModel) -> Result<UStar, CoreError> {
    let n_x = model.n_x;
    let n_u = model.n_u;
    let h = hamiltonian(model);
    let h_u: Vec<Poly> = (0..n_u)
        .map(|j| h.diff(n_x + j))
        .collect::<Result<_, _>>()?;

    if model.affine_in_u && model.quadratic_in_u {
        let r = model.control_hessian();
        let r_inv = r
            .clone()
            .cholesky()
            .ok_or(CoreError::HessianNotPositiveDefinite)?
            .inverse();
        // b_j = H_u_j at u = 0, then map into y space
        let nv = n_x + n_u + n_x;
        let zero_u_images: Vec<Poly> = (0..nv)
            .map(|k| {
                if k >= n_x && k < n_x + n_u {
                    Poly::zero(2 * n_x)
                } else if k < n_x {
                    Poly::var(2 * n_x, k)
                } else {
                    Poly::var(2 * n_x, k - n_u)
                }
            })
            .collect();
        let b: Vec<Poly> = h_u.iter().map(|p| p.compose(&zero_u_images)).collect();
        let u_expr: Vec<Poly> = (0..n_u)
            .map(|j| {
                let mut acc = Poly::zero(2 * n_x);
                for (k, bk) in b.iter().enumerate() {
                    acc = acc.add(&bk.scale(-r_inv[(j, k)]));
                }
                acc
            })
            .collect();
        // invariant: H_u(x, u*, l) must expand to the zero polynomial
        let images: Vec<Poly> = xul_to_y_images(n_x, n_u, &u_expr);
        for hu_j in &h_u {
            let sub = hu_j.compose(&images);
            if !sub.is_zero() {
                return Err(CoreError::ConsistencyFailure(format!(
                    "H_u does not vanish at closed-form u*: residual {}",
                    sub
                )));
            }
        }
        Ok(UStar::ClosedForm { u_expr })
    } else {
        let h_uu: Vec<Vec<Poly>> = (0..n_u)
            .map(|j| {
                (0..n_u)
                    .map(|k| h_u[j].diff(n_x + k))
                    .collect::<Result<_, _>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(UStar::NewtonImplicit {
            h_u,
            h_uu,
            tol: 1e-12,
            max_iter: 50,
        })
    }
}

/// Images mapping xul space into y space with u -> u*(x, l).
fn xul_to_y_images(n_x: usize, n_u: usize, u_expr: &[Poly]) -> Vec<Poly> {
    (0..n_x + n_u + n_x)
        .map(|k| {
            if k < n_x {
                Poly::var(2 * n_x, k)
            } else if k < n_x + n_u {
                u_expr[k - n_x].clone()
            } else {
                Poly::var(2 * n_x, k - n_u)
            }
        })
        .collect()
}

/// The lifted state-costate vector field F over y space, with Jacobian.
#[derive(Debug, Clone)]
pub struct PontryaginField {
    /// 2 n_x components over y space.
    pub components: Vec<Poly>,
    /// 2 n_x by 2 n_x Jacobian entries, `jacobian[i][j] = dF_i / dy_j`.
    pub jacobian: Vec<Vec<Poly>>,
    pub n_x: usize,
}

impl PontryaginField {
    pub fn dim(&self) -> usize {
        2 * self.n_x
    }

    pub fn eval(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.components.iter().map(|p| p.eval(y)))
    }

    pub fn eval_jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.jacobian[i][j].eval(y))
    }

    /// Symbolic divergence sum_k dF_k/dy_k.
    pub fn divergence(&self) -> Poly {
        let mut d = Poly::zero(self.dim());
        for (k, row) in self.jacobian.iter().enumerate() {
            d = d.add(&row[k]);
        }
        d
    }

    pub fn max_degree(&self) -> u32 {
        self.components
            .iter()
            .map(|p| p.total_degree())
            .max()
            .unwrap_or(0)
    }
}

/// Builds F = (f(x, u*(x,l)); -grad_x H(x, u*(x,l), l)) and its Jacobian
/// by exact symbolic substitution and differentiation.
///
/// Substituting u* before differentiating in x is equivalent to the
/// envelope form, because H_u composed with a closed-form u* is the zero
/// polynomial. Both structural identities (zero divergence, Hamiltonian
/// symmetry of the Jacobian) are verified symbolically at construction.
pub fn pontryagin_field(model: &OcpModel, ustar: &UStar) -> Result<PontryaginField, CoreError> {
    let u_expr = match ustar {
        UStar::ClosedForm { u_expr } => u_expr,
        UStar::NewtonImplicit { .. } => return Err(CoreError::SymbolicLiftNeedsClosedForm),
    };
    let n_x = model.n_x;
    let n_u = model.n_u;
    let dim = 2 * n_x;

    // f(x, u*(x,l)): compose xu-space polys with [y_x, u*]
    let xu_images: Vec<Poly> = (0..n_x)
        .map(|k| Poly::var(dim, k))
        .chain(u_expr.iter().cloned())
        .collect();
    let mut components: Vec<Poly> = model.f.iter().map(|p| p.compose(&xu_images)).collect();

    // -grad_x of H(x, u*(x,l), l)
    let h = hamiltonian(model);
    let h_sub = h.compose(&xul_to_y_images(n_x, n_u, u_expr));
    for i in 0..n_x {
        components.push(h_sub.diff(i)?.scale(-1.0));
    }

    let jacobian: Vec<Vec<Poly>> = components
        .iter()
        .map(|c| c.gradient())
        .collect();

    let field = PontryaginField {
        components,
        jacobian,
        n_x,
    };

    let div = field.divergence();
    if !div.is_zero() {
        return Err(CoreError::ConsistencyFailure(format!(
            "divergence of lifted field is not the zero polynomial: {}",
            div
        )));
    }
    // Omega * F_y must be symmetric as a matrix of polynomials:
    // (Omega F_y)_{ij} with Omega = [[0, I], [-I, 0]] is
    //   row i < n_x:  jacobian[n_x + i][j]
    //   row i >= n_x: -jacobian[i - n_x][j]
    for i in 0..dim {
        for j in (i + 1)..dim {
            let a = omega_jac(&field, i, j);
            let b = omega_jac(&field, j, i);
            let defect = a.sub(&b);
            if !defect.is_zero() {
                return Err(CoreError::ConsistencyFailure(format!(
                    "Omega*F_y not symmetric at ({i},{j}): {}",
                    defect
                )));
            }
        }
    }

    Ok(field)
}

fn omega_jac(field: &PontryaginField, i: usize, j: usize) -> Poly {
    let n_x = field.n_x;
    if i < n_x {
        field.jacobian[n_x + i][j].clone()
    } else {
        field.jacobian[i - n_x][j].scale(-1.0)
    }
}

// ---------------------------------------------------------------------
// Problem registry
// ---------------------------------------------------------------------

/// Van der Pol regulator: linearly uncontrollable at the origin, with a
/// known optimal value function V = (x1^2 + x2^2)/2 and optimal feedback
/// u = -x1 x2.
pub fn vanderpol() -> OcpModel {
    // xu vars: (x1, x2, u)
    let f1 = Poly::from_terms(3, &[(vec![0, 1, 0], 1.0)]);
    let f2 = Poly::from_terms(
        3,
        &[
            (vec![1, 0, 0], -1.0),
            (vec![0, 1, 0], -0.5),
            (vec![2, 1, 0], 0.5),
            (vec![1, 0, 1], 1.0),
        ],
    );
    let l = Poly::from_terms(3, &[(vec![0, 2, 0], 0.5), (vec![0, 0, 2], 0.5)]);
    OcpModel::new(2, 1, vec![f1, f2], l, 0.0).expect("registry model is valid")
}

/// Double integrator with unit quadratic weights; ARE solution
/// P = [[sqrt(3), 1], [1, sqrt(3)]].
pub fn double_integrator_lqr() -> OcpModel {
    let f1 = Poly::from_terms(3, &[(vec![0, 1, 0], 1.0)]);
    let f2 = Poly::from_terms(3, &[(vec![0, 0, 1], 1.0)]);
    let l = Poly::from_terms(
        3,
        &[
            (vec![2, 0, 0], 0.5),
            (vec![0, 2, 0], 0.5),
            (vec![0, 0, 2], 0.5),
        ],
    );
    OcpModel::new(2, 1, vec![f1, f2], l, 0.0).expect("registry model is valid")
}

/// Look up a built-in problem by name.
pub fn registry(name: &str) -> Option<OcpModel> {
    match name {
        "vanderpol" => Some(vanderpol()),
        "double_integrator_lqr" => Some(double_integrator_lqr()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vdp_field() -> PontryaginField {
        let model = vanderpol();
        let ustar = minimize_hamiltonian_control(&model).unwrap();
        pontryagin_field(&model, &ustar).unwrap()
    }

    #[test]
    fn vanderpol_structure_flags() {
        let m = vanderpol();
        assert!(m.affine_in_u);
        assert!(m.quadratic_in_u);
    }

    #[test]
    fn vanderpol_hamiltonian() {
        // H = l1 x2 + l2 (-x1 - (1-x1^2) x2 / 2 + x1 u) + (x2^2 + u^2)/2
        let h = hamiltonian(&vanderpol());
        // xul vars: (x1, x2, u, l1, l2)
        let expected = Poly::from_terms(
            5,
            &[
                (vec![0, 1, 0, 1, 0], 1.0),
                (vec![1, 0, 0, 0, 1], -1.0),
                (vec![0, 1, 0, 0, 1], -0.5),
                (vec![2, 1, 0, 0, 1], 0.5),
                (vec![1, 0, 1, 0, 1], 1.0),
                (vec![0, 2, 0, 0, 0], 0.5),
                (vec![0, 0, 2, 0, 0], 0.5),
            ],
        );
        assert!(h.sub(&expected).is_zero());
    }

    #[test]
    fn zero_data_hamiltonian_is_zero() {
        let f = vec![Poly::zero(2), Poly::zero(2)];
        let model = OcpModel::new(2, 0, f, Poly::zero(2), 0.0).unwrap();
        assert!(hamiltonian(&model).is_zero());
    }

    #[test]
    fn lqr_hamiltonian_matches_definition() {
        let h = hamiltonian(&double_integrator_lqr());
        let expected = Poly::from_terms(
            5,
            &[
                (vec![0, 1, 0, 1, 0], 1.0),
                (vec![0, 0, 1, 0, 1], 1.0),
                (vec![2, 0, 0, 0, 0], 0.5),
                (vec![0, 2, 0, 0, 0], 0.5),
                (vec![0, 0, 2, 0, 0], 0.5),
            ],
        );
        assert!(h.sub(&expected).is_zero());
    }

    #[test]
    fn vanderpol_ustar_closed_form() {
        // u*(x, l) = -x1 l2
        let ustar = minimize_hamiltonian_control(&vanderpol()).unwrap();
        let UStar::ClosedForm { u_expr } = ustar else {
            panic!("expected closed form");
        };
        let expected = Poly::from_terms(4, &[(vec![1, 0, 0, 1], -1.0)]);
        assert!(u_expr[0].sub(&expected).is_zero());
    }

    #[test]
    fn ustar_zero_when_f_control_free() {
        // l = u^2/2, f independent of u -> u* = 0
        let f = vec![Poly::var(2, 0)];
        let l = Poly::from_terms(2, &[(vec![0, 2], 0.5)]);
        let model = OcpModel::new(1, 1, f, l, 0.0).unwrap();
        let UStar::ClosedForm { u_expr } = minimize_hamiltonian_control(&model).unwrap() else {
            panic!("expected closed form");
        };
        assert!(u_expr[0].is_zero());
    }

    #[test]
    fn lqr_ustar_is_minus_rinv_bt_lambda() {
        // u* = -l2 for the double integrator (R = 1, B = (0,1))
        let UStar::ClosedForm { u_expr } =
            minimize_hamiltonian_control(&double_integrator_lqr()).unwrap()
        else {
            panic!("expected closed form");
        };
        let expected = Poly::from_terms(4, &[(vec![0, 0, 0, 1], -1.0)]);
        assert!(u_expr[0].sub(&expected).is_zero());
    }

    #[test]
    fn vanderpol_field_components() {
        // Derived by substituting u* = -x1 l2 and differentiating;
        // consistency cross-checked by div F = 0 and the symmetry of
        // Omega F_y, both enforced at construction.
        let field = vdp_field();
        // y vars: (x1, x2, l1, l2)
        let f1 = Poly::from_terms(4, &[(vec![0, 1, 0, 0], 1.0)]);
        let f2 = Poly::from_terms(
            4,
            &[
                (vec![1, 0, 0, 0], -1.0),
                (vec![0, 1, 0, 0], -0.5),
                (vec![2, 1, 0, 0], 0.5),
                (vec![2, 0, 0, 1], -1.0),
            ],
        );
        let f3 = Poly::from_terms(
            4,
            &[
                (vec![0, 0, 0, 1], 1.0),
                (vec![1, 1, 0, 1], -1.0),
                (vec![1, 0, 0, 2], 1.0),
            ],
        );
        let f4 = Poly::from_terms(
            4,
            &[
                (vec![0, 0, 1, 0], -1.0),
                (vec![0, 0, 0, 1], 0.5),
                (vec![2, 0, 0, 1], -0.5),
                (vec![0, 1, 0, 0], -1.0),
            ],
        );
        for (got, want) in field.components.iter().zip([f1, f2, f3, f4]) {
            assert!(got.sub(&want).is_zero(), "component mismatch: {} vs {}", got, want);
        }
    }

    #[test]
    fn vanderpol_manifold_invariance() {
        // On the exact stable manifold l = x, the costate dynamics must
        // track the state dynamics: F_3 = F_1 and F_4 = F_2 at l = x.
        let field = vdp_field();
        for &(x1, x2) in &[(0.3, -0.2), (0.5, 0.5), (-0.4, 0.1), (0.05, -0.45)] {
            let y = [x1, x2, x1, x2];
            let v = field.eval(&y);
            assert!((v[2] - v[0]).abs() < 1e-12);
            assert!((v[3] - v[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn lqr_field_jacobian_constant_hamiltonian_matrix() {
        let model = double_integrator_lqr();
        let ustar = minimize_hamiltonian_control(&model).unwrap();
        let field = pontryagin_field(&model, &ustar).unwrap();
        // F_y = [[A, -B R^-1 B^T], [-Q, -A^T]]
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, -1.0, //
                -1.0, 0.0, 0.0, 0.0, //
                0.0, -1.0, -1.0, 0.0,
            ],
        );
        for y in [[0.0; 4], [0.3, -0.7, 1.1, 0.2]] {
            let j = field.eval_jacobian(&y);
            assert!((j - &expected).abs().max() < 1e-14);
        }
    }

    #[test]
    fn divergence_identically_zero() {
        assert!(vdp_field().divergence().is_zero());
    }

    #[test]
    fn newton_implicit_matches_closed_form() {
        // force the implicit path on the LQR model
        let model = double_integrator_lqr();
        let h = hamiltonian(&model);
        let h_u = vec![h.diff(2).unwrap()];
        let h_uu = vec![vec![h_u[0].diff(2).unwrap()]];
        let implicit = UStar::NewtonImplicit {
            h_u,
            h_uu,
            tol: 1e-12,
            max_iter: 50,
        };
        let y = [0.4, -0.3, 0.7, 1.3];
        let u = implicit.eval(&model, &y).unwrap();
        assert!((u[0] - (-1.3)).abs() < 1e-10);
    }

    #[test]
    fn nonconvex_control_hessian_rejected() {
        // l = -u^2/2 makes H_uu negative definite; f = x u couples the
        // control so the Newton gradient is nonzero at u = 0
        let f = vec![Poly::from_terms(2, &[(vec![1, 1], 1.0)])];
        let l = Poly::from_terms(2, &[(vec![0, 2], -0.5)]);
        let model = OcpModel::new(1, 1, f, l, 0.0).unwrap();
        assert!(!model.quadratic_in_u);
        let ustar = minimize_hamiltonian_control(&model).unwrap();
        assert!(matches!(
            ustar.eval(&model, &[0.1, 0.2]),
            Err(CoreError::HessianNotPositiveDefinite)
        ));
    }
}
