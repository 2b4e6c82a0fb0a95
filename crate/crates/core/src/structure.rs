//! Symplectic machinery: the canonical form Omega, the bilinear form
//! omega, monodromy symplecticity checks, the adjoint identity of the
//! lifted operator, and skew Gram-Schmidt.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BoxDomain, QuadratureRule};
use crate::error::CoreError;
use crate::model::PontryaginField;
use crate::poly::Poly;
use crate::sim::{integrate, IntegrateOpts};
use crate::spectral::apply_lift;

/// The canonical symplectic matrix Omega = [[0, I], [-I, 0]].
pub fn omega_matrix(n_x: usize) -> DMatrix<f64> {
    let dim = 2 * n_x;
    DMatrix::from_fn(dim, dim, |i, j| {
        if i < n_x && j == i + n_x {
            1.0
        } else if i >= n_x && j == i - n_x {
            -1.0
        } else {
            0.0
        }
    })
}

/// omega(phi, Phi) = integral over the box of grad(phi)^T Omega
/// grad(Phi), computed by exact quadrature.
pub fn symplectic_form(
    phi: &Poly,
    psi: &Poly,
    quad: &QuadratureRule,
) -> Result<f64, CoreError> {
    let dim = quad.dim();
    assert_eq!(phi.nvars(), dim);
    assert_eq!(psi.nvars(), dim);
    assert_eq!(dim % 2, 0, "phase space dimension must be even");
    let n_x = dim / 2;
    let mut integrand = Poly::zero(dim);
    for i in 0..n_x {
        let a = phi.diff(i)?.mul(&psi.diff(n_x + i)?);
        let b = phi.diff(n_x + i)?.mul(&psi.diff(i)?);
        integrand = integrand.add(&a).sub(&b);
    }
    quad.integrate_poly(&integrand)
}

/// Structural defect report; all fields non-negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureReport {
    /// max over samples of ‖Omega F_y − (Omega F_y)^T‖_∞.
    pub symmetry_defect: f64,
    /// max over samples of |div F|.
    pub divergence: f64,
    /// ‖G^T Omega G − Omega‖_∞ for the monodromy matrix G.
    pub monodromy_symplectic_defect: f64,
    /// |det G − 1|.
    pub monodromy_det_defect: f64,
    /// |omega(p, Lq) + omega(Lp, q)| for boundary-vanishing p, q.
    pub adjoint_defect: f64,
}

/// Pointwise Hamiltonian-structure check at the given samples:
/// symmetry of Omega F_y and vanishing divergence.
pub fn check_hamiltonian_structure(
    field: &PontryaginField,
    samples: &[Vec<f64>],
) -> StructureReport {
    assert!(!samples.is_empty(), "need at least one sample point");
    let n_x = field.n_x;
    let omega = omega_matrix(n_x);
    let div = field.divergence();
    let mut symmetry_defect = 0.0f64;
    let mut divergence = 0.0f64;
    for z in samples {
        let fy = field.eval_jacobian(z);
        let ofy = &omega * fy;
        symmetry_defect = symmetry_defect.max((&ofy - ofy.transpose()).abs().max());
        divergence = divergence.max(div.eval(z).abs());
    }
    StructureReport {
        symmetry_defect,
        divergence,
        monodromy_symplectic_defect: 0.0,
        monodromy_det_defect: 0.0,
        adjoint_defect: 0.0,
    }
}

/// Monodromy matrix G = dGamma_t/dz at z0, by joint integration of the
/// state and the first-order variational equation G' = F_y(Gamma_s) G.
pub fn monodromy(
    field: &PontryaginField,
    z0: &[f64],
    t: f64,
    tol: f64,
) -> Result<DMatrix<f64>, CoreError> {
    let dim = field.dim();
    assert_eq!(z0.len(), dim);
    if t == 0.0 {
        return Ok(DMatrix::identity(dim, dim));
    }
    // joint state: (z, vec(G))
    let mut y0 = DVector::zeros(dim + dim * dim);
    for (i, &zi) in z0.iter().enumerate() {
        y0[i] = zi;
    }
    for i in 0..dim {
        y0[dim + i * dim + i] = 1.0;
    }
    let rhs = |_t: f64, y: &DVector<f64>| {
        let z = y.rows(0, dim).clone_owned();
        let fz = field.eval(z.as_slice());
        let fy = field.eval_jacobian(z.as_slice());
        let g = DMatrix::from_iterator(dim, dim, y.rows(dim, dim * dim).iter().copied());
        let dg = fy * g;
        let mut dy = DVector::zeros(dim + dim * dim);
        dy.rows_mut(0, dim).copy_from(&fz);
        dy.rows_mut(dim, dim * dim)
            .copy_from(&DVector::from_iterator(dim * dim, dg.iter().copied()));
        dy
    };
    let opts = IntegrateOpts {
        tol,
        ..IntegrateOpts::default()
    };
    let traj = integrate(rhs, &y0, t, &opts)?;
    let yf = traj.last_state();
    Ok(DMatrix::from_iterator(
        dim,
        dim,
        yf.rows(dim, dim * dim).iter().copied(),
    ))
}

/// Symplecticity and volume defects of a monodromy matrix.
pub fn monodromy_defects(g: &DMatrix<f64>, n_x: usize) -> (f64, f64) {
    let omega = omega_matrix(n_x);
    let symp = (g.transpose() * &omega * g - &omega).abs().max();
    let det = (g.determinant() - 1.0).abs();
    (symp, det)
}

/// The weight w(z) = prod_i (h_i^2 - (z_i - c_i)^2)^2, which vanishes
/// to second order on the box boundary.
pub fn boundary_weight(box_domain: &BoxDomain) -> Poly {
    let dim = box_domain.dim();
    let mut w = Poly::constant(dim, 1.0);
    for i in 0..dim {
        let c = box_domain.center[i];
        let h = box_domain.half_width[i];
        // h^2 - (z - c)^2 = (h^2 - c^2) + 2 c z - z^2
        let factor = Poly::from_terms(
            dim,
            &[
                ({
                    let e = vec![0; dim];
                    e
                }, h * h - c * c),
                ({
                    let mut e = vec![0; dim];
                    e[i] = 1;
                    e
                }, 2.0 * c),
                ({
                    let mut e = vec![0; dim];
                    e[i] = 2;
                    e
                }, -1.0),
            ],
        );
        w = w.mul(&factor.mul(&factor));
    }
    w
}

/// Verifies p and its gradient vanish on the boundary of the box, by
/// sampling every face at deterministic points.
fn check_boundary_vanishing(p: &Poly, box_domain: &BoxDomain) -> Result<(), CoreError> {
    let dim = box_domain.dim();
    let grad = p.gradient();
    let fractions = [-0.9, -0.45, 0.0, 0.35, 0.8];
    let scale = p.max_abs_coeff().max(1e-12);
    for face_dim in 0..dim {
        for side in [-1.0, 1.0] {
            for shift in 0..fractions.len() {
                let z: Vec<f64> = (0..dim)
                    .map(|i| {
                        if i == face_dim {
                            box_domain.center[i] + side * box_domain.half_width[i]
                        } else {
                            box_domain.center[i]
                                + box_domain.half_width[i] * fractions[(i + shift) % 5]
                        }
                    })
                    .collect();
                if p.eval(&z).abs() > 1e-9 * scale {
                    return Err(CoreError::NotBoundaryVanishing(format!(
                        "test function does not vanish on face z{} = {:+}",
                        face_dim + 1,
                        side
                    )));
                }
                for g in &grad {
                    if g.eval(&z).abs() > 1e-6 * scale {
                        return Err(CoreError::NotBoundaryVanishing(format!(
                            "test function gradient does not vanish on face z{} = {:+}",
                            face_dim + 1,
                            side
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// |omega(p, Lq) + omega(Lp, q)| — zero for the exact symplectic
/// adjoint when p, q and their gradients vanish on the boundary.
pub fn adjoint_defect(
    field: &PontryaginField,
    p: &Poly,
    q: &Poly,
    quad: &QuadratureRule,
) -> Result<f64, CoreError> {
    check_boundary_vanishing(p, &quad.box_domain)?;
    check_boundary_vanishing(q, &quad.box_domain)?;
    let lp = apply_lift(field, p);
    let lq = apply_lift(field, q);
    let a = symplectic_form(p, &lq, quad)?;
    let b = symplectic_form(&lp, q, quad)?;
    Ok((a + b).abs())
}

/// Skew (symplectic) Gram-Schmidt: transforms 2 n_x functions into a
/// canonical set (q_1..q_n, p_1..p_n) with omega-Gram matrix Omega.
///
/// An identity-Gram target omega(q, q) = I is unattainable (the diagonal
/// omega(q_i, q_i) is identically zero by skew-symmetry), so the
/// canonical symplectic normal form is used instead.
pub fn skew_gram_schmidt(
    fns: &[Poly],
    quad: &QuadratureRule,
) -> Result<Vec<Poly>, CoreError> {
    let dim = fns.len();
    assert_eq!(dim % 2, 0, "need an even number of functions");
    let n = dim / 2;
    let mut pool: Vec<Poly> = fns.to_vec();
    let mut qs: Vec<Poly> = Vec::with_capacity(n);
    let mut ps: Vec<Poly> = Vec::with_capacity(n);
    for _ in 0..n {
        let q = pool.remove(0);
        // partner with the largest |omega(q, g)| among the pool
        let (best, pivot) = pool
            .iter()
            .enumerate()
            .map(|(i, g)| Ok((i, symplectic_form(&q, g, quad)?)))
            .collect::<Result<Vec<_>, CoreError>>()?
            .into_iter()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .ok_or(CoreError::SingularSkewGram { pivot: 0.0 })?;
        if pivot.abs() < 1e-12 {
            return Err(CoreError::SingularSkewGram { pivot });
        }
        let p = pool.remove(best).scale(1.0 / pivot);
        // project the remaining pool onto the omega-complement of (q, p)
        for g in pool.iter_mut() {
            let gq = symplectic_form(g, &q, quad)?;
            let gp = symplectic_form(g, &p, quad)?;
            *g = g.add(&p.scale(gq)).sub(&q.scale(gp));
        }
        qs.push(q);
        ps.push(p);
    }
    qs.extend(ps);
    Ok(qs)
}
