//! Galerkin discretization of the lifted transport operator, complex
//! eigendecomposition with left eigenvectors, mirrored-pair detection,
//! and eigenfunction assembly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::basis::{BasisSet, QuadratureRule};
use crate::error::CoreError;
use crate::model::PontryaginField;
use crate::poly::Poly;
use crate::structure::symplectic_form;

type C64 = Complex<f64>;

/// L phi = F^T grad phi, exact.
pub fn apply_lift(field: &PontryaginField, phi: &Poly) -> Poly {
    let dim = field.dim();
    assert_eq!(phi.nvars(), dim);
    let mut out = Poly::zero(dim);
    for (k, fk) in field.components.iter().enumerate() {
        let d = phi.diff(k).expect("var in range");
        out = out.add(&fk.mul(&d));
    }
    out
}

/// The projected operator M_ij = <L phi_i, phi_j> (M^T approximates L
/// on the basis span; left eigenvectors of M give eigenfunctions).
#[derive(Debug, Clone)]
pub struct GalerkinMatrix {
    pub m: DMatrix<f64>,
    pub basis: BasisSet,
}

pub fn assemble_galerkin(
    field: &PontryaginField,
    basis: &BasisSet,
    quad: &QuadratureRule,
) -> Result<GalerkinMatrix, CoreError> {
    let n = basis.len();
    let lifted: Vec<Poly> = basis
        .functions
        .iter()
        .map(|phi| apply_lift(field, phi))
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = quad.inner_product(&lifted[i], &basis.functions[j])?;
        }
    }
    Ok(GalerkinMatrix {
        m,
        basis: basis.clone(),
    })
}

/// A left eigenpair of M (right eigenpair of M^T).
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub kappa: C64,
    /// Normalized: unit 2-norm, first significant entry real-positive.
    pub vector: DVector<C64>,
    /// ‖M^T a − κ a‖₂.
    pub residual: f64,
    /// Eigenvector mass concentrated (> 90%) on the highest-degree
    /// basis slice — truncation-dominated, excluded from pairing.
    pub flagged: bool,
}

fn normalize_phase(v: &mut DVector<C64>) {
    let max = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    let norm = v.norm();
    *v /= C64::new(norm, 0.0);
    let lead = v.iter().find(|c| c.norm() > 1e-6 * max).copied();
    if let Some(c) = lead {
        let phase = c / c.norm();
        *v *= phase.conj();
    }
}

/// One inverse-iteration solve for the eigenvector of `mt` at shift
/// `kappa`, kept independent of `prior` vectors from the same
/// eigenvalue cluster.
fn inverse_iteration(
    mt: &DMatrix<C64>,
    kappa: C64,
    prior: &[DVector<C64>],
    start: usize,
    scale: f64,
) -> DVector<C64> {
    let n = mt.nrows();
    let jitter = 1e-12 * scale.max(1.0);
    let shifted = mt - DMatrix::from_diagonal_element(n, n, kappa + C64::new(jitter, jitter));
    let lu = shifted.lu();
    // dense deterministic start: a sparse start can lie in an invariant
    // subspace that excludes the target eigenvector
    let mut v: DVector<C64> = DVector::from_fn(n, |i, _| {
        C64::new(
            1.0 + ((i * 31 + start * 17) % 97) as f64 / 97.0,
            0.5 * ((i * 13 + start * 7) % 89) as f64 / 89.0,
        )
    });
    for _ in 0..8 {
        for p in prior {
            let coef = p.dotc(&v);
            v -= p * coef;
        }
        let nv = v.norm();
        if nv == 0.0 {
            // start vector lay in the span of prior vectors; shift it
            v = DVector::from_fn(n, |i, _| {
                C64::new(((i + start) % 7) as f64 + 1.0, ((i * 3 + start) % 5) as f64)
            });
            continue;
        }
        v /= C64::new(nv, 0.0);
        match lu.solve(&v) {
            Some(w) if w.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                let nw = w.norm();
                if nw == 0.0 {
                    break;
                }
                v = w / C64::new(nw, 0.0);
            }
            _ => break,
        }
        let resid = (mt * &v - &v * kappa).norm();
        if resid <= 1e-12 * scale.max(1.0) {
            break;
        }
    }
    for p in prior {
        let coef = p.dotc(&v);
        v -= p * coef;
    }
    let nv = v.norm();
    if nv > 0.0 {
        v /= C64::new(nv, 0.0);
    }
    v
}

fn slice_mass(vector: &DVector<C64>, basis: &BasisSet) -> f64 {
    let max_deg = basis.max_degree();
    let top: f64 = vector
        .iter()
        .zip(&basis.degrees)
        .filter(|(_, &d)| d == max_deg)
        .map(|(c, _)| c.norm_sqr())
        .sum();
    top / vector.norm_squared().max(1e-300)
}

/// Full complex left eigendecomposition of M.
///
/// Eigenvalues come from the real Schur form; eigenvectors from shifted
/// inverse iteration on M^T, with in-cluster orthogonalization for
/// multiple eigenvalues. Complex-conjugate closure is enforced by
/// construction: the vector for a conjugate eigenvalue is the conjugate
/// vector.
pub fn eigendecompose(gm: &GalerkinMatrix, tol: f64) -> Result<Vec<EigenPair>, CoreError> {
    let n = gm.m.nrows();
    let scale = gm.m.norm();
    let mt_c: DMatrix<C64> = gm.m.transpose().map(|x| C64::new(x, 0.0));
    // bounded Schur iteration: the default eigenvalue path iterates
    // without limit and can spin forever on degenerate matrices
    let schur = nalgebra::linalg::Schur::try_new(gm.m.clone(), 1e-14, 10_000).ok_or(CoreError::EigenNonConvergence)?;
    let mut eigvals: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    // deterministic order: real part descending, then imag descending
    eigvals.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap()
            .then(b.im.partial_cmp(&a.im).unwrap())
    });
    let im_eps = 1e-10 * scale.max(1.0);
    let cluster_tol = 1e-8 * scale.max(1.0);

    let mut out: Vec<EigenPair> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for idx in 0..n {
        if used[idx] {
            continue;
        }
        used[idx] = true;
        let mut kappa = eigvals[idx];
        if kappa.im.abs() <= im_eps {
            kappa.im = 0.0;
        } else if kappa.im < 0.0 {
            // conjugate partner handled when the upper one is met
            kappa = kappa.conj();
        }
        // in-cluster prior vectors (for multiplicity)
        let prior: Vec<DVector<C64>> = out
            .iter()
            .filter(|e| (e.kappa - kappa).norm() <= cluster_tol)
            .map(|e| e.vector.clone())
            .collect();
        let mut v = inverse_iteration(&mt_c, kappa, &prior, idx + prior.len(), scale);
        normalize_phase(&mut v);
        if kappa.im == 0.0 {
            // real eigenvalue of a real matrix: drop roundoff imaginary part
            let im_mass: f64 = v.iter().map(|c| c.im * c.im).sum::<f64>().sqrt();
            if im_mass <= 1e-6 {
                v = v.map(|c| C64::new(c.re, 0.0));
                let nv = v.norm();
                if nv > 0.0 {
                    v /= C64::new(nv, 0.0);
                }
            }
        }
        let residual = (&mt_c * &v - &v * kappa).norm();
        if residual > tol * scale.max(1.0) {
            return Err(CoreError::EigenResidualTooLarge {
                index: idx,
                residual,
            });
        }
        // only meaningful when a spectral edge exists above the
        // physically resolved degrees
        let flagged = gm.basis.max_degree() >= 2 && slice_mass(&v, &gm.basis) > 0.9;
        out.push(EigenPair {
            kappa,
            vector: v.clone(),
            residual,
            flagged,
        });
        if kappa.im != 0.0 {
            // consume the conjugate eigenvalue and emit its conjugate pair
            let partner = (0..n)
                .filter(|&j| !used[j] && eigvals[j].im < -im_eps)
                .min_by(|&a, &b| {
                    let da = (eigvals[a] - kappa.conj()).norm();
                    let db = (eigvals[b] - kappa.conj()).norm();
                    da.partial_cmp(&db).unwrap()
                });
            if let Some(j) = partner {
                used[j] = true;
            }
            let vc = v.map(|c| c.conj());
            let residual_c = (&mt_c * &vc - &vc * kappa.conj()).norm();
            out.push(EigenPair {
                kappa: kappa.conj(),
                vector: vc,
                residual: residual_c,
                flagged,
            });
        }
    }
    Ok(out)
}

/// Mirrored eigenvalue pairing kappa <-> -kappa.
#[derive(Debug, Clone)]
pub struct MirrorPairing {
    /// (i, j, |kappa_i + kappa_j|), each index in at most one pair.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unpaired: Vec<usize>,
}

/// Greedy minimum-defect matching of kappa_i with -kappa_j among
/// non-flagged eigenpairs; flagged ones are listed unpaired.
pub fn mirror_pairs(eigs: &[EigenPair], pair_tol: f64) -> MirrorPairing {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..eigs.len() {
        for j in (i + 1)..eigs.len() {
            if eigs[i].flagged || eigs[j].flagged {
                continue;
            }
            let defect = (eigs[i].kappa + eigs[j].kappa).norm();
            if defect <= pair_tol {
                candidates.push((defect, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut taken = vec![false; eigs.len()];
    let mut pairs = Vec::new();
    for (defect, i, j) in candidates {
        if !taken[i] && !taken[j] {
            taken[i] = true;
            taken[j] = true;
            pairs.push((i, j, defect));
        }
    }
    let unpaired = (0..eigs.len()).filter(|&i| !taken[i]).collect();
    MirrorPairing { pairs, unpaired }
}

/// Default mirrored-pairing tolerance 1e-6 * max(1, max |kappa|).
pub fn default_pair_tol(eigs: &[EigenPair]) -> f64 {
    let max_k = eigs.iter().map(|e| e.kappa.norm()).fold(0.0, f64::max);
    1e-6 * max_k.max(1.0)
}

/// An approximate eigenfunction Psi = sum_i a_i phi_i with complex
/// coefficients, stored as a real/imaginary polynomial pair.
#[derive(Debug, Clone)]
pub struct Eigenfunction {
    pub kappa: C64,
    pub psi_re: Poly,
    pub psi_im: Poly,
}

impl Eigenfunction {
    pub fn from_pair(pair: &EigenPair, basis: &BasisSet) -> Self {
        let dim = basis.box_domain.dim();
        let mut re = Poly::zero(dim);
        let mut im = Poly::zero(dim);
        for (a, phi) in pair.vector.iter().zip(&basis.functions) {
            re = re.add(&phi.scale(a.re));
            im = im.add(&phi.scale(a.im));
        }
        Eigenfunction {
            kappa: pair.kappa,
            psi_re: re,
            psi_im: im,
        }
    }

    pub fn eval(&self, y: &[f64]) -> C64 {
        C64::new(self.psi_re.eval(y), self.psi_im.eval(y))
    }
}

/// omega(Psi1, Psi2) under the bilinear (non-conjugating) extension.
pub fn symplectic_coupling(
    p1: &Eigenfunction,
    p2: &Eigenfunction,
    quad: &QuadratureRule,
) -> Result<C64, CoreError> {
    let rr = symplectic_form(&p1.psi_re, &p2.psi_re, quad)?;
    let ii = symplectic_form(&p1.psi_im, &p2.psi_im, quad)?;
    let ri = symplectic_form(&p1.psi_re, &p2.psi_im, quad)?;
    let ir = symplectic_form(&p1.psi_im, &p2.psi_re, quad)?;
    Ok(C64::new(rr - ii, ri + ir))
}
