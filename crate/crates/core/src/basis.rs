//! Orthonormal tensor-product Legendre basis on a region-of-interest box
//! and tensor Gauss-Legendre quadrature with explicit exactness
//! bookkeeping.

use crate::error::CoreError;
use crate::poly::Poly;

/// Axis-aligned box `Π_k [c_k - h_k, c_k + h_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl BoxDomain {
    pub fn new(center: Vec<f64>, half_width: Vec<f64>) -> Result<Self, CoreError> {
        if center.len() != half_width.len() {
            return Err(CoreError::InvalidModel(
                "box center and half_width must have equal length".into(),
            ));
        }
        if half_width.iter().any(|&h| !(h > 0.0)) {
            return Err(CoreError::InvalidModel(
                "box half widths must be positive".into(),
            ));
        }
        Ok(BoxDomain { center, half_width })
    }

    /// The cube `[-1/2, 1/2]^dim`.
    pub fn unit(dim: usize) -> Self {
        BoxDomain {
            center: vec![0.0; dim],
            half_width: vec![0.5; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn volume(&self) -> f64 {
        self.half_width.iter().map(|h| 2.0 * h).product()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(self.center.iter().zip(&self.half_width))
            .all(|(&zi, (&c, &h))| (zi - c).abs() <= h + 1e-15)
    }
}

/// First `count` multi-indices in N^dim, graded order (total degree
/// ascending), ties broken with the highest leading exponent first.
pub fn graded_index_set(dim: usize, count: usize) -> Vec<Vec<u32>> {
    assert!(count >= 1, "count must be at least 1");
    let mut out = Vec::with_capacity(count);
    let mut degree = 0u32;
    while out.len() < count {
        let mut block = Vec::new();
        compositions(dim, degree, &mut vec![0; dim], 0, &mut block);
        for idx in block {
            out.push(idx);
            if out.len() == count {
                return out;
            }
        }
        degree += 1;
    }
    out
}

/// All ways to place `remaining` across positions `pos..dim`, emitted
/// with larger leading entries first.
fn compositions(dim: usize, remaining: u32, cur: &mut Vec<u32>, pos: usize, out: &mut Vec<Vec<u32>>) {
    if pos == dim - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for v in (0..=remaining).rev() {
        cur[pos] = v;
        compositions(dim, remaining - v, cur, pos + 1, out);
        cur[pos] = 0;
    }
}

/// Ordered orthonormal basis over a box.
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub box_domain: BoxDomain,
    pub indices: Vec<Vec<u32>>,
    pub functions: Vec<Poly>,
    pub degrees: Vec<u32>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.degrees.iter().copied().max().unwrap_or(0)
    }
}

/// Legendre polynomials P_0..P_n on [-1,1] (unnormalized), univariate.
fn legendre_raw(n: u32) -> Vec<Poly> {
    let t = Poly::var(1, 0);
    let mut ps = vec![Poly::constant(1, 1.0)];
    if n >= 1 {
        ps.push(t.clone());
    }
    for k in 1..n {
        let kf = k as f64;
        // (k+1) P_{k+1} = (2k+1) t P_k - k P_{k-1}
        let next = t
            .mul(&ps[k as usize])
            .scale(2.0 * kf + 1.0)
            .sub(&ps[(k - 1) as usize].scale(kf))
            .scale(1.0 / (kf + 1.0));
        ps.push(next);
    }
    ps
}

/// Builds φ_α(z) = Π_k L̂_{α_k}((z_k - c_k)/h_k) / √h_k with L̂_n the
/// orthonormal Legendre polynomial on [-1,1], so ⟨φ_α, φ_β⟩_{L2(box)}
/// = δ_αβ exactly.
pub fn legendre_basis(box_domain: &BoxDomain, indices: &[Vec<u32>]) -> Result<BasisSet, CoreError> {
    let dim = box_domain.dim();
    let mut seen = std::collections::BTreeSet::new();
    for idx in indices {
        if idx.len() != dim {
            return Err(CoreError::InvalidModel(format!(
                "multi-index {:?} has wrong dimension (box is {}-dimensional)",
                idx, dim
            )));
        }
        if !seen.insert(idx.clone()) {
            return Err(CoreError::InvalidModel(format!(
                "duplicate basis multi-index {:?}",
                idx
            )));
        }
    }
    let max_per_dim = indices
        .iter()
        .flat_map(|idx| idx.iter().copied())
        .max()
        .unwrap_or(0);
    let raw = legendre_raw(max_per_dim);

    // univariate orthonormal factors per dimension, composed with the
    // affine map t = (z_k - c_k)/h_k
    let factors: Vec<Vec<Poly>> = (0..dim)
        .map(|k| {
            let c = box_domain.center[k];
            let h = box_domain.half_width[k];
            let image = Poly::var(dim, k)
                .add(&Poly::constant(dim, -c))
                .scale(1.0 / h);
            raw.iter()
                .enumerate()
                .map(|(n, p)| {
                    let norm = ((2.0 * n as f64 + 1.0) / (2.0 * h)).sqrt();
                    p.compose(std::slice::from_ref(&image)).scale(norm)
                })
                .collect()
        })
        .collect();

    let mut functions = Vec::with_capacity(indices.len());
    let mut degrees = Vec::with_capacity(indices.len());
    for idx in indices {
        let mut phi = Poly::constant(dim, 1.0);
        for (k, &a) in idx.iter().enumerate() {
            phi = phi.mul(&factors[k][a as usize]);
        }
        functions.push(phi);
        degrees.push(idx.iter().sum());
    }
    Ok(BasisSet {
        box_domain: box_domain.clone(),
        indices: indices.to_vec(),
        functions,
        degrees,
    })
}

/// Tensor Gauss-Legendre rule on a box.
///
/// Stored per dimension; polynomial integrals are evaluated through
/// per-dimension moment tables (algebraically identical to the full
/// tensor node sum, but linear in the number of terms), while arbitrary
/// integrands can be integrated over the explicit tensor grid.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub box_domain: BoxDomain,
    pub nodes_per_dim: usize,
    /// Mapped 1D nodes per dimension.
    nodes_1d: Vec<Vec<f64>>,
    /// Mapped 1D weights per dimension.
    weights_1d: Vec<Vec<f64>>,
    /// moments[k][a] = Σ_j w_{k,j} z_{k,j}^a for a = 0..=exact_degree.
    moments: Vec<Vec<f64>>,
    /// Exact through this degree per dimension (2m - 1).
    pub exact_degree: u32,
}

/// Gauss-Legendre nodes/weights on [-1,1] by Newton iteration on P_m.
fn gauss_legendre_1d(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // evaluate P_m and P_m' by recurrence
            let (mut p0, mut p1) = (1.0, t);
            for k in 1..m {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * t * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / dp;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        nodes[i] = -t.abs();
        nodes[m - 1 - i] = t.abs();
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    (nodes, weights)
}

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        self.box_domain.dim()
    }

    /// Full tensor node count.
    pub fn num_nodes(&self) -> usize {
        self.nodes_per_dim.pow(self.dim() as u32)
    }

    /// Σ weights over the tensor grid (= box volume).
    pub fn total_weight(&self) -> f64 {
        (0..self.dim())
            .map(|k| self.weights_1d[k].iter().sum::<f64>())
            .product()
    }

    fn check_degree(&self, needed: u32) -> Result<(), CoreError> {
        if needed > self.exact_degree {
            Err(CoreError::QuadratureOrderInsufficient {
                needed,
                available: self.exact_degree,
            })
        } else {
            Ok(())
        }
    }

    /// Exact integral of a polynomial over the box. Rejected (never
    /// silently inexact) if any per-dimension degree exceeds the rule's
    /// exactness.
    pub fn integrate_poly(&self, p: &Poly) -> Result<f64, CoreError> {
        assert_eq!(p.nvars(), self.dim());
        let mut acc = 0.0;
        for (e, c) in p.terms() {
            let mut t = *c;
            for (k, &a) in e.iter().enumerate() {
                self.check_degree(a)?;
                t *= self.moments[k][a as usize];
            }
            acc += t;
        }
        Ok(acc)
    }

    /// ⟨p, q⟩_{L2(box)} by exact quadrature.
    pub fn inner_product(&self, p: &Poly, q: &Poly) -> Result<f64, CoreError> {
        self.integrate_poly(&p.mul(q))
    }

    /// Integrate an arbitrary function over the explicit tensor grid
    /// (not exactness-checked; used for non-polynomial integrands).
    pub fn integrate_fn<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let dim = self.dim();
        let m = self.nodes_per_dim;
        let total = self.num_nodes();
        let mut point = vec![0.0; dim];
        let mut acc = 0.0;
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            for k in (0..dim).rev() {
                let j = rem % m;
                rem /= m;
                point[k] = self.nodes_1d[k][j];
                w *= self.weights_1d[k][j];
            }
            acc += w * f(&point);
        }
        acc
    }
}

pub fn gauss_legendre_rule(box_domain: &BoxDomain, nodes_per_dim: usize) -> QuadratureRule {
    assert!(nodes_per_dim >= 1, "need at least one node per dimension");
    let (t, w) = gauss_legendre_1d(nodes_per_dim);
    let exact_degree = 2 * nodes_per_dim as u32 - 1;
    let dim = box_domain.dim();
    let mut nodes_1d = Vec::with_capacity(dim);
    let mut weights_1d = Vec::with_capacity(dim);
    let mut moments = Vec::with_capacity(dim);
    for k in 0..dim {
        let c = box_domain.center[k];
        let h = box_domain.half_width[k];
        let zk: Vec<f64> = t.iter().map(|&ti| c + h * ti).collect();
        let wk: Vec<f64> = w.iter().map(|&wi| h * wi).collect();
        let mk: Vec<f64> = (0..=exact_degree)
            .map(|a| {
                zk.iter()
                    .zip(&wk)
                    .map(|(&z, &wi)| wi * z.powi(a as i32))
                    .sum()
            })
            .collect();
        nodes_1d.push(zk);
        weights_1d.push(wk);
        moments.push(mk);
    }
    QuadratureRule {
        box_domain: box_domain.clone(),
        nodes_per_dim,
        nodes_1d,
        weights_1d,
        moments,
        exact_degree,
    }
}

/// Default rule order covering every Galerkin integrand with headroom:
/// nodes_per_dim = ceil((d_basis + d_field + 1)/2) + 1.
pub fn default_nodes_per_dim(basis_degree: u32, field_degree: u32) -> usize {
    ((basis_degree + field_degree + 1) as usize).div_ceil(2) + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_order_first_entries() {
        assert_eq!(graded_index_set(4, 1), vec![vec![0, 0, 0, 0]]);
        assert_eq!(
            graded_index_set(4, 5),
            vec![
                vec![0, 0, 0, 0],
                vec![1, 0, 0, 0],
                vec![0, 1, 0, 0],
                vec![0, 0, 1, 0],
                vec![0, 0, 0, 1],
            ]
        );
        assert_eq!(
            graded_index_set(2, 6),
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2],
            ]
        );
    }

    #[test]
    fn graded_set_counts_degree_slices() {
        // dim 4: 1 constant + 4 linear + 10 quadratic = 15
        let idx = graded_index_set(4, 15);
        assert_eq!(idx.iter().filter(|a| a.iter().sum::<u32>() == 2).count(), 10);
        // 15 + 20 cubics = 35
        let idx = graded_index_set(4, 35);
        assert_eq!(idx.iter().filter(|a| a.iter().sum::<u32>() == 3).count(), 20);
    }

    #[test]
    fn constant_basis_function_on_unit_box() {
        let b = BoxDomain::unit(4);
        let basis = legendre_basis(&b, &[vec![0, 0, 0, 0]]).unwrap();
        assert!(basis.functions[0]
            .sub(&Poly::constant(4, 1.0))
            .is_zero());
    }

    #[test]
    fn linear_basis_function_on_unit_box() {
        // α = (1,0,0,0) on [-1/2,1/2]^4 -> sqrt(12) z1
        let b = BoxDomain::unit(4);
        let basis = legendre_basis(&b, &[vec![1, 0, 0, 0]]).unwrap();
        let expected = Poly::var(4, 0).scale(12f64.sqrt());
        assert!(basis.functions[0].sub(&expected).max_abs_coeff() < 1e-12);
    }

    #[test]
    fn gram_matrix_of_first_15_is_identity() {
        let b = BoxDomain::unit(4);
        let basis = legendre_basis(&b, &graded_index_set(4, 15)).unwrap();
        let quad = gauss_legendre_rule(&b, 3);
        for i in 0..15 {
            for j in 0..15 {
                let g = quad
                    .inner_product(&basis.functions[i], &basis.functions[j])
                    .unwrap();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() <= 1e-12, "G[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn orthonormal_on_shifted_box() {
        let b = BoxDomain::new(vec![0.3, -1.0], vec![0.7, 2.5]).unwrap();
        let basis = legendre_basis(&b, &graded_index_set(2, 10)).unwrap();
        let quad = gauss_legendre_rule(&b, 5);
        for i in 0..10 {
            for j in 0..10 {
                let g = quad
                    .inner_product(&basis.functions[i], &basis.functions[j])
                    .unwrap();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() <= 1e-12, "G[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn midpoint_rule_on_unit_square() {
        let quad = gauss_legendre_rule(&BoxDomain::unit(2), 1);
        assert_eq!(quad.num_nodes(), 1);
        assert!((quad.total_weight() - 1.0).abs() < 1e-15);
        let one = Poly::constant(2, 1.0);
        assert!((quad.integrate_poly(&one).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn z_squared_integral_two_nodes() {
        // ∫_{-1/2}^{1/2} z^2 dz = 1/12
        let quad = gauss_legendre_rule(&BoxDomain::unit(1), 2);
        let z2 = Poly::from_terms(1, &[(vec![2], 1.0)]);
        assert!((quad.integrate_poly(&z2).unwrap() - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn weight_sum_is_volume() {
        for m in [1, 2, 5, 9] {
            let quad = gauss_legendre_rule(&BoxDomain::unit(4), m);
            assert!((quad.total_weight() - 1.0).abs() < 1e-13);
        }
        let b = BoxDomain::new(vec![0.0, 1.0], vec![2.0, 0.25]).unwrap();
        let quad = gauss_legendre_rule(&b, 4);
        assert!((quad.total_weight() - b.volume()).abs() < 1e-13);
    }

    #[test]
    fn insufficient_order_rejected() {
        let quad = gauss_legendre_rule(&BoxDomain::unit(1), 2); // exact through degree 3
        let z4 = Poly::from_terms(1, &[(vec![4], 1.0)]);
        assert!(matches!(
            quad.integrate_poly(&z4),
            Err(CoreError::QuadratureOrderInsufficient {
                needed: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn node_sum_matches_moment_path() {
        let b = BoxDomain::new(vec![0.1, -0.2], vec![0.8, 1.3]).unwrap();
        let quad = gauss_legendre_rule(&b, 4);
        let p = Poly::from_terms(
            2,
            &[
                (vec![3, 2], 0.7),
                (vec![0, 5], -1.2),
                (vec![2, 0], 0.25),
                (vec![0, 0], 3.0),
            ],
        );
        let via_moments = quad.integrate_poly(&p).unwrap();
        let via_nodes = quad.integrate_fn(|z| p.eval(z));
        assert!((via_moments - via_nodes).abs() < 1e-12 * via_nodes.abs().max(1.0));
    }

    #[test]
    fn exactness_against_monomial_oracle() {
        // closed form: ∫_{c-h}^{c+h} z^a dz = ((c+h)^{a+1} - (c-h)^{a+1})/(a+1)
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let b = BoxDomain::new(vec![0.4, -0.3, 0.0], vec![0.9, 0.5, 1.1]).unwrap();
        let quad = gauss_legendre_rule(&b, 5); // exact through degree 9
        let exact_mono = |k: usize, a: u32| -> f64 {
            let (c, h) = (b.center[k], b.half_width[k]);
            ((c + h).powi(a as i32 + 1) - (c - h).powi(a as i32 + 1)) / (a as f64 + 1.0)
        };
        for _ in 0..100 {
            let mut terms = Vec::new();
            for _ in 0..6 {
                let e: Vec<u32> = (0..3).map(|_| rng.gen_range(0..=9u32)).collect();
                terms.push((e, rng.gen_range(-2.0..2.0)));
            }
            let p = Poly::from_terms(3, &terms);
            let got = quad.integrate_poly(&p).unwrap();
            let want: f64 = p
                .terms()
                .map(|(e, c)| {
                    c * e
                        .iter()
                        .enumerate()
                        .map(|(k, &a)| exact_mono(k, a))
                        .product::<f64>()
                })
                .sum();
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1.0),
                "quadrature {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn basis_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let b = BoxDomain::unit(4);
        let basis = legendre_basis(&b, &graded_index_set(4, 15)).unwrap();
        let eps = 1e-6;
        for phi in &basis.functions {
            let grad = phi.gradient();
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect();
            for k in 0..4 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += eps;
                zm[k] -= eps;
                let fd = (phi.eval(&zp) - phi.eval(&zm)) / (2.0 * eps);
                assert!((grad[k].eval(&z) - fd).abs() < 1e-7);
            }
        }
    }
}
