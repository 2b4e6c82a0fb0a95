//! Sparse multivariate polynomials with double-precision coefficients.
//!
//! All symbolic objects in the pipeline (dynamics, Hamiltonians, lifted
//! fields, basis functions, eigenfunctions) are polynomials over a fixed
//! ordered variable list. Terms are kept in a `BTreeMap` keyed by the
//! exponent vector, so term order is canonical and every operation is
//! deterministic.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::CoreError;

/// Relative coefficient threshold below which a term is dropped.
///
/// A term with |c| <= REL_TRIM * max|c| is treated as floating-point
/// residue of an exact cancellation. This keeps "zero polynomial"
/// assertions meaningful after subtraction of equal products.
pub const REL_TRIM: f64 = 1e-14;

/// Sparse polynomial in `nvars` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Poly::zero(nvars);
        if c != 0.0 {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    /// The monomial `z_var`.
    pub fn var(nvars: usize, var: usize) -> Self {
        assert!(var < nvars, "variable index out of range");
        let mut e = vec![0; nvars];
        e[var] = 1;
        let mut p = Poly::zero(nvars);
        p.terms.insert(e, 1.0);
        p
    }

    /// Build from explicit (exponents, coefficient) pairs.
    pub fn from_terms(nvars: usize, terms: &[(Vec<u32>, f64)]) -> Self {
        let mut p = Poly::zero(nvars);
        for (e, c) in terms {
            assert_eq!(e.len(), nvars, "exponent vector length mismatch");
            *p.terms.entry(e.clone()).or_insert(0.0) += c;
        }
        p.trim();
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, &f64)> {
        self.terms.iter()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn total_degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u32 {
        self.terms.keys().map(|e| e[var]).max().unwrap_or(0)
    }

    /// Coefficient of the given exponent vector (0.0 if absent).
    pub fn coeff(&self, exps: &[u32]) -> f64 {
        self.terms.get(exps).copied().unwrap_or(0.0)
    }

    fn trim(&mut self) {
        let scale = self.max_abs_coeff();
        self.trim_scaled(scale);
    }

    /// Drop terms tiny relative to `scale`, the natural magnitude of
    /// the operation that produced this polynomial. Using the operand
    /// scale (not the result's own maximum) lets exact cancellations
    /// collapse to the genuine zero polynomial.
    fn trim_scaled(&mut self, scale: f64) {
        let cut = REL_TRIM * scale.max(self.max_abs_coeff());
        self.terms.retain(|_, c| c.abs() > cut && *c != 0.0);
    }

    pub fn add(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let scale = self.max_abs_coeff().max(other.max_abs_coeff());
        let mut out = self.clone();
        for (e, c) in &other.terms {
            *out.terms.entry(e.clone()).or_insert(0.0) += c;
        }
        out.trim_scaled(scale);
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Poly {
        if s == 0.0 {
            return Poly::zero(self.nvars);
        }
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let scale = self.max_abs_coeff() * other.max_abs_coeff();
        let mut out = Poly::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                *out.terms.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        out.trim_scaled(scale);
        out
    }

    pub fn pow(&self, n: u32) -> Poly {
        let mut out = Poly::constant(self.nvars, 1.0);
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    /// Exact partial derivative with respect to variable `var`.
    pub fn diff(&self, var: usize) -> Result<Poly, CoreError> {
        if var >= self.nvars {
            return Err(CoreError::UnknownVariable {
                var,
                nvars: self.nvars,
            });
        }
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[var] == 0 {
                continue;
            }
            let mut en = e.clone();
            en[var] -= 1;
            *out.terms.entry(en).or_insert(0.0) += c * e[var] as f64;
        }
        out.trim();
        Ok(out)
    }

    /// Gradient with respect to all variables.
    pub fn gradient(&self) -> Vec<Poly> {
        (0..self.nvars)
            .map(|v| self.diff(v).expect("var in range"))
            .collect()
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.nvars);
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut t = *c;
            for (k, &ek) in e.iter().enumerate() {
                if ek > 0 {
                    t *= point[k].powi(ek as i32);
                }
            }
            acc += t;
        }
        acc
    }

    /// Substitute `images[k]` for variable `k`. The images may live in a
    /// different variable space; all must share one `nvars`.
    pub fn compose(&self, images: &[Poly]) -> Poly {
        assert_eq!(images.len(), self.nvars);
        let out_nvars = images
            .first()
            .map(|p| p.nvars)
            .unwrap_or(self.nvars);
        assert!(images.iter().all(|p| p.nvars == out_nvars));

        // cache powers of each image up to its max used exponent
        let mut max_exp = vec![0u32; self.nvars];
        for e in self.terms.keys() {
            for (k, &ek) in e.iter().enumerate() {
                max_exp[k] = max_exp[k].max(ek);
            }
        }
        let powers: Vec<Vec<Poly>> = images
            .iter()
            .enumerate()
            .map(|(k, img)| {
                let mut ps = Vec::with_capacity(max_exp[k] as usize + 1);
                ps.push(Poly::constant(out_nvars, 1.0));
                for n in 1..=max_exp[k] {
                    let prev = ps[(n - 1) as usize].clone();
                    ps.push(prev.mul(img));
                }
                ps
            })
            .collect();

        let mut out = Poly::zero(out_nvars);
        for (e, c) in &self.terms {
            let mut t = Poly::constant(out_nvars, *c);
            for (k, &ek) in e.iter().enumerate() {
                if ek > 0 {
                    t = t.mul(&powers[k][ek as usize]);
                }
            }
            out = out.add(&t);
        }
        out
    }

    /// Embed into a larger variable space: variable `k` becomes `map[k]`.
    pub fn embed(&self, out_nvars: usize, map: &[usize]) -> Poly {
        assert_eq!(map.len(), self.nvars);
        assert!(map.iter().all(|&m| m < out_nvars));
        let mut out = Poly::zero(out_nvars);
        for (e, c) in &self.terms {
            let mut en = vec![0u32; out_nvars];
            for (k, &ek) in e.iter().enumerate() {
                en[map[k]] += ek;
            }
            *out.terms.entry(en).or_insert(0.0) += c;
        }
        out
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " {} ", if *c < 0.0 { "-" } else { "+" })?;
            } else if *c < 0.0 {
                write!(f, "-")?;
            }
            first = false;
            write!(f, "{}", c.abs())?;
            for (k, &ek) in e.iter().enumerate() {
                match ek {
                    0 => {}
                    1 => write!(f, "*z{}", k + 1)?,
                    _ => write!(f, "*z{}^{}", k + 1, ek)?,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_rule() {
        // d/dx1 (x1^2 x2) = 2 x1 x2
        let p = Poly::from_terms(2, &[(vec![2, 1], 1.0)]);
        let d = p.diff(0).unwrap();
        assert_eq!(d, Poly::from_terms(2, &[(vec![1, 1], 2.0)]));
    }

    #[test]
    fn quadratic_derivative() {
        // d/du (u^2 / 2) = u
        let p = Poly::from_terms(1, &[(vec![2], 0.5)]);
        assert_eq!(p.diff(0).unwrap(), Poly::var(1, 0));
    }

    #[test]
    fn product_term_derivative() {
        // d/dl2 of l2 * (x1 - (1-x1^2) x2 / 2 + x1 u) over (x1,x2,u,l1,l2)
        let inner = Poly::from_terms(
            5,
            &[
                (vec![1, 0, 0, 0, 0], 1.0),
                (vec![0, 1, 0, 0, 0], -0.5),
                (vec![2, 1, 0, 0, 0], 0.5),
                (vec![1, 0, 1, 0, 0], 1.0),
            ],
        );
        let p = Poly::var(5, 4).mul(&inner);
        let d = p.diff(4).unwrap();
        assert!(d.sub(&inner).is_zero());
    }

    #[test]
    fn unknown_variable_rejected() {
        let p = Poly::var(2, 0);
        assert!(p.diff(5).is_err());
    }

    #[test]
    fn exact_cancellation_is_zero() {
        let a = Poly::from_terms(2, &[(vec![1, 1], 0.1), (vec![2, 0], 3.7)]);
        let b = a.mul(&a);
        assert!(b.sub(&b.clone()).is_zero());
        // (a+b)*(a-b) - (a*a - b*b) == 0 exactly after trimming
        let c = Poly::from_terms(2, &[(vec![0, 2], -1.25)]);
        let lhs = a.add(&c).mul(&a.sub(&c));
        let rhs = a.mul(&a).sub(&c.mul(&c));
        assert!(lhs.sub(&rhs).is_zero());
    }

    #[test]
    fn compose_substitutes() {
        // p(x,u) = x*u, u -> -x1*l2 in (x1,x2,l1,l2) space
        let p = Poly::from_terms(2, &[(vec![1, 1], 1.0)]);
        let x1 = Poly::var(4, 0);
        let ustar = Poly::from_terms(4, &[(vec![1, 0, 0, 1], -1.0)]);
        let q = p.compose(&[x1, ustar]);
        assert_eq!(q, Poly::from_terms(4, &[(vec![2, 0, 0, 1], -1.0)]));
    }
}
