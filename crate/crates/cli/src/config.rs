//! Strict JSON configuration schema and conversion to core types.

use koopman_lift::{
    default_nodes_per_dim, gauss_legendre_rule, graded_index_set, legendre_basis, BasisSet,
    BoxDomain, OcpModel, Poly, QuadratureRule,
};
use serde::Deserialize;

/// Top-level pipeline configuration. Unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Registry name (`"vanderpol"`, `"double_integrator_lqr"`) or an
    /// inline polynomial problem specification.
    pub problem: ProblemSpec,
    /// Region of interest in state-costate space; defaults to the unit
    /// box `[-1/2, 1/2]^{2 n_x}`.
    #[serde(rename = "box", default)]
    pub box_spec: Option<BoxSpec>,
    /// Basis selection: leading count of the graded set, or an explicit
    /// multi-index list.
    pub basis: BasisSpec,
    /// Gauss-Legendre nodes per dimension; defaults to the smallest
    /// order exact for all Galerkin integrands.
    #[serde(default)]
    pub quadrature_order: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Grid on which the feedback law is evaluated.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Reference feedback law for `compare`, one polynomial in x per
    /// control component.
    #[serde(default)]
    pub reference: Option<Vec<PolySpec>>,
    /// Initial states for `simulate`.
    #[serde(default)]
    pub initial_states: Option<Vec<Vec<f64>>>,
    /// Rollout horizon for `simulate` (default 20).
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Output directory; overridden by `--out`.
    #[serde(default)]
    pub output_dir: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum ProblemSpec {
    Registry(String),
    Inline(InlineProblem),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub n_x: usize,
    pub n_u: usize,
    /// Dynamics components, polynomials in (x, u).
    pub f: Vec<PolySpec>,
    /// Stage cost, polynomial in (x, u).
    pub l: PolySpec,
    /// Optimal steady-state cost offset (used only in cost evaluation).
    #[serde(default)]
    pub l_star: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolySpec {
    pub vars: usize,
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub exps: Vec<u32>,
    pub coeff: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum BasisSpec {
    Count {
        count: usize,
    },
    Indices {
        indices: Vec<Vec<u32>>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative eigenpair residual tolerance.
    pub eigen: f64,
    /// Mirror-pairing tolerance; defaults to `1e-6 * max(1, max|kappa|)`.
    pub pairing: Option<f64>,
    /// Newton residual tolerance for the costate solve.
    pub newton: f64,
    /// Unstable-eigenvalue threshold; defaults to `1e-6 * max(1, max|kappa|)`.
    pub tau: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eigen: 1e-8,
            pairing: None,
            newton: 1e-10,
            tau: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points_per_dim: usize,
}

/// Configuration-level error; always maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl PolySpec {
    pub fn to_poly(&self) -> Result<Poly, ConfigError> {
        for t in &self.terms {
            if t.exps.len() != self.vars {
                return Err(ConfigError(format!(
                    "term exponent list has length {}, expected {} variables",
                    t.exps.len(),
                    self.vars
                )));
            }
        }
        let terms: Vec<(Vec<u32>, f64)> = self
            .terms
            .iter()
            .map(|t| (t.exps.clone(), t.coeff))
            .collect();
        Ok(Poly::from_terms(self.vars, &terms))
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn model(&self) -> Result<OcpModel, ConfigError> {
        match &self.problem {
            ProblemSpec::Registry(name) => koopman_lift::registry(name)
                .ok_or_else(|| ConfigError(format!("unknown problem registry name {name:?}"))),
            ProblemSpec::Inline(p) => {
                let f = p
                    .f
                    .iter()
                    .map(|s| s.to_poly())
                    .collect::<Result<Vec<_>, _>>()?;
                let l = p.l.to_poly()?;
                OcpModel::new(p.n_x, p.n_u, f, l, p.l_star)
                    .map_err(|e| ConfigError(e.to_string()))
            }
        }
    }

    pub fn box_domain(&self, n_x: usize) -> Result<BoxDomain, ConfigError> {
        match &self.box_spec {
            None => Ok(BoxDomain::unit(2 * n_x)),
            Some(b) => {
                if b.center.len() != 2 * n_x || b.half_width.len() != 2 * n_x {
                    return Err(ConfigError(format!(
                        "box must have dimension 2 n_x = {}",
                        2 * n_x
                    )));
                }
                BoxDomain::new(b.center.clone(), b.half_width.clone())
                    .map_err(|e| ConfigError(e.to_string()))
            }
        }
    }

    pub fn basis(&self, box_domain: &BoxDomain) -> Result<BasisSet, ConfigError> {
        let indices = match &self.basis {
            BasisSpec::Count { count } => {
                if *count == 0 {
                    return Err(ConfigError("basis count must be positive".into()));
                }
                graded_index_set(box_domain.dim(), *count)
            }
            BasisSpec::Indices { indices } => indices.clone(),
        };
        legendre_basis(box_domain, &indices).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn quadrature(
        &self,
        box_domain: &BoxDomain,
        basis_degree: u32,
        field_degree: u32,
    ) -> QuadratureRule {
        let m = self
            .quadrature_order
            .unwrap_or_else(|| default_nodes_per_dim(basis_degree, field_degree));
        gauss_legendre_rule(box_domain, m)
    }

    /// Tensor grid over state space, row-major in index order.
    pub fn grid_points(&self, n_x: usize) -> Result<Vec<Vec<f64>>, ConfigError> {
        let spec = match &self.grid {
            Some(g) => g,
            None => {
                // default: 21 points per dimension over [-1/2, 1/2]^{n_x}
                return Ok(tensor_grid(&vec![-0.5; n_x], &vec![0.5; n_x], 21));
            }
        };
        if spec.lower.len() != n_x || spec.upper.len() != n_x {
            return Err(ConfigError(format!("grid bounds must have dimension {n_x}")));
        }
        if spec.points_per_dim < 2 {
            return Err(ConfigError("grid needs at least 2 points per dimension".into()));
        }
        if spec.lower.iter().zip(&spec.upper).any(|(a, b)| a >= b) {
            return Err(ConfigError("grid lower bounds must be below upper bounds".into()));
        }
        Ok(tensor_grid(&spec.lower, &spec.upper, spec.points_per_dim))
    }
}

fn tensor_grid(lower: &[f64], upper: &[f64], pts: usize) -> Vec<Vec<f64>> {
    let dim = lower.len();
    let mut out = Vec::with_capacity(pts.pow(dim as u32));
    let mut idx = vec![0usize; dim];
    loop {
        out.push(
            (0..dim)
                .map(|k| lower[k] + (upper[k] - lower[k]) * idx[k] as f64 / (pts - 1) as f64)
                .collect(),
        );
        let mut k = dim;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < pts {
                break;
            }
            idx[k] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_config_parses() {
        let cfg = PipelineConfig::parse(r#"{"problem": "vanderpol", "basis": {"count": 15}}"#)
            .unwrap();
        let model = cfg.model().unwrap();
        assert_eq!(model.n_x, 2);
        let b = cfg.box_domain(2).unwrap();
        assert_eq!(cfg.basis(&b).unwrap().len(), 15);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::parse(
            r#"{"problem": "vanderpol", "basis": {"count": 5}, "frobnicate": 1}"#,
        )
        .unwrap_err();
        assert!(err.0.contains("frobnicate"), "{}", err.0);
    }

    #[test]
    fn missing_problem_rejected() {
        assert!(PipelineConfig::parse(r#"{"basis": {"count": 5}}"#).is_err());
    }

    #[test]
    fn inline_problem_round_trips() {
        let cfg = PipelineConfig::parse(
            r#"{
              "problem": {
                "n_x": 1, "n_u": 1,
                "f": [{"vars": 2, "terms": [{"exps": [0, 1], "coeff": 1.0}]}],
                "l": {"vars": 2, "terms": [{"exps": [2, 0], "coeff": 0.5},
                                            {"exps": [0, 2], "coeff": 0.5}]}
              },
              "basis": {"indices": [[1, 0], [0, 1]]}
            }"#,
        )
        .unwrap();
        let model = cfg.model().unwrap();
        assert_eq!((model.n_x, model.n_u), (1, 1));
        assert!(model.quadratic_in_u);
    }

    #[test]
    fn grid_is_row_major_and_inclusive() {
        let cfg = PipelineConfig::parse(
            r#"{"problem": "vanderpol", "basis": {"count": 5},
                "grid": {"lower": [0.0, 0.0], "upper": [1.0, 2.0], "points_per_dim": 3}}"#,
        )
        .unwrap();
        let g = cfg.grid_points(2).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, 0.0]);
        assert_eq!(g[1], vec![0.0, 1.0]);
        assert_eq!(g[8], vec![1.0, 2.0]);
    }
}
