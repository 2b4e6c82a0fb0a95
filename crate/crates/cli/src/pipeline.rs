//! Stage orchestration and artifact writers.

use crate::config::{ConfigError, PipelineConfig};
use koopman_lift::{
    adjoint_defect, assemble_galerkin, boundary_weight, check_hamiltonian_structure,
    closed_loop_rollout, compare_reference, default_pair_tol, eigendecompose, evaluate_cost,
    gauss_legendre_rule, minimize_hamiltonian_control, mirror_pairs, monodromy, monodromy_defects,
    pontryagin_field, select_unstable, solve_are, steady_state_origin, BasisSet, BoxDomain,
    CoreError, CostateSolve, EigenPair, FeedbackLaw, GalerkinMatrix, IntegrateOpts, NewtonOpts,
    OcpModel, Poly, PontryaginField, QuadratureRule, UStar,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// Pipeline failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: msg.into(),
        }
    }

    pub fn check(msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: msg.into(),
        }
    }

    pub fn solver(msg: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: msg.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.0)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::UnknownVariable { .. }
            | CoreError::InvalidModel(_)
            | CoreError::ClosedFormUnavailable
            | CoreError::HessianNotPositiveDefinite
            | CoreError::SymbolicLiftNeedsClosedForm
            | CoreError::QuadratureOrderInsufficient { .. }
            | CoreError::NotBoundaryVanishing(_) => 2,
            CoreError::EigenNonConvergence
            | CoreError::EigenResidualTooLarge { .. }
            | CoreError::NoUnstableEigenvalues { .. }
            | CoreError::InsufficientEquations { .. }
            | CoreError::NewtonFailure { .. }
            | CoreError::NotStabilizable
            | CoreError::SingularSkewGram { .. } => 3,
            CoreError::ConsistencyFailure(_) | CoreError::BlowUp { .. } | CoreError::Other(_) => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(format!("i/o: {e}"))
    }
}

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub config_sha256: String,
    pub versions: Versions,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub cli: String,
    pub core: String,
}

impl Meta {
    pub fn new(config_bytes: &[u8]) -> Self {
        use sha2::Digest;
        let digest = sha2::Sha256::digest(config_bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        Meta {
            config_sha256: hex,
            versions: Versions {
                cli: env!("CARGO_PKG_VERSION").to_string(),
                core: koopman_lift::VERSION.to_string(),
            },
        }
    }

    fn csv_preamble(&self) -> String {
        format!(
            "# config_sha256={}\n# cli_version={} core_version={}\n",
            self.config_sha256, self.versions.cli, self.versions.core
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::config(format!("serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Everything the spectral and synthesis stages share.
pub struct Stage {
    pub model: OcpModel,
    pub ustar: UStar,
    pub field: PontryaginField,
    pub box_domain: BoxDomain,
    pub basis: BasisSet,
    pub quad: QuadratureRule,
}

pub fn build_stage(cfg: &PipelineConfig) -> Result<Stage, CliError> {
    let model = cfg.model()?;
    let ustar = minimize_hamiltonian_control(&model)?;
    let field = pontryagin_field(&model, &ustar)?;
    let box_domain = cfg.box_domain(model.n_x)?;
    let basis = cfg.basis(&box_domain)?;
    let quad = cfg.quadrature(&box_domain, basis.max_degree(), field.max_degree());
    Ok(Stage {
        model,
        ustar,
        field,
        box_domain,
        basis,
        quad,
    })
}

fn spectrum_of(stage: &Stage, cfg: &PipelineConfig) -> Result<(GalerkinMatrix, Vec<EigenPair>), CliError> {
    let gm = assemble_galerkin(&stage.field, &stage.basis, &stage.quad)?;
    let eigs = eigendecompose(&gm, cfg.tolerances.eigen)?;
    Ok((gm, eigs))
}

fn law_of(stage: Stage, cfg: &PipelineConfig) -> Result<(FeedbackLaw, Vec<EigenPair>), CliError> {
    let (gm, eigs) = spectrum_of(&stage, cfg)?;
    let tau = cfg.tolerances.tau.unwrap_or_else(|| {
        1e-6 * eigs
            .iter()
            .map(|e| e.kappa.norm())
            .fold(0.0, f64::max)
            .max(1.0)
    });
    let system = select_unstable(&eigs, &gm, &stage.quad, tau, stage.model.n_x)?;
    let warm = steady_state_origin(&stage.model)
        .ok()
        .and_then(|ss| solve_are(&ss).ok())
        .map(|s| s.p);
    let newton = NewtonOpts {
        tol: cfg.tolerances.newton,
        ..NewtonOpts::default()
    };
    let law = FeedbackLaw::new(system, stage.ustar, stage.model, newton, warm);
    Ok((law, eigs))
}

// ---------------------------------------------------------------- check

#[derive(Serialize)]
struct StructureArtifact {
    config_sha256: String,
    versions: Versions,
    report: koopman_lift::StructureReport,
    thresholds: Thresholds,
    pass: bool,
}

#[derive(Serialize)]
struct Thresholds {
    symmetry_defect: f64,
    divergence: f64,
    monodromy_symplectic_defect: f64,
    monodromy_det_defect: f64,
    adjoint_defect: f64,
}

pub fn cmd_check(cfg: &PipelineConfig, meta: &Meta, out: &Path) -> Result<(), CliError> {
    let stage = build_stage(cfg)?;
    let dim = stage.box_domain.dim();
    let n_x = stage.model.n_x;

    // deterministic interior samples for the pointwise checks
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim)
            .map(|k| {
                stage.box_domain.center[k]
                    + stage.box_domain.half_width[k] * rng.gen_range(-0.95..0.95)
            })
            .collect()
    };
    let samples: Vec<Vec<f64>> = (0..100).map(|_| sample(&mut rng)).collect();
    let mut report = check_hamiltonian_structure(&stage.field, &samples);

    // monodromy defects over a unit-time horizon from three interior points
    for z0 in samples.iter().take(3) {
        let g = monodromy(&stage.field, z0, 1.0, 1e-10)?;
        let (s, d) = monodromy_defects(&g, n_x);
        report.monodromy_symplectic_defect = report.monodromy_symplectic_defect.max(s);
        report.monodromy_det_defect = report.monodromy_det_defect.max(d);
    }

    // adjoint identity on boundary-vanishing pairs; the weight has
    // degree 4 per dimension, so a dedicated high-order rule is used
    let adjoint_quad = gauss_legendre_rule(&stage.box_domain, 20);
    let w = boundary_weight(&stage.box_domain);
    let rand_tilde = |rng: &mut ChaCha8Rng| {
        let mut terms = Vec::new();
        for _ in 0..dim {
            let mut left = 2u32;
            let e: Vec<u32> = (0..dim)
                .map(|_| {
                    let a = rng.gen_range(0..=left);
                    left -= a;
                    a
                })
                .collect();
            terms.push((e, rng.gen_range(-1.0..1.0f64)));
        }
        Poly::from_terms(dim, &terms)
    };
    for _ in 0..5 {
        let p = w.mul(&rand_tilde(&mut rng));
        let q = w.mul(&rand_tilde(&mut rng));
        let d = adjoint_defect(&stage.field, &p, &q, &adjoint_quad)?;
        report.adjoint_defect = report.adjoint_defect.max(d);
    }

    let thresholds = Thresholds {
        symmetry_defect: 1e-10,
        divergence: 1e-10,
        monodromy_symplectic_defect: 1e-6,
        monodromy_det_defect: 1e-6,
        adjoint_defect: 1e-10,
    };
    let failing: Vec<&str> = [
        ("symmetry_defect", report.symmetry_defect, thresholds.symmetry_defect),
        ("divergence", report.divergence, thresholds.divergence),
        (
            "monodromy_symplectic_defect",
            report.monodromy_symplectic_defect,
            thresholds.monodromy_symplectic_defect,
        ),
        (
            "monodromy_det_defect",
            report.monodromy_det_defect,
            thresholds.monodromy_det_defect,
        ),
        ("adjoint_defect", report.adjoint_defect, thresholds.adjoint_defect),
    ]
    .iter()
    .filter(|(_, v, t)| v > t)
    .map(|(name, _, _)| *name)
    .collect();

    let artifact = StructureArtifact {
        config_sha256: meta.config_sha256.clone(),
        versions: meta.versions.clone(),
        report,
        thresholds,
        pass: failing.is_empty(),
    };
    write_json(&out.join("structure_report.json"), &artifact)?;
    if !failing.is_empty() {
        return Err(CliError::check(format!(
            "structure check failed: {}",
            failing.join(", ")
        )));
    }
    println!("check: all structure defects within thresholds");
    Ok(())
}

// ------------------------------------------------------------- spectrum

#[derive(Serialize)]
struct PairingArtifact {
    config_sha256: String,
    versions: Versions,
    pair_tol: f64,
    pairs: Vec<PairEntry>,
    unpaired: Vec<usize>,
    flagged: Vec<usize>,
}

#[derive(Serialize)]
struct PairEntry {
    i: usize,
    j: usize,
    defect: f64,
}

pub fn cmd_spectrum(cfg: &PipelineConfig, meta: &Meta, out: &Path) -> Result<(), CliError> {
    let stage = build_stage(cfg)?;
    let (_, eigs) = spectrum_of(&stage, cfg)?;
    let tol = cfg.tolerances.pairing.unwrap_or_else(|| default_pair_tol(&eigs));
    let pairing = mirror_pairs(&eigs, tol);

    let mut partner: Vec<Option<(usize, f64)>> = vec![None; eigs.len()];
    for &(i, j, d) in &pairing.pairs {
        partner[i] = Some((j, d));
        partner[j] = Some((i, d));
    }
    let mut csv = meta.csv_preamble();
    csv.push_str("index,re_kappa,im_kappa,residual,paired_with,pair_defect\n");
    for (i, e) in eigs.iter().enumerate() {
        match partner[i] {
            Some((j, d)) => {
                writeln!(csv, "{i},{},{},{},{j},{}", e.kappa.re, e.kappa.im, e.residual, d)
            }
            None => writeln!(csv, "{i},{},{},{},,", e.kappa.re, e.kappa.im, e.residual),
        }
        .unwrap();
    }
    std::fs::write(out.join("spectrum.csv"), csv)?;

    let artifact = PairingArtifact {
        config_sha256: meta.config_sha256.clone(),
        versions: meta.versions.clone(),
        pair_tol: tol,
        pairs: pairing
            .pairs
            .iter()
            .map(|&(i, j, defect)| PairEntry { i, j, defect })
            .collect(),
        unpaired: pairing.unpaired.clone(),
        flagged: eigs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.flagged)
            .map(|(i, _)| i)
            .collect(),
    };
    write_json(&out.join("pairing.json"), &artifact)?;
    println!(
        "spectrum: {} eigenvalues, {} mirrored pairs, {} flagged",
        eigs.len(),
        artifact.pairs.len(),
        artifact.flagged.len()
    );
    Ok(())
}

// ----------------------------------------------------------- synthesize

#[derive(Serialize)]
struct LawArtifact {
    config_sha256: String,
    versions: Versions,
    tau: f64,
    selected: Vec<ComplexEntry>,
    unselected_unstable: Vec<ComplexEntry>,
    eigenvector_coefficients: Vec<Vec<ComplexEntry>>,
    newton: NewtonEntry,
    warm_start_used: bool,
}

#[derive(Serialize)]
struct ComplexEntry {
    re: f64,
    im: f64,
}

#[derive(Serialize)]
struct NewtonEntry {
    tol: f64,
    max_iter: usize,
    max_halvings: usize,
}

/// Solves the grid, retrying failed nodes with seeded perturbed Newton
/// restarts; returns solutions in input order.
fn solve_grid_with_restarts(
    law: &FeedbackLaw,
    points: &[Vec<f64>],
    seed: u64,
) -> Vec<Result<CostateSolve, CoreError>> {
    let mut sols = law.solve_grid(points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = law.system.n_x;
    for (x, slot) in points.iter().zip(sols.iter_mut()) {
        if slot.is_ok() {
            continue;
        }
        for attempt in 1..=8 {
            let amp = 0.05 * attempt as f64;
            let base: DVector<f64> = match law.warm_start.as_ref() {
                Some(p) => p * DVector::from_row_slice(x),
                None => DVector::from_row_slice(x),
            };
            let seed_vec = DVector::from_iterator(
                n,
                base.iter().map(|v| v + amp * rng.gen_range(-1.0..1.0)),
            );
            if let Ok(sol) = law.solve_costate_from(x, &seed_vec) {
                *slot = Ok(sol);
                break;
            }
        }
    }
    sols
}

pub fn cmd_synthesize(
    cfg: &PipelineConfig,
    meta: &Meta,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let stage = build_stage(cfg)?;
    let tau_default = |eigs: &[EigenPair]| {
        1e-6 * eigs
            .iter()
            .map(|e: &EigenPair| e.kappa.norm())
            .fold(0.0, f64::max)
            .max(1.0)
    };
    let (law, eigs) = law_of(stage, cfg)?;
    let tau = cfg.tolerances.tau.unwrap_or_else(|| tau_default(&eigs));

    let points = cfg.grid_points(law.model.n_x)?;
    let sols = solve_grid_with_restarts(&law, &points, seed);

    let n_x = law.model.n_x;
    let n_u = law.model.n_u;
    let mut csv = meta.csv_preamble();
    let mut header: Vec<String> = (1..=n_x).map(|i| format!("x{i}")).collect();
    header.extend((1..=n_u).map(|i| format!("u{i}")));
    header.extend((1..=n_x).map(|i| format!("lambda{i}")));
    header.push("newton_iters".into());
    header.push("residual".into());
    csv.push_str(&header.join(","));
    csv.push('\n');

    let mut failed_nodes = Vec::new();
    for (x, sol) in points.iter().zip(&sols) {
        match sol {
            Ok(s) => {
                let y: Vec<f64> = x.iter().chain(s.lambda.iter()).copied().collect();
                let u = law.ustar.eval(&law.model, &y)?;
                let fields: Vec<String> = x
                    .iter()
                    .chain(u.iter())
                    .chain(s.lambda.iter())
                    .map(|v| format!("{v}"))
                    .chain([format!("{}", s.iters), format!("{}", s.residual)])
                    .collect();
                csv.push_str(&fields.join(","));
                csv.push('\n');
            }
            Err(_) => failed_nodes.push(x.clone()),
        }
    }
    std::fs::write(out.join("feedback_grid.csv"), csv)?;

    let coeffs = law
        .system
        .selected
        .iter()
        .map(|sel| {
            let best = eigs
                .iter()
                .min_by(|a, b| {
                    (a.kappa - sel)
                        .norm()
                        .partial_cmp(&(b.kappa - sel).norm())
                        .unwrap()
                })
                .expect("nonempty spectrum");
            best.vector
                .iter()
                .map(|c| ComplexEntry { re: c.re, im: c.im })
                .collect()
        })
        .collect();
    let artifact = LawArtifact {
        config_sha256: meta.config_sha256.clone(),
        versions: meta.versions.clone(),
        tau,
        selected: law
            .system
            .selected
            .iter()
            .map(|k| ComplexEntry { re: k.re, im: k.im })
            .collect(),
        unselected_unstable: law
            .system
            .unselected_unstable
            .iter()
            .map(|k| ComplexEntry { re: k.re, im: k.im })
            .collect(),
        eigenvector_coefficients: coeffs,
        newton: NewtonEntry {
            tol: law.newton.tol,
            max_iter: law.newton.max_iter,
            max_halvings: law.newton.max_halvings,
        },
        warm_start_used: law.warm_start.is_some(),
    };
    write_json(&out.join("law.json"), &artifact)?;

    if !failed_nodes.is_empty() {
        return Err(CliError::solver(format!(
            "costate solve failed on {} grid nodes: {:?}",
            failed_nodes.len(),
            failed_nodes
        )));
    }
    println!(
        "synthesize: {} selected eigenvalues, {} grid nodes solved",
        artifact.selected.len(),
        points.len()
    );
    Ok(())
}

// ------------------------------------------------------------- simulate

#[derive(Serialize)]
struct CostArtifact {
    config_sha256: String,
    versions: Versions,
    horizon: f64,
    rollouts: Vec<RolloutEntry>,
}

#[derive(Serialize)]
struct RolloutEntry {
    x0: Vec<f64>,
    final_norm: f64,
    cost: f64,
    tail_integrand: f64,
    converged: bool,
}

pub fn cmd_simulate(
    cfg: &PipelineConfig,
    meta: &Meta,
    out: &Path,
    threads: usize,
) -> Result<(), CliError> {
    let stage = build_stage(cfg)?;
    let n_x = stage.model.n_x;
    let (law, _) = law_of(stage, cfg)?;
    let horizon = cfg.horizon.unwrap_or(20.0);
    let initial_states: Vec<Vec<f64>> = match &cfg.initial_states {
        Some(v) => {
            if v.iter().any(|x| x.len() != n_x) {
                return Err(CliError::config(format!(
                    "initial states must have dimension {n_x}"
                )));
            }
            v.clone()
        }
        None => corners(n_x),
    };

    // Each rollout clones the law (the Newton cache is not shared), so
    // trajectories are independent and the output is index-ordered.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let opts = IntegrateOpts::default();
    // clone per job up front: the law's Newton cache is a RefCell and
    // must not be shared across threads
    let jobs: Vec<(FeedbackLaw, Vec<f64>)> = initial_states
        .iter()
        .map(|x0| (law.clone(), x0.clone()))
        .collect();
    let results: Vec<(koopman_lift::Trajectory, Result<koopman_lift::CostReport, CoreError>)> =
        pool.install(|| {
            use rayon::prelude::*;
            jobs.into_par_iter()
                .map(|(local, x0)| {
                    let x0v = DVector::from_row_slice(&x0);
                    let traj = closed_loop_rollout(&local.model, &local, &x0v, horizon, &opts);
                    let cost = evaluate_cost(&local.model, &local, &x0v, horizon, &opts);
                    (traj, cost)
                })
                .collect()
        });

    let mut csv = meta.csv_preamble();
    let cols: Vec<String> = (1..=n_x).map(|i| format!("y{i}")).collect();
    writeln!(csv, "traj,t,{}", cols.join(",")).unwrap();
    for (id, (traj, _)) in results.iter().enumerate() {
        for (t, y) in traj.times.iter().zip(&traj.states) {
            let row: Vec<String> = y.iter().map(|v| format!("{v}")).collect();
            writeln!(csv, "{id},{t},{}", row.join(",")).unwrap();
        }
    }
    std::fs::write(out.join("trajectories.csv"), csv)?;

    let mut truncated = Vec::new();
    let rollouts: Vec<RolloutEntry> = results
        .iter()
        .zip(&initial_states)
        .map(|((traj, cost), x0)| {
            if traj.truncated {
                truncated.push(x0.clone());
            }
            let (cost_v, tail, conv) = match cost {
                Ok(c) => (c.cost, c.tail_integrand, c.converged),
                Err(_) => (f64::NAN, f64::NAN, false),
            };
            RolloutEntry {
                x0: x0.clone(),
                final_norm: traj.last_state().norm(),
                cost: cost_v,
                tail_integrand: tail,
                converged: conv && !traj.truncated,
            }
        })
        .collect();
    let artifact = CostArtifact {
        config_sha256: meta.config_sha256.clone(),
        versions: meta.versions.clone(),
        horizon,
        rollouts,
    };
    write_json(&out.join("costs.json"), &artifact)?;

    if !truncated.is_empty() {
        return Err(CliError::check(format!(
            "rollouts truncated (blow-up or costate solve failure) from {truncated:?}"
        )));
    }
    println!(
        "simulate: {} rollouts to t = {horizon}, max final norm {:.3e}",
        initial_states.len(),
        artifact
            .rollouts
            .iter()
            .map(|r| r.final_norm)
            .fold(0.0, f64::max)
    );
    Ok(())
}

fn corners(n_x: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(1 << n_x);
    for mask in 0..(1usize << n_x) {
        out.push(
            (0..n_x)
                .map(|k| if mask >> k & 1 == 1 { 1.0 } else { -1.0 })
                .collect(),
        );
    }
    out
}

// -------------------------------------------------------------- compare

#[derive(Serialize)]
struct ComparisonArtifact {
    config_sha256: String,
    versions: Versions,
    report: koopman_lift::ComparisonReport,
}

pub fn cmd_compare(cfg: &PipelineConfig, meta: &Meta, out: &Path) -> Result<(), CliError> {
    let reference = match &cfg.reference {
        Some(r) => r,
        None => {
            println!("compare: no reference law configured, comparison skipped");
            return Ok(());
        }
    };
    let stage = build_stage(cfg)?;
    let n_x = stage.model.n_x;
    let n_u = stage.model.n_u;
    if reference.len() != n_u {
        return Err(CliError::config(format!(
            "reference law must have {n_u} components"
        )));
    }
    let reference: Vec<Poly> = reference
        .iter()
        .map(|s| s.to_poly())
        .collect::<Result<Vec<_>, _>>()?;
    if reference.iter().any(|p| p.nvars() != n_x) {
        return Err(CliError::config(format!(
            "reference law must be polynomial in the {n_x} state variables"
        )));
    }

    // integrate over the state-space shadow of the region of interest
    let x_box = BoxDomain::new(
        stage.box_domain.center[..n_x].to_vec(),
        stage.box_domain.half_width[..n_x].to_vec(),
    )
    .expect("state box inherits validity");
    let (law, _) = law_of(stage, cfg)?;
    let quad = gauss_legendre_rule(&x_box, 10);
    let report = compare_reference(&law, &reference, &x_box, &quad)?;
    let artifact = ComparisonArtifact {
        config_sha256: meta.config_sha256.clone(),
        versions: meta.versions.clone(),
        report,
    };
    write_json(&out.join("comparison.json"), &artifact)?;
    let rep = &artifact.report;
    if !rep.failed_nodes.is_empty() {
        return Err(CliError::solver(format!(
            "costate solve failed on {} quadrature nodes",
            rep.failed_nodes.len()
        )));
    }
    println!(
        "compare: l2sq_error = {:.6e}, max_error = {:.6e}",
        rep.l2sq_error, rep.max_error
    );
    Ok(())
}
