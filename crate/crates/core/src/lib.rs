//! Approximately globally optimal feedback laws for polynomial
//! infinite-horizon optimal control problems.
//!
//! The pipeline lifts the state-costate dynamics of the minimum
//! principle to a linear transport operator on observables, discretizes
//! it with a Galerkin projection onto an orthonormal Legendre basis,
//! analyzes the mirrored spectrum induced by the Hamiltonian structure,
//! and recovers a feedback law from zero sets of unstable
//! eigenfunctions.

/// Crate version, embedded in exported artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod basis;
pub mod error;
pub mod model;
pub mod poly;
pub mod sim;
pub mod spectral;
pub mod structure;
pub mod synthesis;

pub use basis::{
    default_nodes_per_dim, gauss_legendre_rule, graded_index_set, legendre_basis, BasisSet,
    BoxDomain, QuadratureRule,
};
pub use error::CoreError;
pub use model::{
    double_integrator_lqr, hamiltonian, minimize_hamiltonian_control, pontryagin_field, registry,
    vanderpol, OcpModel, PontryaginField, UStar,
};
pub use poly::Poly;
pub use sim::{
    closed_loop_rollout, costate_limit_check, evaluate_cost, integrate, integrate_rk4, solve_are,
    steady_state, steady_state_origin, AreSolution, CostReport, IntegrateOpts, SteadyState,
    Trajectory,
};
pub use spectral::{
    apply_lift, assemble_galerkin, default_pair_tol, eigendecompose, mirror_pairs,
    symplectic_coupling, EigenPair, Eigenfunction, GalerkinMatrix, MirrorPairing,
};
pub use structure::{
    adjoint_defect, boundary_weight, check_hamiltonian_structure, monodromy, monodromy_defects,
    omega_matrix, skew_gram_schmidt, symplectic_form, StructureReport,
};
pub use synthesis::{
    compare_reference, select_unstable, ComparisonReport, CostateSolve, FeedbackLaw, NewtonOpts,
    StableManifoldSystem,
};
