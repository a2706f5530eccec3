//! Numerical machinery for Laughlin-type trial states in an external trap.
//!
//! The crate follows the chain
//! bathtub minimizer → inverse electrostatic problem (quasi-hole layouts) →
//! mean-field minimizer → Monte Carlo sampling of the plasma Gibbs measure,
//! and provides the checks that tie the stages together.
//!
//! All lengths are in scaled units `x = z / sqrt(N)`; densities are
//! probability densities on the plane.

pub mod bathtub;
pub mod error;
pub mod fields;
pub mod meanfield;
pub mod pipeline;
pub mod plasma;
pub mod potentials;
pub mod quasiholes;

pub use bathtub::{bathtub_energy, density_cap, solve_bathtub, BathtubSolution};
pub use error::{Error, Result};
pub use fields::{
    coulomb_energy, coulomb_metric, gradient, log_potential_field, log_potential_points, FieldKind,
    Grid2D, LogConvolver, Point, PointCharge, PointChargeSet, ScalarField2D, VectorField2D,
};
pub use meanfield::{
    bound_checks, minimize_electrostatic, minimize_free_energy, solve_electrostatic,
    solve_free_energy, stability_sweep, ChargeEnvironment, MeanFieldProblem, MeanFieldSolution,
    SolverOptions,
};
pub use plasma::{
    hamiltonian, quadrature_oracle, run_chains, DensityEstimate, EnergyEstimate, PlasmaState,
    SamplerConfig, TestFunction,
};
pub use pipeline::{run_scaling, run_scenario, verify, ScenarioConfig};
pub use potentials::{DisorderSpec, Potential, PotentialFamily, PotentialSpec};
pub use quasiholes::{PolynomialSpec, QuasiholeLayout, Scheme};
