//! Combined travel-demand modeling as convex optimization.
//!
//! The crate covers the full chain: trip distribution (entropy-maximizing
//! gravity), mode choice (multinomial/nested logit), route choice (path-size
//! logit), and congested assignment, both as closed-form evaluators and as
//! the equivalent convex programs whose duals are the behavioral parameters.
//! A two-stage workflow calibrates parameters against observed trip tables
//! (first stage) and forecasts on a modified network with the parameters
//! fixed (second stage).
//!
//! All numeric code is generic over [`scalar::Real`]; `f64` aliases for the
//! main types live at the crate root.

pub mod choice;
pub mod distribution;
pub mod error;
pub mod estimation;
pub mod io;
pub mod network;
pub mod programs;
pub mod routes;
pub mod scalar;
pub mod solver;
pub mod table;

pub use error::{Error, Result};
pub use scalar::Real;

/// Working scalar type for production use.
pub type Value = f64;

/// `f64` instantiations of the main model types.
pub type ZonalSystem = network::ZonalSystem<Value>;
pub type ModalNetwork = network::ModalNetwork<Value>;
pub type LinkFlowVector = network::LinkFlowVector<Value>;
pub type ModeTree = choice::ModeTree<Value>;
pub type UtilitySpec = choice::UtilitySpec<Value>;
pub type RouteSet = routes::RouteSet<Value>;
pub type ConvexProgram = programs::ConvexProgram<Value>;
pub type ObservationBundle = programs::ObservationBundle<Value>;
pub type SolverConfig = solver::SolverConfig<Value>;
pub type SolutionState = solver::SolutionState<Value>;
pub type DualSolution = solver::DualSolution<Value>;
pub type Scenario = estimation::Scenario<Value>;
