//! Dense reference solutions, independent of the structured controller.

mod aggregates;
mod augmented;
mod finite;
mod riccati;
mod trajectory;

pub use aggregates::{
    check_cost_decomposition, level_spread_residual, production_spread_residual,
    shifted_aggregates, DecompositionReport, ShiftedAggregates,
};
pub use augmented::{build_augmented_system, AugmentedSystem};
pub use finite::{DenseOracle, FiniteHorizonSolution, DEFAULT_MARGIN};
pub use riccati::{stationary_gain, StationaryGain};
pub use trajectory::Trajectory;
