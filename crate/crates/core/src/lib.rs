//! Optimal distributed control of a delayed transport chain.

pub mod controller;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod instances;
pub mod ledger;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
pub use model::{ControlDecision, GraphSpec, PlantState};
