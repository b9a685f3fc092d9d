//! Edge-cloud collaborative learning with a modularized cloud model.
//!
//! The cloud pretrains a modular model and a unified module selector,
//! derives resource-fitting sub-models for edge devices, and aggregates the
//! returned module updates across rounds.

pub mod aggregation;
pub mod cloud;
pub mod data;
pub mod derivation;
pub mod env;
pub mod error;
pub mod modular;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod selector;

pub use data::Dataset;
pub use error::{Error, Result};
pub use modular::{
    modularize, ModelPair, ModelShape, ModularModel, ResourceCost, RoutingDecision, RoutingTrace, SubModelSpec,
};
pub use nn::{Tensor, Parameterized};
pub use selector::{Routing, UnifiedSelector};
