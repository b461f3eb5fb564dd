//! Bayesian model selection on pixel lattices: node-wise pseudo-marginal
//! samplers over a Potts prior, with SMC evidence estimates per node.

// Negated float comparisons are deliberate: they reject NaN along with out of range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evidence;
pub mod experiment;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod pet;
pub mod potts;
pub mod rng;
pub mod samplers;
pub mod smc;
pub mod toy;

pub use error::{Error, Result};
pub use experiment::{preset, run_study, ExperimentConfig, StudyReport};
pub use lattice::{ground_truth_field, LatticeGraph, RegionMask};
pub use model::NodeModel;
pub use potts::{critical_coupling, ModelField, PottsParams};
pub use toy::{ToyModel, ToyModelParams};
