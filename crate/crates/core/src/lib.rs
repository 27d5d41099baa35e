//! Mixture-of-linear-experts interatomic potentials on analytic toy data.
//!
//! The pieces, bottom up: atomic systems and their I/O ([`systems`]),
//! periodic neighbor graphs ([`graph`]), a reverse-mode tape ([`tape`]), the
//! expert layers and merge ([`mole`]), the energy network ([`potential`]),
//! energy referencing ([`reference`]), oracle data and batching ([`data`]),
//! two-stage training ([`train`]), scaling-law fits ([`scaling`]) and
//! dynamics/relaxation/benchmarks ([`sim`]).

// `!(x > 0.0)` is how NaN gets rejected here; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod mole;
pub mod params;
pub mod potential;
pub mod reference;
pub mod scaling;
pub mod sim;
pub mod systems;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use graph::{build_graph, NeighborGraph};
pub use mole::{merge_model, MergedModel, MoleLayer, RouterOutput};
pub use potential::{EnergyModel, ModelConfig, PotentialModel};
pub use systems::{AtomicSystem, SystemHeader};
