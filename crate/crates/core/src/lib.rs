//! Federated personalized network-pruning simulator.
//!
//! The crate is organized bottom-up:
//!
//! - [`sketch`]: pruning masks, permutation aggregation sketches and the Rand-t comparator.
//! - [`objective`]: distributed quadratics and a small fully-connected network with exact gradients.
//! - [`data`]: synthetic classification data and non-iid partitioners.
//! - [`fedcore`]: client planning, pruned dispatch, local updates and layer-wise aggregation.
//! - [`theory`]: the analyzable sketch dynamics and numerical bound certificates.
//! - [`ldp`]: the locally differentially private variant, noise calibration and schedules.
//! - [`accounting`]: parameter and communication bookkeeping for reference architectures.
//!
//! Every randomized operation takes an explicit [`rng::SimRng`]; streams for
//! concurrent workers are derived with [`rng::derive_seed`], so results do not
//! depend on scheduling.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod accounting;
pub mod data;
pub mod error;
pub mod fedcore;
pub mod ldp;
pub mod objective;
pub mod rng;
pub mod sketch;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
