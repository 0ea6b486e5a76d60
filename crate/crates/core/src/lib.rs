//! Long-tailed classification with a depth-heterogeneous mixture of experts.
//!
//! The crate trains a shared-backbone mixture of experts whose experts fuse
//! intermediate backbone features of different depths with their own
//! high-level features, distil knowledge between each other (mutual and
//! non-target "grand teacher" distillation), and are finally re-balanced by
//! retraining their classifiers with a balanced softmax on frozen features.
//!
//! Module map:
//!
//! - [`data`]: long-tailed count profiles, synthetic and archive datasets,
//!   many/medium/few divisions.
//! - [`nn`] and [`model`]: layers with hand-written backpropagation and the
//!   mixture-of-experts network.
//! - [`losses`]: every training objective with analytic gradients.
//! - [`train`]: two-stage decoupled training, schedules, checkpoints.
//! - [`eval`]: balanced evaluation and diagnostics (expert preference,
//!   hardest-negative histograms, ablations, expert-count sweeps).
//! - [`config`]: run configuration and manifests shared by the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
