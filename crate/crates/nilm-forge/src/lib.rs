//! nilm-forge: a self-contained non-intrusive load monitoring toolkit.
//!
//! Infers per-appliance on/off states from a single aggregate power
//! signal using a parallel CNN-LSTM classifier built from first
//! principles — tensor kernels, 2-D convolution, an LSTM with
//! backpropagation through time, and Adam — plus the data pipeline,
//! metric suite, and experiment harness around it.
//!
//! Layout:
//! - [`tensor`]: dense row-major `f64` tensors and the seeded RNG.
//! - [`layers`]: conv / pool / dense forward+backward and activations.
//! - [`lstm`]: the recurrent cell, sequence unrolling, and BPTT.
//! - [`model`]: the two-branch hybrid classifier and its checkpoints.
//! - [`train`]: losses, Adam, the fit loop, and the gradient checker.
//! - [`data`]: CSV ingestion, synthetic generation, labels, windowing,
//!   normalization, and SNR-calibrated noise injection.
//! - [`metrics`]: confusion counts, ACC / precision / recall / F1 / MCC.
//! - [`svg`]: minimal dependency-free line plots.
//! - [`experiments`]: the `nilm` CLI subcommands as library functions.
//!
//! Everything is deterministic: a run is a pure function of
//! (configuration, data, seed), apart from recorded wall-clock fields.

pub mod data;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod svg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{RngState, Tensor};
