//! CPU inference for small convolutional classifiers that skips convolutional
//! filters predicted to be irrelevant for the current input.
//!
//! The pieces:
//!
//! * [`ops`] / [`tensor`]: direct convolution with filter masks and the other
//!   forward primitives.
//! * [`model`]: network description, on-disk containers, synthetic generator.
//! * [`inference`]: eager forward pass and strength traces.
//! * [`lazy`]: activation strength, strength predictors, top-fraction
//!   selection and the lazy forward pass.
//! * [`train`]: fitting predictors by subgradient descent on mean absolute error.
//! * [`cost`]: FLOP model, timing and sensitivity sweeps.
//! * [`pareto`]: NSGA-II over per-layer keep fractions.
//! * [`memlazy`]: loading only the dense weight columns fed by kept filters.

pub mod cost;
pub mod error;
pub mod inference;
pub mod lazy;
pub mod memlazy;
pub mod model;
pub mod ops;
pub mod pareto;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use inference::{TraceSet, collect_traces, forward_eager};
pub use lazy::{KeepPolicy, PredictorSet, StrengthPredictor, forward_lazy, select_top_fraction};
pub use model::{Dataset, Network, SyntheticSpec};
pub use tensor::{ConvLayerSpec, DenseLayerSpec, FilterMask, Tensor3};
