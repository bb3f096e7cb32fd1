//! Target-SNRi speech enhancement: signal tools, exact metrics, a small
//! reverse-mode autodiff engine, the networks, training loops and the
//! experiment harness.

pub mod audio;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod trainer;

pub use audio::{AudioBuffer, AudioError, Mixture};
pub use grad::{GradError, Graph, ParamSet, Tensor, Var};
pub use metrics::{MetricsError, SeparatedPair, ThresholdConfig};
