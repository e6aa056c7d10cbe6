//! Multiscale spatiotemporal video transformer for remote photoplethysmography.
//!
//! The crate bundles a small reverse-mode autodiff engine, the clip and
//! label preprocessing pipeline, a configurable four-stage transformer with
//! signal and heart-rate heads, heart-rate estimation and metrics, training
//! with AdamW, the greedy configuration search, a synthetic planted-pulse
//! video generator and the on-disk formats used by the command-line tool.

pub mod autodiff;
pub mod config;
mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod search;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{FrameFormat, ModelConfig, OutputFormat, PosEncoding, ScalingStrategy};
pub use error::{Error, Result};
pub use metrics::{ExperimentResult, HrEstimate, HrPair};
pub use model::Model;
pub use preprocess::{SignalTrace, VideoClip};
pub use search::{general_config, greedy_adapt, DesignSpace, SearchTrace};
pub use synthdata::{PresetName, SynthPreset};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainOutcome};
