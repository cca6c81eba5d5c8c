//! Streaming diffusion forcing for conditional time series.
//!
//! Each frame of a sequence carries its own noise level. Under the triangular
//! schedule `α_t^k = clamp(t − k/n_s, 0, 1)` only a window of at most `ceil(n_s)`
//! frames is ever partially noisy, so a velocity field trained on that window can
//! be integrated frame by frame with bounded latency.
//!
//! Module map:
//! - [`schedule`]: vectorized schedules and active-window arithmetic
//! - [`gaussian_path`]: conditional paths and parameterization conversions
//! - [`oracle`]: exact brute-force marginal fields over finite mixtures
//! - [`denoiser`]: a toy windowed-attention network with manual backprop
//! - [`trainer`]: windowed flow-matching training
//! - [`sampler`]: streaming Euler / Euler–Maruyama inference
//! - [`metrics`]: quality, smoothness and ablation reporting
//! - [`corpus_io`]: synthetic corpora and on-disk formats

pub mod corpus;
pub mod corpus_io;
pub mod denoiser;
pub mod error;
pub mod field;
pub mod gaussian_path;
pub mod metrics;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use corpus::{Atom, ConditionedCorpus, ControlId};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserParams, MaskKind};
pub use error::{FloodError, Result};
pub use field::{cfg_velocity, VelocityField};
pub use gaussian_path::{PathPoint, PredictionKind};
pub use oracle::{LocalityReport, OracleField};
pub use sampler::{EmissionRecord, SampleConfig, SigmaProfile, StreamState};
pub use schedule::{ActiveWindow, FrameCoeffs, ScheduleKind, VectorizedSchedule};
pub use tensor::Mat;
pub use trainer::{TrainConfig, TrainLogRecord};
