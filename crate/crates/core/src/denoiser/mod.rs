//! Toy windowed-attention velocity network.
//!
//! Per-frame features are the sum of an input projection of `x^k`, a projection
//! of a sinusoidal embedding of the frame's noise level `α^k`, a projection of
//! the frame's position counted back from the newest activated frame, and an
//! embedding of the frame's own control id. A stack of pre-norm attention +
//! feed-forward blocks mixes frames, and a final projection emits one
//! `D`-vector per frame in the configured parameterization.
//!
//! Pure-noise frames (`α = 0`) are never attended to, so appending them to a
//! window does not change any output. This makes a whole-sequence forward pass
//! agree with a windowed one bit for bit.

mod checkpoint;
mod net;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, read_checkpoint, read_checkpoint_with, save_checkpoint,
    save_checkpoint_with, write_checkpoint, write_checkpoint_with, CHECKPOINT_VERSION,
};
pub use net::ForwardCache;

use crate::corpus::ControlId;
use crate::error::{FloodError, Result};
use crate::field::VelocityField;
use crate::gaussian_path::{to_velocity, PredictionKind};
use crate::schedule::FrameCoeffs;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Bidirectional,
    Causal,
}

impl std::str::FromStr for MaskKind {
    type Err = FloodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" | "bidirectional" => Ok(MaskKind::Bidirectional),
            "causal" => Ok(MaskKind::Causal),
            other => Err(FloodError::invalid(format!("unknown mask kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    #[serde(rename = "D")]
    pub dim: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mask: MaskKind,
    /// Vocabulary size including the reserved null id, which is the last id.
    pub num_controls: u32,
    pub max_context: usize,
    pub prediction: PredictionKind,
    #[serde(default = "default_alpha_freqs")]
    pub alpha_freqs: usize,
    #[serde(default = "default_pos_freqs")]
    pub pos_freqs: usize,
}

fn default_alpha_freqs() -> usize {
    4
}

fn default_pos_freqs() -> usize {
    8
}

impl DenoiserConfig {
    /// The toy configuration: 2 blocks, width 64, 4 heads.
    pub fn toy(dim: usize, real_controls: u32) -> Self {
        Self {
            dim,
            hidden: 64,
            ffn: 128,
            num_layers: 2,
            num_heads: 4,
            mask: MaskKind::Bidirectional,
            num_controls: real_controls + 1,
            max_context: 64,
            prediction: PredictionKind::Velocity,
            alpha_freqs: default_alpha_freqs(),
            pos_freqs: default_pos_freqs(),
        }
    }

    pub fn null_control(&self) -> ControlId {
        self.num_controls - 1
    }

    pub fn alpha_features(&self) -> usize {
        1 + 2 * self.alpha_freqs
    }

    pub fn pos_features(&self) -> usize {
        2 * self.pos_freqs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FloodError::InvalidArgument(m));
        if self.dim == 0 || self.hidden == 0 || self.ffn == 0 || self.num_layers == 0 {
            return bad("D, hidden, ffn and num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || self.hidden % self.num_heads != 0 {
            return bad(format!(
                "hidden ({}) must be divisible by num_heads ({})",
                self.hidden, self.num_heads
            ));
        }
        if self.num_controls < 2 {
            return bad("vocabulary needs at least one real control plus the null id".into());
        }
        if self.max_context == 0 {
            return bad("max_context must be >= 1".into());
        }
        if self.prediction == PredictionKind::Score {
            return bad("the denoiser predicts velocity, epsilon or x0".into());
        }
        Ok(())
    }

    /// Validates against a streaming slope: the context must hold a full window.
    pub fn validate_for_slope(&self, n_s: f64) -> Result<()> {
        self.validate()?;
        if (self.max_context as f64) < n_s.ceil() {
            return Err(FloodError::invalid(format!(
                "max_context {} is smaller than the window width ceil({n_s})",
                self.max_context
            )));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (h, f, d) = (self.hidden, self.ffn, self.dim);
        let mut v = vec![
            ("embed_control".to_string(), self.num_controls as usize, h),
            ("w_in".into(), d, h),
            ("b_in".into(), 1, h),
            ("w_alpha".into(), self.alpha_features(), h),
            ("w_pos".into(), self.pos_features(), h),
        ];
        for l in 0..self.num_layers {
            for (name, r, c) in [
                ("norm1", 1, h),
                ("wq", h, h),
                ("wk", h, h),
                ("wv", h, h),
                ("wo", h, h),
                ("norm2", 1, h),
                ("w1", h, f),
                ("b1", 1, f),
                ("w2", f, h),
                ("b2", 1, h),
            ] {
                v.push((format!("layer{l}.{name}"), r, c));
            }
        }
        v.push(("norm_out".into(), 1, h));
        v.push(("w_out".into(), h, d));
        v.push(("b_out".into(), 1, d));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

pub(crate) const EMBED: usize = 0;
pub(crate) const W_IN: usize = 1;
pub(crate) const B_IN: usize = 2;
pub(crate) const W_ALPHA: usize = 3;
pub(crate) const W_POS: usize = 4;
pub(crate) const LAYER_BASE: usize = 5;
pub(crate) const PER_LAYER: usize = 10;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Network weights. `tensors` follows [`DenoiserConfig::layout`].
#[derive(Debug)]
pub struct DenoiserParams {
    cfg: DenoiserConfig,
    tensors: Vec<Mat>,
    id: u64,
    generation: u64,
}

impl Clone for DenoiserParams {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            tensors: self.tensors.clone(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.tensors == other.tensors
    }
}

impl DenoiserParams {
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_scale = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
        let tensors = cfg
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                let leaf = name.rsplit('.').next().unwrap_or(&name);
                let std = match leaf {
                    "norm1" | "norm2" | "norm_out" => return Mat::filled(r, c, 1.0),
                    "b_in" | "b1" | "b2" | "b_out" => return Mat::zeros(r, c),
                    "embed_control" => 0.5,
                    "wo" | "w2" => depth_scale / (r as f64).sqrt(),
                    "w_out" => 0.1 / (r as f64).sqrt(),
                    _ => 1.0 / (r as f64).sqrt(),
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                Mat::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect())
            })
            .collect();
        Ok(Self::from_tensors(cfg.clone(), tensors))
    }

    pub(crate) fn from_tensors(cfg: DenoiserConfig, tensors: Vec<Mat>) -> Self {
        Self {
            cfg,
            tensors,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    /// Mutable access for optimizers; bumps the generation so stale caches are
    /// rejected by `backward`.
    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        self.generation += 1;
        &mut self.tensors
    }

    /// A zeroed gradient buffer with this parameter layout.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Flat view of every scalar parameter, used by finite-difference checks.
    pub fn get_flat(&self, idx: usize) -> f64 {
        let (t, o) = self.locate(idx);
        self.tensors[t].as_slice()[o]
    }

    pub fn set_flat(&mut self, idx: usize, v: f64) {
        let (t, o) = self.locate(idx);
        self.tensors_mut()[t].as_mut_slice()[o] = v;
    }

    /// `(tensor index, offset)` for a flat parameter index.
    pub fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            let n = t.as_slice().len();
            if idx < n {
                return (i, idx);
            }
            idx -= n;
        }
        panic!("flat parameter index out of range");
    }

    pub fn forward(
        &self,
        x: &Mat,
        controls: &[ControlId],
        alpha: &[f64],
    ) -> Result<(Mat, ForwardCache)> {
        net::forward(self, x, controls, alpha, None)
    }

    /// Forward pass with explicit per-frame positions instead of offsets from
    /// the newest activated frame.
    pub fn forward_with_positions(
        &self,
        x: &Mat,
        controls: &[ControlId],
        alpha: &[f64],
        positions: &[f64],
    ) -> Result<(Mat, ForwardCache)> {
        net::forward(self, x, controls, alpha, Some(positions))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_output: &Mat) -> Result<Gradients> {
        net::backward(self, cache, grad_output)
    }

    /// Prediction converted to velocity, the quantity the sampler integrates.
    pub fn velocity(&self, x: &Mat, controls: &[ControlId], alpha: &[f64]) -> Result<Mat> {
        if x.rows() > self.cfg.max_context {
            return Err(FloodError::invalid(format!(
                "window of {} frames exceeds max_context {}",
                x.rows(),
                self.cfg.max_context
            )));
        }
        let (pred, _) = self.forward(x, controls, alpha)?;
        to_velocity(self.cfg.prediction, &pred, x, &FrameCoeffs::from_alpha(alpha))
    }

    /// Classifier-free guided velocity.
    pub fn cfg_velocity(
        &self,
        x: &Mat,
        controls: &[ControlId],
        alpha: &[f64],
        scale: f64,
    ) -> Result<Mat> {
        crate::field::cfg_velocity(self, x, controls, alpha, 0, scale)
    }
}

impl VelocityField for DenoiserParams {
    fn velocity(&self, x: &Mat, controls: &[ControlId], alpha: &[f64], _start: usize) -> Result<Mat> {
        DenoiserParams::velocity(self, x, controls, alpha)
    }

    fn null_control(&self) -> ControlId {
        self.cfg.null_control()
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.cfg.max_context)
    }
}

/// Gradients with the same layout as [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Mat>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in t.as_mut_slice() {
                *v *= s;
            }
        }
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            let n = t.as_slice().len();
            if idx < n {
                return t.as_slice()[idx];
            }
            idx -= n;
        }
        panic!("flat gradient index out of range");
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0))
    }
}

/// Alias used by callers that think of the network as a whole.
pub type Denoiser = DenoiserParams;

pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    DenoiserParams::init(cfg, seed)
}
