//! Windowed flow-matching training with condition dropout.
//!
//! Each sample draws an atom, a time `t ~ U(0, T)` and Gaussian noise, builds the
//! noisy prefix `x^{0:n(t)}`, and regresses the network output onto the target
//! on the active frames only. Under the random-ablation schedule every sample
//! draws fresh per-frame offsets and the whole sequence is the window.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConditionedCorpus, ControlId};
use crate::denoiser::{DenoiserConfig, DenoiserParams, Gradients, MaskKind};
use crate::error::{FloodError, Result};
use crate::gaussian_path::{conditional_velocity_with, gaussian_mat, mix, PredictionKind};
use crate::metrics::{draw_probes, velocity_mse_on_probes, Probe};
use crate::schedule::{FrameCoeffs, ScheduleConfig, ScheduleKind, VectorizedSchedule};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Cosine from `learning_rate` down to `final_fraction · learning_rate`.
    Cosine { final_fraction: f64 },
}

impl LrDecay {
    pub fn factor(self, step: usize, total_steps: usize) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine { final_fraction } => {
                let p = if total_steps <= 1 {
                    0.0
                } else {
                    (step as f64 / (total_steps - 1) as f64).min(1.0)
                };
                final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// Network shape; `D` and the control vocabulary come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: usize,
    pub ffn: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mask: MaskKind,
    pub max_context: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let toy = DenoiserConfig::toy(1, 1);
        Self {
            hidden: toy.hidden,
            ffn: toy.ffn,
            num_layers: toy.num_layers,
            num_heads: toy.num_heads,
            mask: toy.mask,
            max_context: toy.max_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub batch_size: usize,
    #[serde(default)]
    pub cond_dropout_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prediction")]
    pub prediction_kind: PredictionKind,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub model: ModelSpec,
}

fn default_prediction() -> PredictionKind {
    PredictionKind::Velocity
}

fn default_probe_count() -> usize {
    256
}

impl TrainConfig {
    /// Toy settings used by the end-to-end checks.
    pub fn toy(n_s: f64, frames: usize) -> Self {
        Self {
            total_steps: 20_000,
            learning_rate: 1e-3,
            lr_decay: LrDecay::Constant,
            optimizer: Optimizer::default(),
            batch_size: 4,
            cond_dropout_prob: 0.1,
            seed: 0,
            prediction_kind: PredictionKind::Velocity,
            schedule: ScheduleConfig {
                kind: ScheduleKind::Triangular,
                n_s,
                frames,
                offset_seed: 0,
            },
            eval_every: 1000,
            probe_count: 256,
            grad_clip: Some(1.0),
            model: ModelSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(FloodError::invalid("learning_rate must be finite and >= 0"));
        }
        if let LrDecay::Cosine { final_fraction } = self.lr_decay {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(FloodError::invalid("final_fraction must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(FloodError::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(FloodError::invalid("cond_dropout_prob must lie in [0, 1)"));
        }
        if self.prediction_kind == PredictionKind::Score {
            return Err(FloodError::invalid("training targets are velocity, epsilon or x0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(FloodError::invalid("grad_clip must be > 0"));
            }
        }
        self.schedule.build().map(|_| ())
    }

    pub fn denoiser_config(&self, corpus: &ConditionedCorpus) -> DenoiserConfig {
        DenoiserConfig {
            dim: corpus.dim(),
            hidden: self.model.hidden,
            ffn: self.model.ffn,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            mask: self.model.mask,
            num_controls: corpus.num_controls() + 1,
            max_context: self.model.max_context,
            prediction: self.prediction_kind,
            alpha_freqs: 4,
            pos_freqs: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub velocity_mse_vs_oracle: Option<f64>,
    pub wall_time: f64,
}

/// One noisy training window.
#[derive(Debug, Clone)]
pub struct TrainingPoint {
    pub t: f64,
    /// First absolute frame of the window.
    pub start: usize,
    pub x: Mat,
    pub z: Mat,
    pub eps: Mat,
    pub controls: Vec<ControlId>,
    pub alpha: Vec<f64>,
    /// Window rows with `0 < α < 1`.
    pub active: Vec<usize>,
    pub atom: usize,
}

/// Draws `(atom, t, ε)` and the window the network sees. `t` is redrawn until
/// the active set is nonempty.
pub fn draw_point(
    corpus: &ConditionedCorpus,
    sched_cfg: &ScheduleConfig,
    max_context: usize,
    rng: &mut impl Rng,
) -> Result<TrainingPoint> {
    let total: f64 = corpus.atoms().iter().map(|a| a.weight).sum();
    let mut u = rng.gen::<f64>() * total;
    let mut atom = corpus.atoms().len() - 1;
    for (i, a) in corpus.atoms().iter().enumerate() {
        if u < a.weight {
            atom = i;
            break;
        }
        u -= a.weight;
    }
    let sched = match sched_cfg.kind {
        ScheduleKind::Triangular => VectorizedSchedule::triangular(sched_cfg.n_s, sched_cfg.frames)?,
        ScheduleKind::RandomAblation => {
            VectorizedSchedule::random_ablation(sched_cfg.n_s, sched_cfg.frames, rng.gen())?
        }
    };
    if sched.frames() != corpus.frames() {
        return Err(FloodError::invalid(format!(
            "schedule K = {} but corpus K = {}",
            sched.frames(),
            corpus.frames()
        )));
    }
    loop {
        let t = rng.gen::<f64>() * sched.horizon();
        let (alpha_all, beta_all) = sched.alpha_beta_at(t)?;
        let end = match sched.kind() {
            ScheduleKind::Triangular => sched.active_window(t)?.n,
            ScheduleKind::RandomAblation => sched.frames(),
        };
        let start = end.saturating_sub(max_context);
        let alpha = alpha_all[start..end].to_vec();
        let active: Vec<usize> = (0..alpha.len()).filter(|&r| alpha[r] > 0.0 && alpha[r] < 1.0).collect();
        if active.is_empty() {
            continue;
        }
        let a = &corpus.atoms()[atom];
        let z = a.frames.slice_rows(start, end);
        let eps = gaussian_mat(end - start, corpus.dim(), rng);
        let x = mix(&z, &eps, &alpha, &beta_all[start..end]);
        return Ok(TrainingPoint {
            t,
            start,
            x,
            z,
            eps,
            controls: a.controls[start..end].to_vec(),
            alpha,
            active,
            atom,
        });
    }
}

/// Regression target for `kind` on every row of the window.
pub fn target_for(kind: PredictionKind, p: &TrainingPoint) -> Result<Mat> {
    match kind {
        PredictionKind::Velocity => {
            conditional_velocity_with(&p.z, &p.x, &FrameCoeffs::from_alpha(&p.alpha))
        }
        PredictionKind::Epsilon => Ok(p.eps.clone()),
        PredictionKind::X0 => Ok(p.z.clone()),
        PredictionKind::Score => Err(FloodError::invalid("score is not a training target")),
    }
}

/// Mean-squared error over the active rows and its gradient w.r.t. `pred`.
pub fn masked_mse(pred: &Mat, target: &Mat, active: &[usize]) -> (f64, Mat) {
    let d = pred.cols();
    let denom = (active.len() * d) as f64;
    let mut grad = Mat::zeros(pred.rows(), d);
    let mut loss = 0.0;
    for &r in active {
        for ((g, p), t) in grad.row_mut(r).iter_mut().zip(pred.row(r)).zip(target.row(r)) {
            let e = p - t;
            loss += e * e;
            *g = 2.0 * e / denom;
        }
    }
    (loss / denom, grad)
}

fn sample_grad(
    params: &DenoiserParams,
    corpus: &ConditionedCorpus,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let mut p = draw_point(corpus, &cfg.schedule, params.config().max_context, rng)?;
    if rng.gen::<f64>() < cfg.cond_dropout_prob {
        let null = params.config().null_control();
        p.controls.iter_mut().for_each(|c| *c = null);
    }
    let target = target_for(cfg.prediction_kind, &p)?;
    let (pred, cache) = params.forward(&p.x, &p.controls, &p.alpha)?;
    let (loss, grad_out) = masked_mse(&pred, &target, &p.active);
    Ok((loss, params.backward(&cache, &grad_out)?))
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros = || params.zeros_like().tensors;
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn apply_update(params: &mut DenoiserParams, g: &Gradients, state: &mut OptimizerState, cfg: &TrainConfig) {
    let lr = cfg.learning_rate * cfg.lr_decay.factor(state.step as usize, cfg.total_steps);
    if lr == 0.0 {
        return;
    }
    let mut clip = 1.0;
    if let Some(c) = cfg.grad_clip {
        let norm = g
            .tensors
            .iter()
            .flat_map(|t| t.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > c {
            clip = c / norm;
        }
    }
    state.step += 1;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (w, gt) in params.tensors_mut().iter_mut().zip(&g.tensors) {
                for (wv, gv) in w.as_mut_slice().iter_mut().zip(gt.as_slice()) {
                    *wv -= lr * clip * gv;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            let tensors = params.tensors_mut();
            for i in 0..tensors.len() {
                let w = tensors[i].as_mut_slice();
                let m = state.m[i].as_mut_slice();
                let v = state.v[i].as_mut_slice();
                for (j, gv) in g.tensors[i].as_slice().iter().enumerate() {
                    let gv = gv * clip;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                    w[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                }
            }
        }
    }
}

/// Seed for sample `b` of step `step`; keeps batches independent of threading.
fn sample_seed(seed: u64, step: usize, b: usize) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    for v in [step as u64, b as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(29);
    }
    h
}

/// One optimizer step on a batch. Returns the batch-mean loss.
pub fn train_step(
    params: &mut DenoiserParams,
    state: &mut OptimizerState,
    corpus: &ConditionedCorpus,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let results: Vec<Result<(f64, Gradients)>> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, step, b));
            sample_grad(params, corpus, cfg, &mut rng)
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / cfg.batch_size as f64;
    loss *= inv;
    total.scale(inv);
    if !loss.is_finite() {
        return Err(FloodError::NonFiniteLoss {
            step,
            detail: format!("batch loss {loss}"),
        });
    }
    apply_update(params, &total, state, cfg);
    Ok(loss)
}

/// Full training run. Records the loss every step and the oracle velocity MSE
/// on a fixed probe set every `eval_every` steps (and at the end).
pub fn train_loop(cfg: &TrainConfig, corpus: &ConditionedCorpus) -> Result<(DenoiserParams, Vec<TrainLogRecord>)> {
    train_loop_with(cfg, corpus, |_| {})
}

pub fn train_loop_with(
    cfg: &TrainConfig,
    corpus: &ConditionedCorpus,
    mut on_record: impl FnMut(&TrainLogRecord),
) -> Result<(DenoiserParams, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    let dcfg = cfg.denoiser_config(corpus);
    let mut params = DenoiserParams::init(&dcfg, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let probes: Vec<Probe> = if cfg.eval_every > 0 {
        draw_probes(corpus, &cfg.schedule, dcfg.max_context, cfg.probe_count, cfg.seed ^ 0x5EED)?
    } else {
        Vec::new()
    };
    let clock = Instant::now();
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let loss = train_step(&mut params, &mut state, corpus, cfg, step)?;
        let done = step + 1;
        let eval = cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_steps);
        let mse = if eval {
            Some(velocity_mse_on_probes(&params, corpus, &probes)?)
        } else {
            None
        };
        let rec = TrainLogRecord {
            step: done,
            loss,
            velocity_mse_vs_oracle: mse,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        on_record(&rec);
        log.push(rec);
    }
    Ok((params, log))
}

/// Moving average with the given window, for trend checks on the loss curve.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut acc: f64 = values[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..values.len() {
        acc += values[i] - values[i - window];
        out.push(acc / window as f64);
    }
    out
}
