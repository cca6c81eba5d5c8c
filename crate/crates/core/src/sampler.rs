//! Streaming inference: windowed Euler (or Euler–Maruyama) integration of a
//! velocity field under the triangular schedule, emitting each frame once it
//! is fully denoised.
//!
//! Only frames with `0 < α < 1` move during a step. Each moving frame advances
//! by the change of its own α over the step, which equals `Δt` whenever the
//! frame's ramp kinks fall on the step grid, and never carries a frame past
//! `α = 1`. A frame is emitted the moment its α reaches 1.

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::ControlId;
use crate::error::{FloodError, Result};
use crate::field::{cfg_velocity, VelocityField};
use crate::gaussian_path::{convert, PredictionKind};
use crate::oracle::{alpha_increments, time_grid};
use crate::schedule::{triangular_alpha, triangular_window_unbounded, FrameCoeffs, ScheduleKind, VectorizedSchedule};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaProfile {
    #[default]
    Off,
    /// Diffusion `σ0` on the active window, zero elsewhere.
    Constant { sigma0: f64 },
}

impl SigmaProfile {
    pub fn sigma0(self) -> f64 {
        match self {
            SigmaProfile::Off => 0.0,
            SigmaProfile::Constant { sigma0 } => sigma0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps_per_unit: usize,
    #[serde(default = "one")]
    pub cfg_scale: f64,
    #[serde(default)]
    pub sigma: SigmaProfile,
    #[serde(default)]
    pub seed: u64,
    /// Ignore the schedule's `K` and stream until the consumer stops.
    #[serde(default)]
    pub unbounded: bool,
    /// Oldest frames beyond this many are dropped from the network input.
    #[serde(default)]
    pub max_context: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps_per_unit: 64,
            cfg_scale: 1.0,
            sigma: SigmaProfile::Off,
            seed: 0,
            unbounded: false,
            max_context: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_unit == 0 {
            return Err(FloodError::invalid("steps_per_unit must be >= 1"));
        }
        let s = self.sigma.sigma0();
        if !(s.is_finite() && s >= 0.0) {
            return Err(FloodError::invalid(format!("sigma0 must be >= 0, got {s}")));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(FloodError::invalid("cfg_scale must be >= 0"));
        }
        if self.max_context == Some(0) {
            return Err(FloodError::invalid("max_context must be >= 1"));
        }
        Ok(())
    }

    /// Total solver steps for a bounded stream over `[0, T]`.
    pub fn total_steps(&self, sched: &VectorizedSchedule) -> usize {
        time_grid(sched.horizon(), self.steps_per_unit).len() - 1
    }
}

/// One finalized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub frame_index: usize,
    /// Solver steps completed when the frame was finalized.
    pub step_index: usize,
    pub values: Vec<f64>,
    /// α of frames `frame_index, frame_index + 1, …, n(t) − 1` at emission.
    pub alpha_snapshot: Vec<f64>,
}

/// Snapshot of the window for progress reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub t: f64,
    pub m: usize,
    pub n: usize,
    /// Frames in `[0, n)` not yet emitted.
    pub pending: usize,
}

/// Initial noise for frame `k`: its own ChaCha stream, so a frame's noise does
/// not depend on when or whether other frames were drawn.
pub fn frame_noise(seed: u64, k: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn step_noise(seed: u64, step: usize, k: usize, dim: usize) -> Vec<f64> {
    let mixed = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed.rotate_left(17));
    rng.set_stream(k as u64);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Applies `x ← x + Δα v` (plus the SDE terms when `sigma0 > 0`) to moving rows.
#[allow(clippy::too_many_arguments)]
fn apply_update(
    x: &mut Mat,
    v: &Mat,
    alpha_now: &[f64],
    alpha_next: &[f64],
    row_frame: impl Fn(usize) -> usize,
    sigma0: f64,
    seed: u64,
    step: usize,
) -> Result<()> {
    let inc = alpha_increments(alpha_now, alpha_next);
    let coeffs = FrameCoeffs::from_alpha(alpha_now);
    let score = if sigma0 > 0.0 {
        // Scores only exist where β > 0; stationary rows need none.
        let mut s = Mat::zeros(v.rows(), v.cols());
        for r in (0..v.rows()).filter(|&r| coeffs.is_moving(r)) {
            let one = convert(
                PredictionKind::Velocity,
                PredictionKind::Score,
                &v.slice_rows(r, r + 1),
                &x.slice_rows(r, r + 1),
                &coeffs.slice(r, r + 1),
            )?;
            s.row_mut(r).copy_from_slice(one.row(0));
        }
        Some(s)
    } else {
        None
    };
    let dim = x.cols();
    for (r, &d) in inc.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        // The finalizing step stays deterministic: with β = Δα the explicit
        // score term would scale the row's deviation by σ0²/(2Δα).
        let finalizing = alpha_next[r] >= 1.0;
        match &score {
            Some(s) if !finalizing => {
                let xi = step_noise(seed, step, row_frame(r), dim);
                let half = 0.5 * sigma0 * sigma0;
                let amp = sigma0 * d.sqrt();
                for (((xv, vv), sv), e) in x.row_mut(r).iter_mut().zip(v.row(r)).zip(s.row(r)).zip(&xi) {
                    *xv += (vv + half * sv) * d + amp * e;
                }
            }
            _ => {
                for (xv, vv) in x.row_mut(r).iter_mut().zip(v.row(r)) {
                    *xv += d * vv;
                }
            }
        }
    }
    Ok(())
}

/// Per-session streaming state. Rows of the buffer are frames
/// `base .. base + rows`; frames at or beyond `n(t)` are never materialized.
#[derive(Debug, Clone)]
pub struct StreamState {
    cfg: SampleConfig,
    n_s: f64,
    dim: usize,
    /// `Some(K)` for bounded streams.
    frames: Option<usize>,
    horizon: Option<f64>,
    step: usize,
    t: f64,
    base: usize,
    buffer: Mat,
    controls: Vec<ControlId>,
    emitted: usize,
}

impl StreamState {
    pub fn new(dim: usize, sched: &VectorizedSchedule, cfg: &SampleConfig) -> Result<Self> {
        cfg.validate()?;
        if sched.kind() != ScheduleKind::Triangular {
            return Err(FloodError::Unsupported(
                "streaming requires the triangular schedule".into(),
            ));
        }
        if dim == 0 {
            return Err(FloodError::invalid("D must be >= 1"));
        }
        Ok(Self {
            cfg: cfg.clone(),
            n_s: sched.n_s(),
            dim,
            frames: (!cfg.unbounded).then_some(sched.frames()),
            horizon: (!cfg.unbounded).then_some(sched.horizon()),
            step: 0,
            t: 0.0,
            base: 0,
            buffer: Mat::zeros(0, dim),
            controls: Vec::new(),
            emitted: 0,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn emitted_count(&self) -> usize {
        self.emitted
    }

    pub fn controls(&self) -> &[ControlId] {
        &self.controls
    }

    pub fn config(&self) -> &SampleConfig {
        &self.cfg
    }

    /// Frames activated so far, i.e. `n(t)`.
    pub fn activated(&self) -> usize {
        self.controls.len()
    }

    pub fn is_done(&self) -> bool {
        match self.horizon {
            Some(h) => self.t >= h,
            None => false,
        }
    }

    fn clamp_frames(&self, k: usize) -> usize {
        self.frames.map_or(k, |f| k.min(f))
    }

    pub fn window_state(&self) -> WindowState {
        let (m, n) = triangular_window_unbounded(self.n_s, self.t);
        WindowState {
            t: self.t,
            m: self.clamp_frames(m),
            n: self.clamp_frames(n),
            pending: self.clamp_frames(n).saturating_sub(self.emitted),
        }
    }

    fn time_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.cfg.steps_per_unit as f64;
        match self.horizon {
            Some(h) if t > h => h,
            _ => t,
        }
    }

    fn alphas(&self, t: f64, from: usize, to: usize) -> Vec<f64> {
        (from..to).map(|k| triangular_alpha(self.n_s, t, k)).collect()
    }

    /// Materializes frames up to `n(t)`, asking the provider for each new
    /// frame's control. On provider failure nothing is changed.
    fn activate(
        &mut self,
        provider: &mut dyn FnMut(usize) -> std::result::Result<ControlId, String>,
    ) -> Result<()> {
        let (_, n) = triangular_window_unbounded(self.n_s, self.t);
        let n = self.clamp_frames(n);
        let first = self.controls.len();
        if n <= first {
            return Ok(());
        }
        let mut new_controls = Vec::with_capacity(n - first);
        for k in first..n {
            let c = provider(k).map_err(|msg| FloodError::ControlProvider { frame: k, msg })?;
            new_controls.push(c);
        }
        let rows = self.buffer.rows();
        let mut data = std::mem::take(&mut self.buffer).into_vec();
        for k in first..n {
            data.extend(frame_noise(self.cfg.seed, k, self.dim));
        }
        self.buffer = Mat::from_vec(rows + n - first, self.dim, data);
        self.controls.extend(new_controls);
        Ok(())
    }

    /// Advances one solver step and returns the frames finalized by it.
    pub fn step<F: VelocityField + ?Sized>(
        &mut self,
        field: &F,
        provider: &mut dyn FnMut(usize) -> std::result::Result<ControlId, String>,
    ) -> Result<Vec<EmissionRecord>> {
        if self.is_done() {
            return Err(FloodError::InvalidState("stream already finished".into()));
        }
        self.activate(provider)?;
        let n = self.activated();
        let t_next = self.time_at(self.step + 1);

        let mut limit = self.cfg.max_context.unwrap_or(usize::MAX);
        if let Some(fc) = field.max_context() {
            limit = limit.min(fc);
        }
        let start = n.saturating_sub(limit).max(self.base);
        let (m, _) = triangular_window_unbounded(self.n_s, self.t);
        if start > m.min(n) {
            return Err(FloodError::invalid(format!(
                "context of {limit} frames cannot cover the active window [{m}, {n})"
            )));
        }
        if n > start {
            let lo = start - self.base;
            let hi = n - self.base;
            let x = self.buffer.slice_rows(lo, hi);
            let a0 = self.alphas(self.t, start, n);
            let a1 = self.alphas(t_next, start, n);
            let v = cfg_velocity(field, &x, &self.controls[start..n], &a0, start, self.cfg.cfg_scale)?;
            let mut updated = x;
            apply_update(
                &mut updated,
                &v,
                &a0,
                &a1,
                |r| start + r,
                self.cfg.sigma.sigma0(),
                self.cfg.seed,
                self.step,
            )?;
            for r in 0..updated.rows() {
                self.buffer.row_mut(lo + r).copy_from_slice(updated.row(r));
            }
        }
        self.step += 1;
        self.t = t_next;

        let mut out = Vec::new();
        while self.emitted < n && triangular_alpha(self.n_s, self.t, self.emitted) == 1.0 {
            let k = self.emitted;
            out.push(EmissionRecord {
                frame_index: k,
                step_index: self.step,
                values: self.buffer.row(k - self.base).to_vec(),
                alpha_snapshot: self.alphas(self.t, k, n),
            });
            self.emitted += 1;
        }
        self.trim(limit);
        Ok(out)
    }

    /// Drops emitted frames that can never re-enter the network input.
    fn trim(&mut self, limit: usize) {
        if limit == usize::MAX {
            return;
        }
        let (_, n_next) = triangular_window_unbounded(self.n_s, self.t);
        let keep_from = n_next.saturating_sub(limit).min(self.emitted);
        if keep_from > self.base {
            let drop = keep_from - self.base;
            self.buffer = self.buffer.slice_rows(drop, self.buffer.rows());
            self.base = keep_from;
        }
    }
}

/// Runs a stream to completion (bounded) or until `sink` breaks, handing each
/// emitted frame to `sink` in index order.
pub fn stream_generate_with<F, P, S>(
    field: &F,
    mut provider: P,
    sched: &VectorizedSchedule,
    dim: usize,
    cfg: &SampleConfig,
    mut sink: S,
) -> Result<StreamState>
where
    F: VelocityField + ?Sized,
    P: FnMut(usize) -> std::result::Result<ControlId, String>,
    S: FnMut(&StreamState, EmissionRecord) -> ControlFlow<()>,
{
    let mut state = StreamState::new(dim, sched, cfg)?;
    while !state.is_done() {
        for rec in state.step(field, &mut provider)? {
            if sink(&state, rec).is_break() {
                return Ok(state);
            }
        }
    }
    Ok(state)
}

/// Bounded streaming with deterministic (σ off) Euler steps.
pub fn stream_generate<F, P>(
    field: &F,
    provider: P,
    sched: &VectorizedSchedule,
    dim: usize,
    cfg: &SampleConfig,
) -> Result<Vec<EmissionRecord>>
where
    F: VelocityField + ?Sized,
    P: FnMut(usize) -> std::result::Result<ControlId, String>,
{
    if cfg.unbounded {
        return Err(FloodError::invalid(
            "stream_generate collects a bounded stream; use stream_generate_with for unbounded runs",
        ));
    }
    let mut cfg = cfg.clone();
    cfg.sigma = SigmaProfile::Off;
    collect(field, provider, sched, dim, &cfg)
}

/// Bounded Euler–Maruyama streaming; requires `sigma0 > 0` in `cfg`.
pub fn stream_generate_sde<F, P>(
    field: &F,
    provider: P,
    sched: &VectorizedSchedule,
    dim: usize,
    cfg: &SampleConfig,
) -> Result<Vec<EmissionRecord>>
where
    F: VelocityField + ?Sized,
    P: FnMut(usize) -> std::result::Result<ControlId, String>,
{
    if cfg.unbounded {
        return Err(FloodError::invalid("bounded runs only"));
    }
    collect(field, provider, sched, dim, cfg)
}

fn collect<F, P>(
    field: &F,
    provider: P,
    sched: &VectorizedSchedule,
    dim: usize,
    cfg: &SampleConfig,
) -> Result<Vec<EmissionRecord>>
where
    F: VelocityField + ?Sized,
    P: FnMut(usize) -> std::result::Result<ControlId, String>,
{
    let mut out = Vec::with_capacity(sched.frames());
    stream_generate_with(field, provider, sched, dim, cfg, |_, rec| {
        out.push(rec);
        ControlFlow::Continue(())
    })?;
    Ok(out)
}

/// Stacks emitted frames into a `K × D` sequence.
pub fn emissions_to_mat(records: &[EmissionRecord]) -> Mat {
    Mat::from_rows(&records.iter().map(|r| r.values.clone()).collect::<Vec<_>>())
}

/// A provider that reads a fixed control track.
pub fn track_provider(track: &[ControlId]) -> impl FnMut(usize) -> std::result::Result<ControlId, String> + '_ {
    move |k| {
        track
            .get(k)
            .copied()
            .ok_or_else(|| format!("control track has only {} frames", track.len()))
    }
}

/// Reference integrator: Euler over the whole `K`-frame sequence at once, with
/// the same noise and step rule as the streaming sampler. Works for any clamp
/// schedule, including the random-ablation one.
pub fn integrate_full<F: VelocityField + ?Sized>(
    field: &F,
    controls: &[ControlId],
    sched: &VectorizedSchedule,
    dim: usize,
    cfg: &SampleConfig,
) -> Result<Mat> {
    cfg.validate()?;
    let frames = sched.frames();
    if controls.len() != frames {
        return Err(FloodError::invalid("control track length must equal K"));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for k in 0..frames {
        data.extend(frame_noise(cfg.seed, k, dim));
    }
    let mut x = Mat::from_vec(frames, dim, data);
    let grid = time_grid(sched.horizon(), cfg.steps_per_unit);
    for (step, w) in grid.windows(2).enumerate() {
        let (a0, _) = sched.alpha_beta_at(w[0])?;
        let (a1, _) = sched.alpha_beta_at(w[1])?;
        let v = cfg_velocity(field, &x, controls, &a0, 0, cfg.cfg_scale)?;
        apply_update(&mut x, &v, &a0, &a1, |r| r, cfg.sigma.sigma0(), cfg.seed, step)?;
    }
    Ok(x)
}

/// Replays two control tracks with the same seed and returns the first frame
/// whose emitted values differ, or `None` if the streams are identical.
pub fn replay_check<F: VelocityField + ?Sized>(
    field: &F,
    controls_a: &[ControlId],
    controls_b: &[ControlId],
    sched: &VectorizedSchedule,
    dim: usize,
    cfg: &SampleConfig,
) -> Result<Option<usize>> {
    let a = stream_generate_sde(field, track_provider(controls_a), sched, dim, cfg)?;
    let b = stream_generate_sde(field, track_provider(controls_b), sched, dim, cfg)?;
    Ok(a
        .iter()
        .zip(&b)
        .find(|(ra, rb)| ra.values != rb.values)
        .map(|(ra, _)| ra.frame_index))
}
