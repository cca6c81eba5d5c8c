//! Vectorized per-frame noise schedules.
//!
//! Frame `k` at time `t` is corrupted as `x^k = α_t^k z^k + β_t^k ε^k`. The triangular
//! schedule sets `α_t^k = clamp(t - k/n_s, 0, 1)`, so denoising sweeps across the
//! sequence as a wave of constant slope and at most `ceil(n_s)` frames are ever
//! partially noisy at once.
//!
//! The triangular clamp is evaluated in "frame units" `s = t·n_s` as
//! `clamp(s - k, 0, n_s) / n_s`. This is the same function, but it makes the
//! saturation property hold bit-exactly against the window bounds
//! `m = ceil(s - n_s)` and `n = ceil(s)`, which are computed from the same `s`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};

/// Floor on β used wherever a Gaussian likelihood needs a standard deviation.
pub const DEFAULT_BETA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Triangular,
    RandomAblation,
}

impl std::str::FromStr for ScheduleKind {
    type Err = FloodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri" | "triangular" => Ok(ScheduleKind::Triangular),
            "random" | "random-ablation" => Ok(ScheduleKind::RandomAblation),
            other => Err(FloodError::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Serialized form of a schedule inside run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub n_s: f64,
    #[serde(rename = "K")]
    pub frames: usize,
    #[serde(default)]
    pub offset_seed: u64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VectorizedSchedule> {
        match self.kind {
            ScheduleKind::Triangular => VectorizedSchedule::triangular(self.n_s, self.frames),
            ScheduleKind::RandomAblation => {
                VectorizedSchedule::random_ablation(self.n_s, self.frames, self.offset_seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorizedSchedule {
    kind: ScheduleKind,
    n_s: f64,
    frames: usize,
    horizon: f64,
    offsets: Option<Vec<f64>>,
    offset_seed: u64,
    beta_floor: f64,
}

/// Count of finalized frames `m` and activated frames `n`; the window is `[m, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveWindow {
    pub m: usize,
    pub n: usize,
}

impl ActiveWindow {
    pub fn is_empty(&self) -> bool {
        self.m == self.n
    }

    pub fn len(&self) -> usize {
        self.n - self.m
    }

    pub fn contains(&self, k: usize) -> bool {
        k >= self.m && k < self.n
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SaturationReport {
    /// Frame indices where α is not exactly saturated outside the window.
    pub violations: Vec<usize>,
}

impl SaturationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Per-frame schedule values at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCoeffs {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_dot: Vec<f64>,
    pub beta_dot: Vec<f64>,
}

impl FrameCoeffs {
    /// Rebuilds the coefficients from α alone. Valid for every unit-speed clamp
    /// schedule (triangular and random-ablation): `α̇ = 1` strictly inside `(0, 1)`
    /// and 0 on the saturated plateaus, including the kinks.
    pub fn from_alpha(alpha: &[f64]) -> Self {
        let alpha_dot: Vec<f64> = alpha
            .iter()
            .map(|&a| if a > 0.0 && a < 1.0 { 1.0 } else { 0.0 })
            .collect();
        Self {
            beta: alpha.iter().map(|a| 1.0 - a).collect(),
            beta_dot: alpha_dot.iter().map(|d| -d).collect(),
            alpha: alpha.to_vec(),
            alpha_dot,
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// True where the frame carries nonzero drift.
    pub fn is_moving(&self, k: usize) -> bool {
        self.alpha_dot[k] != 0.0 || self.beta_dot[k] != 0.0
    }

    pub fn slice(&self, start: usize, end: usize) -> FrameCoeffs {
        FrameCoeffs {
            alpha: self.alpha[start..end].to_vec(),
            beta: self.beta[start..end].to_vec(),
            alpha_dot: self.alpha_dot[start..end].to_vec(),
            beta_dot: self.beta_dot[start..end].to_vec(),
        }
    }
}

/// Triangular α for frame `k`, without any sequence-length bound.
#[inline]
pub fn triangular_alpha(n_s: f64, t: f64, k: usize) -> f64 {
    let s = t * n_s;
    (s - k as f64).clamp(0.0, n_s) / n_s
}

/// Triangular α̇ for frame `k`: 1 strictly inside the ramp, 0 elsewhere.
#[inline]
pub fn triangular_alpha_dot(n_s: f64, t: f64, k: usize) -> f64 {
    let d = t * n_s - k as f64;
    if d > 0.0 && d < n_s {
        1.0
    } else {
        0.0
    }
}

/// `(m, n)` for the triangular schedule without clamping to a sequence length.
#[inline]
pub fn triangular_window_unbounded(n_s: f64, t: f64) -> (usize, usize) {
    let s = t * n_s;
    let m = (s - n_s).ceil().max(0.0) as usize;
    let n = s.ceil().max(0.0) as usize;
    (m, n)
}

impl VectorizedSchedule {
    pub fn triangular(n_s: f64, frames: usize) -> Result<Self> {
        validate(n_s, frames)?;
        Ok(Self {
            kind: ScheduleKind::Triangular,
            n_s,
            frames,
            horizon: 1.0 + frames as f64 / n_s,
            offsets: None,
            offset_seed: 0,
            beta_floor: DEFAULT_BETA_FLOOR,
        })
    }

    /// Per-frame start offsets drawn uniformly from `[0, K/n_s]`, so every frame
    /// still spends one unit of time denoising and the horizon matches the
    /// triangular schedule.
    pub fn random_ablation(n_s: f64, frames: usize, seed: u64) -> Result<Self> {
        validate(n_s, frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = frames as f64 / n_s;
        let offsets = (0..frames).map(|_| rng.gen::<f64>() * span).collect();
        let mut s = Self::with_offsets(n_s, offsets)?;
        s.offset_seed = seed;
        Ok(s)
    }

    pub fn with_offsets(n_s: f64, offsets: Vec<f64>) -> Result<Self> {
        validate(n_s, offsets.len())?;
        let span = offsets.len() as f64 / n_s;
        if let Some(bad) = offsets.iter().find(|o| !(0.0..=span).contains(*o)) {
            return Err(FloodError::invalid(format!(
                "offset {bad} outside [0, {span}]"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::RandomAblation,
            n_s,
            frames: offsets.len(),
            horizon: 1.0 + span,
            offsets: Some(offsets),
            offset_seed: 0,
            beta_floor: DEFAULT_BETA_FLOOR,
        })
    }

    pub fn with_beta_floor(mut self, floor: f64) -> Self {
        self.beta_floor = floor;
        self
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            kind: self.kind,
            n_s: self.n_s,
            frames: self.frames,
            offset_seed: self.offset_seed,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn n_s(&self) -> f64 {
        self.n_s
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Final time `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn beta_floor(&self) -> f64 {
        self.beta_floor
    }

    pub fn offsets(&self) -> Option<&[f64]> {
        self.offsets.as_deref()
    }

    /// `ceil(n_s)`, the widest the active window can get.
    pub fn max_window(&self) -> usize {
        self.n_s.ceil() as usize
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(FloodError::OutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    fn alpha_unchecked(&self, t: f64, k: usize) -> f64 {
        match &self.offsets {
            None => triangular_alpha(self.n_s, t, k),
            Some(off) => (t - off[k]).clamp(0.0, 1.0),
        }
    }

    fn alpha_dot_unchecked(&self, t: f64, k: usize) -> f64 {
        match &self.offsets {
            None => triangular_alpha_dot(self.n_s, t, k),
            Some(off) => {
                let d = t - off[k];
                if d > 0.0 && d < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn alpha_beta_at(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_time(t)?;
        let alpha: Vec<f64> = (0..self.frames).map(|k| self.alpha_unchecked(t, k)).collect();
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok((alpha, beta))
    }

    pub fn alpha_beta_dot_at(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_time(t)?;
        let dot: Vec<f64> = (0..self.frames)
            .map(|k| self.alpha_dot_unchecked(t, k))
            .collect();
        let beta_dot = dot.iter().map(|d| -d).collect();
        Ok((dot, beta_dot))
    }

    pub fn coeffs_at(&self, t: f64) -> Result<FrameCoeffs> {
        let (alpha, beta) = self.alpha_beta_at(t)?;
        let (alpha_dot, beta_dot) = self.alpha_beta_dot_at(t)?;
        Ok(FrameCoeffs {
            alpha,
            beta,
            alpha_dot,
            beta_dot,
        })
    }

    pub fn active_window(&self, t: f64) -> Result<ActiveWindow> {
        if self.kind != ScheduleKind::Triangular {
            return Err(FloodError::Unsupported(
                "the random-ablation schedule has no deterministic active window".into(),
            ));
        }
        self.check_time(t)?;
        let (m, n) = triangular_window_unbounded(self.n_s, t);
        Ok(ActiveWindow {
            m: m.min(self.frames),
            n: n.min(self.frames),
        })
    }

    pub fn check_saturation(&self, t: f64) -> Result<SaturationReport> {
        let w = self.active_window(t)?;
        let (alpha, beta) = self.alpha_beta_at(t)?;
        let violations = (0..self.frames)
            .filter(|&k| {
                if k < w.m {
                    alpha[k] != 1.0 || beta[k] != 0.0
                } else if k >= w.n {
                    alpha[k] != 0.0 || beta[k] != 1.0
                } else {
                    false
                }
            })
            .collect();
        Ok(SaturationReport { violations })
    }
}

fn validate(n_s: f64, frames: usize) -> Result<()> {
    if !(n_s.is_finite() && n_s > 0.0) {
        return Err(FloodError::invalid(format!("n_s must be positive, got {n_s}")));
    }
    if frames == 0 {
        return Err(FloodError::invalid("K must be at least 1"));
    }
    Ok(())
}
