//! Exact marginal dynamics for finite-mixture data.
//!
//! Every affine prediction target has marginal `a ⊙ g + b ⊙ x`, where
//! `g = E[z | x, c]` is the posterior mean. For a finite mixture `g` is a
//! softmax-weighted average of the atoms, which this module evaluates by brute
//! force. Frames with `α = 0` contribute the same likelihood to every atom and are
//! skipped; saturated frames use `max(β, beta_floor)` as their standard deviation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConditionedCorpus, ControlId};
use crate::error::{FloodError, Result};
use crate::field::VelocityField;
use crate::gaussian_path::{affine_coeffs, apply_affine, gaussian_mat, PredictionKind};
use crate::schedule::{ActiveWindow, FrameCoeffs, ScheduleKind, VectorizedSchedule};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub max_abs_drift_before_window: f64,
    pub max_abs_drift_after_window: f64,
    pub window: ActiveWindow,
}

/// Frames whose score used the clamped `beta_floor` instead of β.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    pub clamped_frames: Vec<usize>,
}

fn check_inputs(x: &Mat, controls: &[ControlId], alpha: &[f64], corpus: &ConditionedCorpus) -> Result<()> {
    if x.rows() != controls.len() || x.rows() != alpha.len() {
        return Err(FloodError::invalid(format!(
            "window has {} rows, {} controls, {} alphas",
            x.rows(),
            controls.len(),
            alpha.len()
        )));
    }
    if x.rows() > corpus.frames() || x.cols() != corpus.dim() {
        return Err(FloodError::invalid(format!(
            "window shape {:?} does not fit corpus ({} x {})",
            x.shape(),
            corpus.frames(),
            corpus.dim()
        )));
    }
    Ok(())
}

/// Posterior mean over an explicit weighted atom set.
fn posterior_mean_over(
    x: &Mat,
    alpha: &[f64],
    beta_floor: f64,
    corpus: &ConditionedCorpus,
    members: &[(usize, f64)],
) -> Mat {
    let atoms = corpus.atoms();
    let rows = x.rows();
    let d = x.cols();
    let mut logw: Vec<f64> = Vec::with_capacity(members.len());
    for &(i, w) in members {
        let z = &atoms[i].frames;
        let mut lw = w.ln();
        for k in 0..rows {
            let a = alpha[k];
            if a == 0.0 {
                continue;
            }
            let sd = (1.0 - a).max(beta_floor);
            let inv = 1.0 / (2.0 * sd * sd);
            let zr = z.row(k);
            let mut sq = 0.0;
            for (xv, zv) in x.row(k).iter().zip(zr) {
                let r = xv - a * zv;
                sq += r * r;
            }
            lw -= sq * inv;
        }
        logw.push(lw);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for lw in logw.iter_mut() {
        *lw = (*lw - max).exp();
        total += *lw;
    }
    let mut g = Mat::zeros(rows, d);
    for (&(i, _), w) in members.iter().zip(&logw) {
        let p = w / total;
        let z = &atoms[i].frames;
        for k in 0..rows {
            for (gv, zv) in g.row_mut(k).iter_mut().zip(z.row(k)) {
                *gv += p * zv;
            }
        }
    }
    g
}

/// Posterior mean `E[z^{0:L} | x^{0:L}, c^{0:L}]` from per-frame noise levels.
pub fn posterior_mean_with(
    x: &Mat,
    controls: &[ControlId],
    alpha: &[f64],
    beta_floor: f64,
    corpus: &ConditionedCorpus,
) -> Result<Mat> {
    check_inputs(x, controls, alpha, corpus)?;
    let members: Vec<(usize, f64)> = corpus
        .atoms_for(controls)?
        .iter()
        .map(|&i| (i, corpus.atoms()[i].weight))
        .collect();
    Ok(posterior_mean_over(x, alpha, beta_floor, corpus, &members))
}

pub fn posterior_mean(
    x: &Mat,
    controls: &[ControlId],
    t: f64,
    sched: &VectorizedSchedule,
    corpus: &ConditionedCorpus,
) -> Result<Mat> {
    let (alpha, _) = sched.alpha_beta_at(t)?;
    let l = x.rows();
    if l > alpha.len() {
        return Err(FloodError::invalid("more rows than schedule frames"));
    }
    posterior_mean_with(x, controls, &alpha[..l], sched.beta_floor(), corpus)
}

pub fn marginal_velocity_with(
    x: &Mat,
    controls: &[ControlId],
    alpha: &[f64],
    beta_floor: f64,
    corpus: &ConditionedCorpus,
) -> Result<Mat> {
    let g = posterior_mean_with(x, controls, alpha, beta_floor, corpus)?;
    let c = FrameCoeffs::from_alpha(alpha);
    let (a, b) = affine_coeffs(PredictionKind::Velocity, &c)?;
    Ok(apply_affine(&a, &b, &g, x))
}

/// Marginal velocity `a_t ⊙ g_t + b_t ⊙ x`, computed over every frame of `x`.
pub fn marginal_velocity(
    x: &Mat,
    controls: &[ControlId],
    t: f64,
    sched: &VectorizedSchedule,
    corpus: &ConditionedCorpus,
) -> Result<Mat> {
    let c = sched.coeffs_at(t)?;
    let l = x.rows();
    let c = c.slice(0, l);
    let g = posterior_mean_with(x, controls, &c.alpha, sched.beta_floor(), corpus)?;
    let (a, b) = affine_coeffs(PredictionKind::Velocity, &c)?;
    Ok(apply_affine(&a, &b, &g, x))
}

/// Marginal score `(α/β²) ⊙ g − (1/β²) ⊙ x`, with β clamped to the floor on
/// saturated frames. Pure-noise frames reduce to `−x`.
pub fn marginal_score(
    x: &Mat,
    controls: &[ControlId],
    t: f64,
    sched: &VectorizedSchedule,
    corpus: &ConditionedCorpus,
) -> Result<(Mat, ScoreReport)> {
    let (alpha, beta) = sched.alpha_beta_at(t)?;
    let l = x.rows();
    let g = posterior_mean_with(x, controls, &alpha[..l], sched.beta_floor(), corpus)?;
    let mut report = ScoreReport::default();
    let mut s = Mat::zeros(l, x.cols());
    for k in 0..l {
        let mut b = beta[k];
        if b < sched.beta_floor() {
            b = sched.beta_floor();
            report.clamped_frames.push(k);
        }
        let b2 = b * b;
        let a = alpha[k];
        for ((sv, gv), xv) in s.row_mut(k).iter_mut().zip(g.row(k)).zip(x.row(k)) {
            *sv = a / b2 * gv - xv / b2;
        }
    }
    Ok((s, report))
}

/// Evaluates the full marginal field and reports the largest drift outside the
/// active window.
pub fn verify_locality(
    x: &Mat,
    controls: &[ControlId],
    t: f64,
    sched: &VectorizedSchedule,
    corpus: &ConditionedCorpus,
) -> Result<LocalityReport> {
    if sched.kind() != ScheduleKind::Triangular {
        return Err(FloodError::Unsupported(
            "locality only holds for the triangular schedule".into(),
        ));
    }
    let window = sched.active_window(t)?;
    let u = marginal_velocity(x, controls, t, sched, corpus)?;
    let max_rows = |range: std::ops::Range<usize>| {
        range
            .flat_map(|k| u.row(k).iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max)
    };
    Ok(LocalityReport {
        max_abs_drift_before_window: max_rows(0..window.m),
        max_abs_drift_after_window: max_rows(window.n..u.rows()),
        window,
    })
}

/// Per-frame Euler increments over `[t, t_next]`: each moving frame advances by
/// the change of its own α, so no frame ever steps past `α = 1`.
pub fn alpha_increments(alpha_now: &[f64], alpha_next: &[f64]) -> Vec<f64> {
    let c = FrameCoeffs::from_alpha(alpha_now);
    alpha_now
        .iter()
        .zip(alpha_next)
        .enumerate()
        .map(|(k, (a0, a1))| if c.is_moving(k) { a1 - a0 } else { 0.0 })
        .collect()
}

/// Time grid `0, 1/spu, 2/spu, …, T` (last step shortened if needed).
pub fn time_grid(horizon: f64, steps_per_unit: usize) -> Vec<f64> {
    let n = (horizon * steps_per_unit as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut grid: Vec<f64> = (0..n).map(|i| i as f64 / steps_per_unit as f64).collect();
    grid.push(horizon);
    grid
}

/// Deterministic flow from pure noise to a sample of `p(z | c)` using the exact
/// marginal velocity.
pub fn oracle_sample(
    controls: &[ControlId],
    steps_per_unit: usize,
    seed: u64,
    sched: &VectorizedSchedule,
    corpus: &ConditionedCorpus,
) -> Result<Mat> {
    if steps_per_unit == 0 {
        return Err(FloodError::invalid("steps_per_unit must be >= 1"));
    }
    if controls.len() != sched.frames() {
        return Err(FloodError::invalid("control track length must equal K"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_mat(sched.frames(), corpus.dim(), &mut rng);
    let grid = time_grid(sched.horizon(), steps_per_unit);
    for w in grid.windows(2) {
        let (a0, _) = sched.alpha_beta_at(w[0])?;
        let (a1, _) = sched.alpha_beta_at(w[1])?;
        let u = marginal_velocity_with(&x, controls, &a0, sched.beta_floor(), corpus)?;
        let inc = alpha_increments(&a0, &a1);
        for (k, dk) in inc.iter().enumerate() {
            if *dk == 0.0 {
                continue;
            }
            let uk = u.row(k).to_vec();
            for (xv, uv) in x.row_mut(k).iter_mut().zip(uk) {
                *xv += dk * uv;
            }
        }
    }
    Ok(x)
}

/// Central finite-difference estimate of `‖∂u^{k_dst} / ∂x^{k_src}‖` (Frobenius).
pub fn window_sensitivity(
    x: &Mat,
    controls: &[ControlId],
    t: f64,
    sched: &VectorizedSchedule,
    corpus: &ConditionedCorpus,
    k_src: usize,
    k_dst: usize,
) -> Result<f64> {
    if k_src >= x.rows() || k_dst >= x.rows() {
        return Err(FloodError::invalid("frame index outside the input"));
    }
    let h = 1e-5;
    let mut total = 0.0;
    for d in 0..x.cols() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.set(k_src, d, x.get(k_src, d) + h);
        xm.set(k_src, d, x.get(k_src, d) - h);
        let up = marginal_velocity(&xp, controls, t, sched, corpus)?;
        let um = marginal_velocity(&xm, controls, t, sched, corpus)?;
        for (p, m) in up.row(k_dst).iter().zip(um.row(k_dst)) {
            let g = (p - m) / (2.0 * h);
            total += g * g;
        }
    }
    Ok(total.sqrt())
}

/// The exact marginal field wrapped as a [`VelocityField`]. The null control
/// conditions on the whole corpus with tracks weighted uniformly.
#[derive(Debug, Clone)]
pub struct OracleField<'a> {
    corpus: &'a ConditionedCorpus,
    beta_floor: f64,
}

impl<'a> OracleField<'a> {
    pub fn new(corpus: &'a ConditionedCorpus, beta_floor: f64) -> Self {
        Self { corpus, beta_floor }
    }
}

impl VelocityField for OracleField<'_> {
    fn velocity(&self, x: &Mat, controls: &[ControlId], alpha: &[f64], start: usize) -> Result<Mat> {
        if start != 0 {
            return Err(FloodError::invalid(
                "the oracle needs the full prefix; raise max_context to cover the sequence",
            ));
        }
        let null = self.null_control();
        if controls.iter().all(|&c| c == null) {
            check_inputs(x, controls, alpha, self.corpus)?;
            let tracks = self.corpus.tracks().len() as f64;
            let members: Vec<(usize, f64)> = self
                .corpus
                .atoms()
                .iter()
                .enumerate()
                .map(|(i, a)| (i, a.weight / tracks))
                .collect();
            let g = posterior_mean_over(x, alpha, self.beta_floor, self.corpus, &members);
            let c = FrameCoeffs::from_alpha(alpha);
            let (a, b) = affine_coeffs(PredictionKind::Velocity, &c)?;
            return Ok(apply_affine(&a, &b, &g, x));
        }
        marginal_velocity_with(x, controls, alpha, self.beta_floor, self.corpus)
    }

    fn null_control(&self) -> ControlId {
        self.corpus.num_controls()
    }
}
