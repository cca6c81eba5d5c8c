//! Quality and smoothness metrics, oracle comparisons and the ablation runner.
//!
//! Jerk is the third forward difference of each feature channel scaled by
//! `fps³`: `j_k = (z_{k+3} − 3 z_{k+2} + 3 z_{k+1} − z_k) · fps³` for
//! `k = 0 … K−4`. Peak jerk is the largest `|j_k|` over frames and channels;
//! area under jerk integrates the per-frame channel maximum with the
//! trapezoidal rule at spacing `1/fps`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{distance, ConditionedCorpus, ControlId};
use crate::denoiser::{DenoiserParams, MaskKind};
use crate::error::{FloodError, Result};
use crate::field::VelocityField;
use crate::gaussian_path::PredictionKind;
use crate::oracle::marginal_velocity_with;
use crate::sampler::{emissions_to_mat, stream_generate, track_provider, SampleConfig};
use crate::schedule::{ScheduleConfig, ScheduleKind, VectorizedSchedule};
use crate::tensor::Mat;
use crate::trainer::{draw_point, train_loop, TrainConfig, TrainingPoint};

/// TV between the nearest-atom histogram of `samples` and the atom weights of
/// the track `controls`.
pub fn component_histogram_tv(samples: &[Mat], corpus: &ConditionedCorpus, controls: &[ControlId]) -> Result<f64> {
    if samples.is_empty() {
        return Err(FloodError::invalid("no samples"));
    }
    if controls.len() != corpus.frames() {
        return Err(FloodError::invalid("pass a full control track"));
    }
    let members = corpus.atoms_for(controls)?;
    let atoms = corpus.atoms();
    let mut counts = vec![0usize; members.len()];
    for s in samples {
        if s.shape() != (corpus.frames(), corpus.dim()) {
            return Err(FloodError::invalid(format!("sample shape {:?}", s.shape())));
        }
        let best = members
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, distance(s, &atoms[i].frames)))
            .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        counts[best.0] += 1;
    }
    let n = samples.len() as f64;
    let wsum: f64 = members.iter().map(|&i| atoms[i].weight).sum();
    let tv = members
        .iter()
        .zip(&counts)
        .map(|(&i, &c)| (c as f64 / n - atoms[i].weight / wsum).abs())
        .sum::<f64>()
        / 2.0;
    Ok(tv.clamp(0.0, 1.0))
}

/// A fixed evaluation point with its precomputed oracle velocity.
#[derive(Debug, Clone)]
pub struct Probe {
    pub point: TrainingPoint,
    pub oracle: Mat,
}

/// Probes drawn like training points; the target is the marginal velocity.
pub fn draw_probes(
    corpus: &ConditionedCorpus,
    sched: &ScheduleConfig,
    max_context: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Probe>> {
    if count == 0 {
        return Err(FloodError::invalid("probe_count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = sched.build()?.beta_floor();
    (0..count)
        .map(|_| {
            let point = draw_point(corpus, sched, max_context, &mut rng)?;
            let atom = &corpus.atoms()[point.atom];
            let end = point.start + point.x.rows();
            // Frames before the window are clean, so the prefix is the atom itself.
            let mut rows = atom.frames.slice_rows(0, point.start).into_vec();
            rows.extend_from_slice(point.x.as_slice());
            let x_prefix = Mat::from_vec(end, corpus.dim(), rows);
            let mut alpha = vec![1.0; point.start];
            alpha.extend_from_slice(&point.alpha);
            let u = marginal_velocity_with(&x_prefix, &atom.controls[..end], &alpha, floor, corpus)?;
            Ok(Probe {
                oracle: u.slice_rows(point.start, end),
                point,
            })
        })
        .collect()
}

/// Mean over probes of the per-probe MSE on the active rows.
pub fn velocity_mse_on_probes<F: VelocityField + ?Sized>(
    field: &F,
    _corpus: &ConditionedCorpus,
    probes: &[Probe],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(FloodError::invalid("no probes"));
    }
    let mut total = 0.0;
    for p in probes {
        let pt = &p.point;
        let v = field.velocity(&pt.x, &pt.controls, &pt.alpha, pt.start)?;
        let mut acc = 0.0;
        for &r in &pt.active {
            for (a, b) in v.row(r).iter().zip(p.oracle.row(r)) {
                acc += (a - b) * (a - b);
            }
        }
        total += acc / (pt.active.len() * v.cols()) as f64;
    }
    Ok(total / probes.len() as f64)
}

pub fn velocity_mse_vs_oracle<F: VelocityField + ?Sized>(
    field: &F,
    corpus: &ConditionedCorpus,
    sched: &ScheduleConfig,
    probe_count: usize,
    seed: u64,
) -> Result<f64> {
    let ctx = field.max_context().unwrap_or(corpus.frames());
    let probes = draw_probes(corpus, sched, ctx, probe_count, seed)?;
    velocity_mse_on_probes(field, corpus, &probes)
}

fn jerk_rows(seq: &Mat, fps: f64) -> Result<Vec<f64>> {
    if seq.rows() < 4 {
        return Err(FloodError::invalid(format!(
            "jerk needs at least 4 frames, got {}",
            seq.rows()
        )));
    }
    if !(fps > 0.0) {
        return Err(FloodError::invalid("fps must be > 0"));
    }
    let f3 = fps * fps * fps;
    Ok((0..seq.rows() - 3)
        .map(|k| {
            (0..seq.cols())
                .map(|d| {
                    let j = seq.get(k + 3, d) - 3.0 * seq.get(k + 2, d) + 3.0 * seq.get(k + 1, d)
                        - seq.get(k, d);
                    (j * f3).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn peak_jerk(seq: &Mat, fps: f64) -> Result<f64> {
    Ok(jerk_rows(seq, fps)?.into_iter().fold(0.0, f64::max))
}

pub fn auj(seq: &Mat, fps: f64) -> Result<f64> {
    let j = jerk_rows(seq, fps)?;
    let dt = 1.0 / fps;
    Ok(j.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum())
}

/// Draws `per_track` streamed samples for each track of the corpus.
pub fn sample_tracks<F: VelocityField + ?Sized>(
    field: &F,
    corpus: &ConditionedCorpus,
    sched: &VectorizedSchedule,
    cfg: &SampleConfig,
    per_track: usize,
) -> Result<Vec<(Vec<ControlId>, Vec<Mat>)>> {
    corpus
        .tracks()
        .iter()
        .enumerate()
        .map(|(ti, track)| {
            let samples = (0..per_track)
                .map(|i| {
                    let mut c = cfg.clone();
                    c.seed = cfg
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(((ti as u64) << 32) | i as u64);
                    let recs = stream_generate(field, track_provider(track), sched, corpus.dim(), &c)?;
                    Ok(emissions_to_mat(&recs))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((track.clone(), samples))
        })
        .collect()
}

/// Mean over tracks of the per-track nearest-atom TV.
pub fn sampled_tv<F: VelocityField + ?Sized>(
    field: &F,
    corpus: &ConditionedCorpus,
    sched: &VectorizedSchedule,
    cfg: &SampleConfig,
    per_track: usize,
) -> Result<f64> {
    let groups = sample_tracks(field, corpus, sched, cfg, per_track)?;
    let mut tv = 0.0;
    for (track, samples) in &groups {
        tv += component_histogram_tv(samples, corpus, track)?;
    }
    Ok(tv / groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask: MaskKind,
    pub schedule: ScheduleKind,
    pub prediction: PredictionKind,
    pub cfg_scale: f64,
    pub component_histogram_tv: f64,
    pub velocity_mse: f64,
    pub peak_jerk: f64,
    pub auj: f64,
    /// Frames a control change can take to reach the output: `ceil(n_s)`.
    pub response_latency_frames: usize,
    pub train_steps: usize,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default = "default_masks")]
    pub masks: Vec<MaskKind>,
    #[serde(default = "default_schedules")]
    pub schedules: Vec<ScheduleKind>,
    #[serde(default = "default_scales")]
    pub cfg_scales: Vec<f64>,
    #[serde(default = "default_preds")]
    pub predictions: Vec<PredictionKind>,
}

fn default_masks() -> Vec<MaskKind> {
    vec![MaskKind::Bidirectional]
}

fn default_schedules() -> Vec<ScheduleKind> {
    vec![ScheduleKind::Triangular]
}

fn default_scales() -> Vec<f64> {
    vec![1.0]
}

fn default_preds() -> Vec<PredictionKind> {
    vec![PredictionKind::Velocity]
}

impl AblationGrid {
    pub fn cells(&self) -> usize {
        self.masks.len() * self.schedules.len() * self.predictions.len() * self.cfg_scales.len()
    }
}

/// How each trained cell is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub samples_per_track: usize,
    pub steps_per_unit: usize,
    pub probe_count: usize,
    pub seed: u64,
    pub fps: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples_per_track: 250,
            steps_per_unit: 16,
            probe_count: 512,
            seed: 7,
            fps: 10.0,
        }
    }
}

/// Evaluates a trained network at test time: triangular streaming sampler and
/// triangular probes, regardless of the training schedule.
pub fn evaluate(
    params: &DenoiserParams,
    corpus: &ConditionedCorpus,
    n_s: f64,
    cfg_scale: f64,
    eval: &EvalSettings,
) -> Result<(f64, f64, f64, f64)> {
    let sched = VectorizedSchedule::triangular(n_s, corpus.frames())?;
    let sched_cfg = sched.config();
    let mse = velocity_mse_vs_oracle(params, corpus, &sched_cfg, eval.probe_count, eval.seed)?;
    let scfg = SampleConfig {
        steps_per_unit: eval.steps_per_unit,
        cfg_scale,
        seed: eval.seed,
        ..SampleConfig::default()
    };
    let groups = sample_tracks(params, corpus, &sched, &scfg, eval.samples_per_track)?;
    let (mut tv, mut pj, mut aj, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (track, samples) in &groups {
        tv += component_histogram_tv(samples, corpus, track)?;
        for s in samples {
            pj += peak_jerk(s, eval.fps)?;
            aj += auj(s, eval.fps)?;
            count += 1;
        }
    }
    let tracks = groups.len() as f64;
    Ok((tv / tracks, mse, pj / count as f64, aj / count as f64))
}

/// Trains one network per (mask, schedule, prediction) cell with identical
/// seeds and budgets, then evaluates it at every CFG scale. Failed cells are
/// reported with `error` set.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &TrainConfig,
    corpus: &ConditionedCorpus,
    eval: &EvalSettings,
) -> Result<Vec<EvalReport>> {
    if grid.cells() == 0 {
        return Err(FloodError::invalid("ablation grid is empty"));
    }
    let mut train_cells = Vec::new();
    for &mask in &grid.masks {
        for &schedule in &grid.schedules {
            for &prediction in &grid.predictions {
                train_cells.push((mask, schedule, prediction));
            }
        }
    }
    let n_s = base.schedule.n_s;
    let latency = (n_s.ceil()) as usize;
    let rows: Vec<Vec<EvalReport>> = train_cells
        .par_iter()
        .map(|&(mask, schedule, prediction)| {
            let mut cfg = base.clone();
            cfg.model.mask = mask;
            cfg.schedule.kind = schedule;
            cfg.prediction_kind = prediction;
            cfg.eval_every = 0;
            let blank = |cfg_scale: f64, final_loss: f64, err: String| EvalReport {
                mask,
                schedule,
                prediction,
                cfg_scale,
                component_histogram_tv: f64::NAN,
                velocity_mse: f64::NAN,
                peak_jerk: f64::NAN,
                auj: f64::NAN,
                response_latency_frames: latency,
                train_steps: cfg.total_steps,
                final_loss,
                error: Some(err),
            };
            let (params, log) = match train_loop(&cfg, corpus) {
                Ok(r) => r,
                Err(e) => {
                    return grid
                        .cfg_scales
                        .iter()
                        .map(|&s| blank(s, f64::NAN, e.to_string()))
                        .collect();
                }
            };
            let tail = log.len().min(200).max(1);
            let final_loss = log.iter().rev().take(tail).map(|r| r.loss).sum::<f64>() / tail as f64;
            grid.cfg_scales
                .iter()
                .map(|&scale| match evaluate(&params, corpus, n_s, scale, eval) {
                    Ok((tv, mse, pj, aj)) => EvalReport {
                        mask,
                        schedule,
                        prediction,
                        cfg_scale: scale,
                        component_histogram_tv: tv,
                        velocity_mse: mse,
                        peak_jerk: pj,
                        auj: aj,
                        response_latency_frames: latency,
                        train_steps: cfg.total_steps,
                        final_loss,
                        error: None,
                    },
                    Err(e) => blank(scale, final_loss, e.to_string()),
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

pub fn reports_to_jsonl(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&serde_json::to_string(r).expect("reports serialize"));
        s.push('\n');
    }
    s
}

pub fn render_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:<10} {:<6} {:>5} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "mask", "schedule", "pred", "cfg", "tv", "vel_mse", "peak_jerk", "auj", "loss"
    );
    for r in reports {
        let mask = format!("{:?}", r.mask).to_lowercase();
        let sched = match r.schedule {
            ScheduleKind::Triangular => "tri",
            ScheduleKind::RandomAblation => "random",
        };
        let _ = write!(
            s,
            "{:<14} {:<10} {:<6} {:>5} {:>8.4} {:>10.5} {:>10.3} {:>10.3} {:>10.5}",
            mask,
            sched,
            r.prediction.short_name(),
            r.cfg_scale,
            r.component_histogram_tv,
            r.velocity_mse,
            r.peak_jerk,
            r.auj,
            r.final_loss
        );
        if let Some(e) = &r.error {
            let _ = write!(s, "  error: {e}");
        }
        s.push('\n');
    }
    s
}
