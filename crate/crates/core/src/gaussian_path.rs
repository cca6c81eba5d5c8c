//! Conditional Gaussian probability paths and the affine relations between the
//! velocity, noise, clean-data and score parameterizations.
//!
//! Every per-frame coefficient broadcasts across the feature dimension.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FloodError, Result};
use crate::schedule::{FrameCoeffs, VectorizedSchedule};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub x: Mat,
    pub z: Mat,
    pub eps: Mat,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Velocity,
    Epsilon,
    X0,
    Score,
}

impl PredictionKind {
    pub fn short_name(self) -> &'static str {
        match self {
            PredictionKind::Velocity => "v",
            PredictionKind::Epsilon => "eps",
            PredictionKind::X0 => "x0",
            PredictionKind::Score => "score",
        }
    }
}

impl std::str::FromStr for PredictionKind {
    type Err = FloodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" | "velocity" => Ok(PredictionKind::Velocity),
            "eps" | "epsilon" => Ok(PredictionKind::Epsilon),
            "x0" => Ok(PredictionKind::X0),
            "score" => Ok(PredictionKind::Score),
            other => Err(FloodError::invalid(format!("unknown prediction kind {other:?}"))),
        }
    }
}

/// Standard normal matrix from a seeded stream.
pub fn gaussian_mat(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Mat {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Mat::from_vec(rows, cols, data)
}

/// `α ⊙ z + β ⊙ ε`, row-wise.
pub fn mix(z: &Mat, eps: &Mat, alpha: &[f64], beta: &[f64]) -> Mat {
    assert_eq!(z.shape(), eps.shape());
    assert_eq!(z.rows(), alpha.len());
    let mut x = Mat::zeros(z.rows(), z.cols());
    for k in 0..z.rows() {
        let (a, b) = (alpha[k], beta[k]);
        for ((xv, zv), ev) in x.row_mut(k).iter_mut().zip(z.row(k)).zip(eps.row(k)) {
            *xv = a * zv + b * ev;
        }
    }
    x
}

pub fn corrupt(z: &Mat, t: f64, sched: &VectorizedSchedule, noise_seed: u64) -> Result<PathPoint> {
    check_rows(z, sched.frames())?;
    let (alpha, beta) = sched.alpha_beta_at(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let eps = gaussian_mat(z.rows(), z.cols(), &mut rng);
    Ok(PathPoint {
        x: mix(z, &eps, &alpha, &beta),
        z: z.clone(),
        eps,
        t,
    })
}

fn check_rows(m: &Mat, frames: usize) -> Result<()> {
    if m.rows() != frames {
        return Err(FloodError::invalid(format!(
            "expected {frames} frames, got {}",
            m.rows()
        )));
    }
    Ok(())
}

/// Affine coefficients `(a, b)` of one frame such that the `kind` target equals
/// `a·z + b·x` under the conditional path.
pub fn affine_frame(kind: PredictionKind, c: &FrameCoeffs, k: usize) -> Result<(f64, f64)> {
    let (alpha, beta) = (c.alpha[k], c.beta[k]);
    let need_beta = |what: &str| -> Result<()> {
        if beta <= 0.0 {
            Err(FloodError::NumericalDomain(format!(
                "{what} needs beta > 0 but frame {k} has beta = {beta}"
            )))
        } else {
            Ok(())
        }
    };
    match kind {
        PredictionKind::Velocity => {
            if !c.is_moving(k) {
                return Ok((0.0, 0.0));
            }
            need_beta("velocity")?;
            let r = c.beta_dot[k] / beta;
            Ok((c.alpha_dot[k] - r * alpha, r))
        }
        PredictionKind::Epsilon => {
            need_beta("epsilon")?;
            Ok((-alpha / beta, 1.0 / beta))
        }
        PredictionKind::X0 => Ok((1.0, 0.0)),
        PredictionKind::Score => {
            need_beta("score")?;
            let b2 = beta * beta;
            Ok((alpha / b2, -1.0 / b2))
        }
    }
}

/// Per-frame affine coefficients for every frame in `c`.
pub fn affine_coeffs(kind: PredictionKind, c: &FrameCoeffs) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(c.len());
    let mut b = Vec::with_capacity(c.len());
    for k in 0..c.len() {
        let (ak, bk) = affine_frame(kind, c, k)?;
        a.push(ak);
        b.push(bk);
    }
    Ok((a, b))
}

/// `a ⊙ z + b ⊙ x` with per-frame coefficients.
pub fn apply_affine(a: &[f64], b: &[f64], z: &Mat, x: &Mat) -> Mat {
    assert_eq!(z.shape(), x.shape());
    let mut out = Mat::zeros(z.rows(), z.cols());
    for k in 0..z.rows() {
        let (ak, bk) = (a[k], b[k]);
        for ((o, zv), xv) in out.row_mut(k).iter_mut().zip(z.row(k)).zip(x.row(k)) {
            *o = ak * zv + bk * xv;
        }
    }
    out
}

/// Conditional velocity `(α̇ − β̇/β ⊙ α) ⊙ z + β̇/β ⊙ x`. Frames with zero drift
/// coefficients get exactly zero.
pub fn conditional_velocity_with(z: &Mat, x: &Mat, c: &FrameCoeffs) -> Result<Mat> {
    let (a, b) = affine_coeffs(PredictionKind::Velocity, c)?;
    Ok(apply_affine(&a, &b, z, x))
}

pub fn conditional_velocity(pp: &PathPoint, sched: &VectorizedSchedule) -> Result<Mat> {
    let c = sched.coeffs_at(pp.t)?;
    conditional_velocity_with(&pp.z, &pp.x, &c)
}

/// `−(x − α ⊙ z) / β²`; every frame must have β > 0.
pub fn conditional_score_with(z: &Mat, x: &Mat, c: &FrameCoeffs) -> Result<Mat> {
    let mut out = Mat::zeros(z.rows(), z.cols());
    for k in 0..z.rows() {
        let (alpha, beta) = (c.alpha[k], c.beta[k]);
        if beta <= 0.0 {
            return Err(FloodError::NumericalDomain(format!(
                "score undefined at frame {k} (beta = {beta})"
            )));
        }
        let b2 = beta * beta;
        for ((o, zv), xv) in out.row_mut(k).iter_mut().zip(z.row(k)).zip(x.row(k)) {
            *o = -(xv - alpha * zv) / b2;
        }
    }
    Ok(out)
}

pub fn conditional_score(pp: &PathPoint, sched: &VectorizedSchedule) -> Result<Mat> {
    let c = sched.coeffs_at(pp.t)?;
    conditional_score_with(&pp.z, &pp.x, &c)
}

/// Velocity from a score: `(β² ⊙ α̇/α − β̇ ⊙ β) ⊙ s + α̇/α ⊙ x`.
///
/// Frames with zero drift return zero; moving frames need α > 0.
pub fn velocity_from_score(s: &Mat, x: &Mat, c: &FrameCoeffs) -> Result<Mat> {
    assert_eq!(s.shape(), x.shape());
    let mut out = Mat::zeros(s.rows(), s.cols());
    for k in 0..s.rows() {
        if !c.is_moving(k) {
            continue;
        }
        let (alpha, beta) = (c.alpha[k], c.beta[k]);
        if alpha <= 0.0 {
            return Err(FloodError::NumericalDomain(format!(
                "velocity_from_score needs alpha > 0 at frame {k}"
            )));
        }
        let ratio = c.alpha_dot[k] / alpha;
        let cs = beta * beta * ratio - c.beta_dot[k] * beta;
        for ((o, sv), xv) in out.row_mut(k).iter_mut().zip(s.row(k)).zip(x.row(k)) {
            *o = cs * sv + ratio * xv;
        }
    }
    Ok(out)
}

/// Converts a prediction of any parameterization into a velocity by solving its
/// affine form for the implied clean estimate and re-expressing that estimate
/// through the velocity coefficients.
pub fn to_velocity(kind: PredictionKind, pred: &Mat, x: &Mat, c: &FrameCoeffs) -> Result<Mat> {
    if kind == PredictionKind::Velocity {
        return Ok(pred.clone());
    }
    convert(kind, PredictionKind::Velocity, pred, x, c)
}

/// Converts between parameterizations frame by frame. Frames without drift map
/// to zero when the target is a velocity.
pub fn convert(
    from: PredictionKind,
    to: PredictionKind,
    pred: &Mat,
    x: &Mat,
    c: &FrameCoeffs,
) -> Result<Mat> {
    assert_eq!(pred.shape(), x.shape());
    if from == to {
        return Ok(pred.clone());
    }
    let mut out = Mat::zeros(pred.rows(), pred.cols());
    for k in 0..pred.rows() {
        if to == PredictionKind::Velocity && !c.is_moving(k) {
            continue;
        }
        let (af, bf) = affine_frame(from, c, k)?;
        if af == 0.0 {
            return Err(FloodError::NumericalDomain(format!(
                "{from:?} prediction carries no information about z at frame {k}"
            )));
        }
        let (at, bt) = affine_frame(to, c, k)?;
        for ((o, pv), xv) in out.row_mut(k).iter_mut().zip(pred.row(k)).zip(x.row(k)) {
            let z_hat = (pv - bf * xv) / af;
            *o = at * z_hat + bt * xv;
        }
    }
    Ok(out)
}
