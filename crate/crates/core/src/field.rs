//! The velocity-field interface shared by the learned denoiser and the exact
//! oracle, plus classifier-free guidance on top of it.

use crate::corpus::ControlId;
use crate::error::{FloodError, Result};
use crate::tensor::Mat;

/// A per-frame velocity field evaluated on a window of frames.
///
/// Row `r` of `x` is absolute frame `start + r`, with control `controls[r]` and
/// noise level `alpha[r]`.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &Mat, controls: &[ControlId], alpha: &[f64], start: usize) -> Result<Mat>;

    /// Reserved id meaning "no condition".
    fn null_control(&self) -> ControlId;

    /// Longest window the field accepts, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn velocity(&self, x: &Mat, controls: &[ControlId], alpha: &[f64], start: usize) -> Result<Mat> {
        (**self).velocity(x, controls, alpha, start)
    }

    fn null_control(&self) -> ControlId {
        (**self).null_control()
    }

    fn max_context(&self) -> Option<usize> {
        (**self).max_context()
    }
}

/// `v_null + scale · (v_cond − v_null)`. Scale 1 and 0 return the conditional and
/// null velocities untouched, so those cases are exact.
pub fn cfg_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &Mat,
    controls: &[ControlId],
    alpha: &[f64],
    start: usize,
    scale: f64,
) -> Result<Mat> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(FloodError::invalid(format!("cfg scale must be >= 0, got {scale}")));
    }
    if scale == 1.0 {
        return field.velocity(x, controls, alpha, start);
    }
    let null = vec![field.null_control(); controls.len()];
    let v_null = field.velocity(x, &null, alpha, start)?;
    if scale == 0.0 {
        return Ok(v_null);
    }
    let v_cond = field.velocity(x, controls, alpha, start)?;
    let mut out = v_null.clone();
    for ((o, c), n) in out
        .as_mut_slice()
        .iter_mut()
        .zip(v_cond.as_slice())
        .zip(v_null.as_slice())
    {
        *o = n + scale * (c - n);
    }
    Ok(out)
}
