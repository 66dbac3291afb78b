//! Perturbation and mixing primitives shared by the local rules.

use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Directions shorter than this are treated as zero by [`sam_perturb`].
pub const NORM_THRESHOLD: f64 = 1e-12;

/// `params + rho · direction / ‖direction‖`.
///
/// Returns `params` unchanged when `rho == 0` or the direction norm is below
/// [`NORM_THRESHOLD`].
pub fn sam_perturb(params: &ParamVector, direction: &ParamVector, rho: f64) -> Result<ParamVector> {
    direction.ensure_dim(params.dim(), "perturbation direction")?;
    direction.ensure_finite("perturbation direction")?;
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be finite and >= 0, got {rho}")));
    }
    let norm = direction.norm();
    let mut out = params.clone();
    if rho == 0.0 || norm < NORM_THRESHOLD {
        return Ok(out);
    }
    out.axpy(rho / norm, direction);
    Ok(out)
}

/// `(1 − gamma) · h + gamma · g`.
pub fn mix_direction(h: &ParamVector, g: &ParamVector, gamma: f64) -> Result<ParamVector> {
    g.ensure_dim(h.dim(), "mixed direction")?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("mixing coefficient must be in (0, 1], got {gamma}")));
    }
    let keep = 1.0 - gamma;
    Ok(ParamVector::from_vec(
        h.as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(a, b)| keep * a + gamma * b)
            .collect(),
    ))
}
