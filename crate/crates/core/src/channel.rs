//! Blockage-aware large-scale channel model.
//!
//! The channel gain is g = beta(x) * ||x - u||^(-alpha(x)) where alpha and
//! beta interpolate between LoS and NLoS values through a sigmoid of the
//! normalized shadow clearance. All gradients are analytic; the logarithm in
//! the gain gradient is natural (it comes from d/dalpha of ||.||^alpha),
//! while rates elsewhere use base 2.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{min_clearance, BlockedRegion};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("UAV-user distance {0} m is below the 1 m reference distance")]
    DistanceTooSmall(f64),
    #[error("zero distance in smoothing")]
    ZeroDistance,
}

/// LoS/NLoS channel constants, all in linear scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelParams {
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    pub beta_los: f64,
    pub beta_nlos: f64,
    pub eta: f64,
    pub noise_power: f64,
}

impl ChannelParams {
    /// Table-style defaults: alpha 2/3.3, beta -46.43/-56.43 dB, eta 1000,
    /// noise -107 dBm.
    pub fn defaults() -> Self {
        Self {
            alpha_los: 2.0,
            alpha_nlos: 3.3,
            beta_los: 10f64.powf(-46.43 / 10.0),
            beta_nlos: 10f64.powf(-56.43 / 10.0),
            eta: 1000.0,
            noise_power: 10f64.powf((-107.0 - 30.0) / 10.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha_nlos >= self.alpha_los && self.alpha_los > 0.0) {
            return Err("require alpha_nlos >= alpha_los > 0".into());
        }
        if !(self.beta_los >= self.beta_nlos && self.beta_nlos > 0.0) {
            return Err("require beta_los >= beta_nlos > 0".into());
        }
        if self.eta <= 0.0 {
            return Err("require eta > 0".into());
        }
        if self.noise_power <= 0.0 {
            return Err("require noise_power > 0".into());
        }
        Ok(())
    }
}

/// One channel evaluation with all analytic gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEval {
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gain: f64,
    pub grad_gain: Vector3<f64>,
    pub grad_alpha: Vector3<f64>,
    pub grad_beta: Vector3<f64>,
    /// `None` when no buildings exist (unblocked everywhere, s = 1).
    pub clearance: Option<f64>,
    /// Active halfspace (a, b) of the minimum-clearance region.
    pub active_plane: Option<(Vector3<f64>, f64)>,
    /// Set when the clearance min/max is attained by more than one pair;
    /// the gradient is then the lowest-index subgradient.
    pub tie: bool,
}

/// Numerically stable sigmoid of eta * clearance / distance, clamped to the
/// smallest positive normal so downstream logs stay finite.
pub fn smoothing(clearance: f64, distance: f64, eta: f64) -> Result<f64, ChannelError> {
    if distance <= 0.0 {
        return Err(ChannelError::ZeroDistance);
    }
    let z = eta * clearance / distance;
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    Ok(s.max(f64::MIN_POSITIVE))
}

/// Linear interpolation of (alpha, beta) between NLoS (s = 0) and LoS (s = 1).
pub fn channel_params_at(s: f64, params: &ChannelParams) -> (f64, f64) {
    let alpha = (params.alpha_los - params.alpha_nlos) * s + params.alpha_nlos;
    let beta = (params.beta_los - params.beta_nlos) * s + params.beta_nlos;
    (alpha, beta)
}

/// Channel gain and all gradients at UAV position `x` for one user.
pub fn gain(
    x: &Vector3<f64>,
    user: &Vector3<f64>,
    regions: &[BlockedRegion],
    params: &ChannelParams,
) -> Result<ChannelEval, ChannelError> {
    let diff = x - user;
    let distance = diff.norm();
    if distance < 1.0 {
        return Err(ChannelError::DistanceTooSmall(distance));
    }

    let min = min_clearance(regions, x);
    let (s, clearance, active_plane, tie) = match &min {
        None => (1.0, None, None, false),
        Some(mc) => {
            let s = smoothing(mc.value, distance, params.eta)?;
            let region = &regions[mc.region_index];
            let hs = region.halfspaces[mc.halfspace_index];
            let tie = clearance_tie(regions, x, mc.region_index, mc.halfspace_index, mc.value);
            (s, Some(mc.value), Some((hs.normal, hs.offset)), tie)
        }
    };

    let (alpha, beta) = channel_params_at(s, params);
    let g = beta * distance.powf(-alpha);

    let (grad_alpha, grad_beta) = match &active_plane {
        None => (Vector3::zeros(), Vector3::zeros()),
        Some((a, b)) => {
            // grad of (min d / distance) via the active plane.
            let ratio_grad = a / distance - (a.dot(x) - b) * diff / distance.powi(3);
            let grad_s = params.eta * s * (1.0 - s) * ratio_grad;
            (
                (params.alpha_los - params.alpha_nlos) * grad_s,
                (params.beta_los - params.beta_nlos) * grad_s,
            )
        }
    };

    let grad_gain = -g * grad_alpha * distance.ln() - g * alpha * diff / distance.powi(2)
        + grad_beta / distance.powf(alpha);

    Ok(ChannelEval {
        s,
        alpha,
        beta,
        gain: g,
        grad_gain,
        grad_alpha,
        grad_beta,
        clearance,
        active_plane,
        tie,
    })
}

/// True if any non-active (region, halfspace) pair attains the same clearance.
fn clearance_tie(
    regions: &[BlockedRegion],
    x: &Vector3<f64>,
    active_region: usize,
    active_hs: usize,
    value: f64,
) -> bool {
    let tol = 1e-12 * value.abs().max(1.0);
    for (q, region) in regions.iter().enumerate() {
        for (i, hs) in region.halfspaces.iter().enumerate() {
            if q == active_region && i == active_hs {
                continue;
            }
            if (hs.signed_distance(x) - value).abs() <= tol {
                return true;
            }
        }
    }
    false
}
