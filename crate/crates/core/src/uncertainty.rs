//! Gaussian negative log-likelihood losses and aleatoric-uncertainty
//! reductions for the corner format (8 corners, one shared variance per
//! corner) and the 7-value box format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_to_corners, wrap_parallel, OrientedBox3D};

/// Lower clamp applied to exponentiated log-variances (m²).
pub const VARIANCE_MIN: f64 = 1e-6;
/// Upper clamp applied to exponentiated log-variances (m²).
pub const VARIANCE_MAX: f64 = 1e4;

pub const NUM_CORNERS: usize = 8;
pub const NUM_BOX_VALUES: usize = 7;

/// Which quantities the variance head describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuEncoding {
    /// One shared variance per box corner.
    Corner,
    /// One variance per box value `(cx, cy, cz, l, w, h, yaw)`.
    Box,
}

impl AuEncoding {
    pub fn num_variances(&self) -> usize {
        match self {
            AuEncoding::Corner => NUM_CORNERS,
            AuEncoding::Box => NUM_BOX_VALUES,
        }
    }
}

/// Maps a log-variance to a variance inside `[VARIANCE_MIN, VARIANCE_MAX]`.
#[inline]
pub fn variance_from_log(log_var: f64) -> f64 {
    log_var.exp().clamp(VARIANCE_MIN, VARIANCE_MAX)
}

/// Derivative of [`variance_from_log`]; zero where the clamp is active.
#[inline]
pub(crate) fn variance_from_log_grad(log_var: f64) -> f64 {
    let v = log_var.exp();
    if (VARIANCE_MIN..=VARIANCE_MAX).contains(&v) {
        v
    } else {
        0.0
    }
}

fn check_variances(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        Some(v) => Err(Error::InvalidVariance(*v)),
        None => Ok(()),
    }
}

/// One variance per corner, shared by that corner's three coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerUncertainty {
    sigma_sq: [f64; NUM_CORNERS],
}

impl CornerUncertainty {
    pub fn new(sigma_sq: [f64; NUM_CORNERS]) -> Result<Self> {
        check_variances(&sigma_sq)?;
        Ok(Self { sigma_sq })
    }

    pub fn from_log_vars(log_vars: &[f64; NUM_CORNERS]) -> Self {
        Self {
            sigma_sq: log_vars.map(variance_from_log),
        }
    }

    pub fn uniform(sigma_sq: f64) -> Result<Self> {
        Self::new([sigma_sq; NUM_CORNERS])
    }

    pub fn sigma_sq(&self) -> &[f64; NUM_CORNERS] {
        &self.sigma_sq
    }
}

/// Variances for the 7 box-format values `(cx, cy, cz, l, w, h, yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxUncertaintyBF {
    sigma_sq: [f64; NUM_BOX_VALUES],
}

impl BoxUncertaintyBF {
    pub fn new(sigma_sq: [f64; NUM_BOX_VALUES]) -> Result<Self> {
        check_variances(&sigma_sq)?;
        Ok(Self { sigma_sq })
    }

    pub fn from_log_vars(log_vars: &[f64; NUM_BOX_VALUES]) -> Self {
        Self {
            sigma_sq: log_vars.map(variance_from_log),
        }
    }

    pub fn sigma_sq(&self) -> &[f64; NUM_BOX_VALUES] {
        &self.sigma_sq
    }

    /// Box-format AU: the plain mean of the 7 heterogeneous variances.
    pub fn au(&self) -> f64 {
        self.sigma_sq.iter().sum::<f64>() / NUM_BOX_VALUES as f64
    }
}

pub fn nll_gaussian(y: f64, mu: f64, sigma_sq: f64) -> Result<f64> {
    check_variances(&[sigma_sq])?;
    let r = y - mu;
    Ok(r * r / (2.0 * sigma_sq) + 0.5 * sigma_sq.ln())
}

/// Corner-format NLL. Each corner contributes
/// `‖p̂ − p‖² / (2σ²) + (3/2)·log σ²`; the total is the mean over corners.
pub fn corner_nll_loss(
    pred: &OrientedBox3D,
    pred_sigma: &CornerUncertainty,
    gt: &OrientedBox3D,
) -> (f64, [f64; NUM_CORNERS]) {
    let pc = box_to_corners(pred);
    let gc = box_to_corners(gt);
    let mut per_corner = [0.0; NUM_CORNERS];
    for (i, loss) in per_corner.iter_mut().enumerate() {
        let s = pred_sigma.sigma_sq[i];
        let d2: f64 = (0..3).map(|k| (pc.corners[i][k] - gc.corners[i][k]).powi(2)).sum();
        *loss = d2 / (2.0 * s) + 1.5 * s.ln();
    }
    let total = per_corner.iter().sum::<f64>() / NUM_CORNERS as f64;
    (total, per_corner)
}

/// Box AU: mean of the 8 corner variances (m²).
pub fn box_au(sigma: &CornerUncertainty) -> f64 {
    sigma.sigma_sq.iter().sum::<f64>() / NUM_CORNERS as f64
}

/// Box values in the order used by the box-format ablation.
pub fn box_values(b: &OrientedBox3D) -> [f64; NUM_BOX_VALUES] {
    [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw]
}

/// Box-format NLL: the scalar Gaussian NLL on each of the 7 values, yaw
/// residual taken modulo a half turn.
pub fn bf_nll_loss(
    pred: &OrientedBox3D,
    pred_sigma: &BoxUncertaintyBF,
    gt: &OrientedBox3D,
) -> (f64, [f64; NUM_BOX_VALUES]) {
    let p = box_values(pred);
    let g = box_values(gt);
    let mut per_value = [0.0; NUM_BOX_VALUES];
    for (k, loss) in per_value.iter_mut().enumerate() {
        let r = if k == 6 { wrap_parallel(p[k] - g[k]) } else { p[k] - g[k] };
        let s = pred_sigma.sigma_sq[k];
        *loss = r * r / (2.0 * s) + 0.5 * s.ln();
    }
    let total = per_value.iter().sum::<f64>() / NUM_BOX_VALUES as f64;
    (total, per_value)
}
