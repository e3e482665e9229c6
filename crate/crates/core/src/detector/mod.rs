//! Second-stage box refinement: anchor-relative target encoding, a small
//! point-set network with a per-corner log-variance head, hand-written
//! gradients, and an SGD-with-momentum trainer.

mod checkpoint;
mod infer;
mod loss;
mod network;
mod train;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_FORMAT};
pub use infer::{build_rois, detect_frames, detect_rois, sort_by_confidence, suppress_overlaps, RoiSettings};
pub use loss::{compute_loss, LossBreakdown, LossWeights, RefineTarget};
pub use network::{activation_pattern, forward, ActivationPattern, ParamId, Prediction, RefineNetParams, ENC1, ENC2, NUM_RESIDUALS, TRUNK};
pub use train::{
    loss_and_gradient, normalize_to_unit_mean, train_step, Optimizer, SgdConfig, StepDiagnostics,
    TrainOptions,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_parallel, OrientedBox3D};
use crate::synthdata::{RoiPose, RoiSample};
use crate::uncertainty::{box_au, AuEncoding, BoxUncertaintyBF, CornerUncertainty, NUM_BOX_VALUES, NUM_CORNERS};

/// Smallest extent a decoded box may have (m).
const MIN_DECODED_EXTENT: f64 = 1e-6;

/// The globally fixed anchor that replaces proposal sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub l: f64,
    pub w: f64,
    pub h: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            l: 3.9,
            w: 1.56,
            h: 1.6,
        }
    }
}

impl AnchorSpec {
    pub fn new(l: f64, w: f64, h: f64) -> Result<Self> {
        if !(l > 0.0 && w > 0.0 && h > 0.0) || ![l, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("anchor dims must be positive, got {l} {w} {h}")));
        }
        Ok(Self { l, w, h })
    }

    /// BEV diagonal, the normalizer for center residuals.
    pub fn diagonal(&self) -> f64 {
        self.l.hypot(self.w)
    }
}

/// Residuals of a local-frame box against the anchor:
/// `(x, y, z) / d_an`, `log(dim / anchor_dim)` and the yaw wrapped to (−π/2, π/2].
pub fn encode_targets(gt_local: &OrientedBox3D, anchor: &AnchorSpec) -> [f64; NUM_RESIDUALS] {
    let d = anchor.diagonal();
    [
        gt_local.cx / d,
        gt_local.cy / d,
        gt_local.cz / d,
        (gt_local.l / anchor.l).ln(),
        (gt_local.w / anchor.w).ln(),
        (gt_local.h / anchor.h).ln(),
        wrap_parallel(gt_local.yaw),
    ]
}

/// Inverse of [`encode_targets`] in the RoI frame.
pub fn decode_local(residuals: &[f64; NUM_RESIDUALS], anchor: &AnchorSpec) -> OrientedBox3D {
    let d = anchor.diagonal();
    let r = residuals;
    OrientedBox3D {
        cx: r[0] * d,
        cy: r[1] * d,
        cz: r[2] * d,
        l: (anchor.l * r[3].exp()).max(MIN_DECODED_EXTENT),
        w: (anchor.w * r[4].exp()).max(MIN_DECODED_EXTENT),
        h: (anchor.h * r[5].exp()).max(MIN_DECODED_EXTENT),
        yaw: crate::geometry::normalize_angle(r[6]),
    }
}

/// Decodes residuals and moves the box from the RoI frame into the ego frame.
pub fn decode_prediction(residuals: &[f64; NUM_RESIDUALS], anchor: &AnchorSpec, roi_pose: &RoiPose) -> OrientedBox3D {
    roi_pose.box_to_ego(&decode_local(residuals, anchor))
}

/// Predicted spread: one variance per corner, or per box value for the BF ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", content = "sigma_sq", rename_all = "snake_case")]
pub enum Uncertainty {
    Corner(CornerUncertainty),
    Box(BoxUncertaintyBF),
}

impl Uncertainty {
    pub fn from_log_vars(encoding: AuEncoding, log_vars: &[f64]) -> Self {
        match encoding {
            AuEncoding::Corner => {
                let mut lv = [0.0; NUM_CORNERS];
                lv.copy_from_slice(&log_vars[..NUM_CORNERS]);
                Uncertainty::Corner(CornerUncertainty::from_log_vars(&lv))
            }
            AuEncoding::Box => {
                let mut lv = [0.0; NUM_BOX_VALUES];
                lv.copy_from_slice(&log_vars[..NUM_BOX_VALUES]);
                Uncertainty::Box(BoxUncertaintyBF::from_log_vars(&lv))
            }
        }
    }

    pub fn au(&self) -> f64 {
        match self {
            Uncertainty::Corner(c) => box_au(c),
            Uncertainty::Box(b) => b.au(),
        }
    }
}

/// A decoded prediction in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxWithUncertainty {
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub sigma: Uncertainty,
    pub confidence: f64,
    pub au: f64,
}

impl BoxWithUncertainty {
    pub fn new(bbox: OrientedBox3D, sigma: Uncertainty, confidence: f64) -> Self {
        Self {
            bbox,
            sigma,
            confidence,
            au: sigma.au(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the network on one RoI and decodes the result into the ego frame.
pub fn predict(params: &RefineNetParams, sample: &RoiSample, anchor: &AnchorSpec) -> Result<BoxWithUncertainty> {
    let pred = forward(params, sample)?;
    let bbox = decode_prediction(&pred.residuals, anchor, &sample.roi_pose);
    let sigma = Uncertainty::from_log_vars(params.encoding(), &pred.log_vars);
    Ok(BoxWithUncertainty::new(bbox, sigma, sigmoid(pred.objectness_logit)))
}
