use serde::{Deserialize, Serialize};

use super::network::{OutputGrad, Prediction, NUM_RESIDUALS};
use super::{decode_local, sigmoid, AnchorSpec};
use crate::geometry::{box_to_corners, corner_signs, sin_cos, wrap_parallel, OrientedBox3D};
use crate::uncertainty::{
    bf_nll_loss, box_values, corner_nll_loss, variance_from_log_grad, BoxUncertaintyBF, CornerUncertainty,
    NUM_BOX_VALUES, NUM_CORNERS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub nll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            cls: 1.0,
            nll: 1.0,
        }
    }
}

/// Supervision for one RoI. `residuals` is ignored for background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineTarget {
    pub residuals: [f64; NUM_RESIDUALS],
    pub objectness: bool,
}

impl RefineTarget {
    pub fn background() -> Self {
        Self {
            residuals: [0.0; NUM_RESIDUALS],
            objectness: false,
        }
    }

    pub fn object(residuals: [f64; NUM_RESIDUALS]) -> Self {
        Self {
            residuals,
            objectness: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg2: f64,
    pub l_cls2: f64,
    pub l_nll: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_reg2.is_finite() && self.l_cls2.is_finite() && self.l_nll.is_finite() && self.total.is_finite()
    }
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Binary cross-entropy on a logit, written to avoid overflow.
fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - target)
}

/// Variance as used by the loss, plus its derivative in the log-variance.
fn variance(lv: f64) -> (f64, f64) {
    (crate::uncertainty::variance_from_log(lv), variance_from_log_grad(lv))
}

/// Derivative of each decoded local box value `(cx, cy, cz, l, w, h, yaw)`
/// with respect to its own residual.
fn decode_scale(residuals: &[f64; NUM_RESIDUALS], anchor: &AnchorSpec, decoded: &OrientedBox3D) -> [f64; NUM_RESIDUALS] {
    let d = anchor.diagonal();
    let floor_aware = |dim: f64, anchor_dim: f64, r: f64| if dim > anchor_dim * r.exp() { 0.0 } else { dim };
    [
        d,
        d,
        d,
        floor_aware(decoded.l, anchor.l, residuals[3]),
        floor_aware(decoded.w, anchor.w, residuals[4]),
        floor_aware(decoded.h, anchor.h, residuals[5]),
        1.0,
    ]
}

fn corner_nll_with_grad(
    pred: &Prediction,
    anchor: &AnchorSpec,
    gt: &OrientedBox3D,
) -> (f64, [f64; NUM_RESIDUALS], Vec<f64>) {
    let decoded = decode_local(&pred.residuals, anchor);
    let mut sig = [0.0; NUM_CORNERS];
    let mut dsig = [0.0; NUM_CORNERS];
    for i in 0..NUM_CORNERS {
        (sig[i], dsig[i]) = variance(pred.log_vars[i]);
    }
    let uncertainty = CornerUncertainty::from_log_vars(&std::array::from_fn(|i| pred.log_vars[i]));
    let (loss, _) = corner_nll_loss(&decoded, &uncertainty, gt);

    let pc = box_to_corners(&decoded);
    let gc = box_to_corners(gt);
    let (s, c) = sin_cos(decoded.yaw);
    let inv_n = 1.0 / NUM_CORNERS as f64;
    // Gradient with respect to decoded (cx, cy, cz, l, w, h, yaw).
    let mut dbox = [0.0; NUM_BOX_VALUES];
    let mut dlog = vec![0.0; NUM_CORNERS];
    for i in 0..NUM_CORNERS {
        let diff: [f64; 3] = std::array::from_fn(|k| pc.corners[i][k] - gc.corners[i][k]);
        let d2 = diff.iter().map(|v| v * v).sum::<f64>();
        let g: [f64; 3] = diff.map(|v| v / sig[i] * inv_n);
        dlog[i] = (-d2 / (2.0 * sig[i] * sig[i]) + 1.5 / sig[i]) * dsig[i] * inv_n;

        let sg = corner_signs(i);
        let (a, b) = (0.5 * sg[0] * decoded.l, 0.5 * sg[1] * decoded.w);
        // corner = center + (c·a − s·b, s·a + c·b, ±h/2)
        dbox[0] += g[0];
        dbox[1] += g[1];
        dbox[2] += g[2];
        dbox[3] += 0.5 * sg[0] * (g[0] * c + g[1] * s);
        dbox[4] += 0.5 * sg[1] * (-g[0] * s + g[1] * c);
        dbox[5] += 0.5 * sg[2] * g[2];
        dbox[6] += g[0] * (-s * a - c * b) + g[1] * (c * a - s * b);
    }
    let scale = decode_scale(&pred.residuals, anchor, &decoded);
    (loss, std::array::from_fn(|k| dbox[k] * scale[k]), dlog)
}

fn bf_nll_with_grad(pred: &Prediction, anchor: &AnchorSpec, gt: &OrientedBox3D) -> (f64, [f64; NUM_RESIDUALS], Vec<f64>) {
    let decoded = decode_local(&pred.residuals, anchor);
    let uncertainty = BoxUncertaintyBF::from_log_vars(&std::array::from_fn(|i| pred.log_vars[i]));
    let (loss, _) = bf_nll_loss(&decoded, &uncertainty, gt);

    let p = box_values(&decoded);
    let g = box_values(gt);
    let scale = decode_scale(&pred.residuals, anchor, &decoded);
    let inv_n = 1.0 / NUM_BOX_VALUES as f64;
    let mut dres = [0.0; NUM_RESIDUALS];
    let mut dlog = vec![0.0; NUM_BOX_VALUES];
    for k in 0..NUM_BOX_VALUES {
        let r = if k == 6 { wrap_parallel(p[k] - g[k]) } else { p[k] - g[k] };
        let (s, ds) = variance(pred.log_vars[k]);
        dres[k] = r / s * inv_n * scale[k];
        dlog[k] = (-r * r / (2.0 * s * s) + 0.5 / s) * ds * inv_n;
    }
    (loss, dres, dlog)
}

/// Loss terms for one RoI and the gradient of `total` with respect to the
/// network outputs. Regression and NLL terms are skipped for background.
pub(crate) fn loss_with_output_grad(
    pred: &Prediction,
    target: &RefineTarget,
    anchor: &AnchorSpec,
    weights: &LossWeights,
) -> (LossBreakdown, OutputGrad) {
    let nvar = pred.log_vars.len();
    let mut grad = OutputGrad {
        residuals: [0.0; NUM_RESIDUALS],
        log_vars: vec![0.0; nvar],
        logit: 0.0,
    };
    let (l_cls2, dlogit) = bce_with_logit(pred.objectness_logit, if target.objectness { 1.0 } else { 0.0 });
    grad.logit = weights.cls * dlogit;

    let (mut l_reg2, mut l_nll) = (0.0, 0.0);
    if target.objectness {
        for k in 0..NUM_RESIDUALS {
            let (l, d) = smooth_l1(pred.residuals[k] - target.residuals[k]);
            l_reg2 += l;
            grad.residuals[k] += weights.reg * d;
        }
        let gt = decode_local(&target.residuals, anchor);
        let (l, dres, dlog) = if nvar == NUM_CORNERS {
            corner_nll_with_grad(pred, anchor, &gt)
        } else {
            bf_nll_with_grad(pred, anchor, &gt)
        };
        l_nll = l;
        for k in 0..NUM_RESIDUALS {
            grad.residuals[k] += weights.nll * dres[k];
        }
        for (g, d) in grad.log_vars.iter_mut().zip(dlog) {
            *g = weights.nll * d;
        }
    }
    let total = weights.reg * l_reg2 + weights.cls * l_cls2 + weights.nll * l_nll;
    (
        LossBreakdown {
            l_reg2,
            l_cls2,
            l_nll,
            total,
        },
        grad,
    )
}

/// Second-stage loss of one RoI. The NLL compares the decoded local box with
/// the local ground truth recovered from the target residuals.
pub fn compute_loss(pred: &Prediction, target: &RefineTarget, anchor: &AnchorSpec, weights: &LossWeights) -> LossBreakdown {
    loss_with_output_grad(pred, target, anchor, weights).0
}
