use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_with_output_grad, LossBreakdown, LossWeights, RefineTarget};
use super::network::{backward, forward_with_activations, RefineNetParams};
use super::AnchorSpec;
use crate::error::{Error, Result};
use crate::synthdata::RoiSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Decoupled: applied to the parameters directly, not through the gradient.
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
    pub iteration: u64,
}

impl Optimizer {
    pub fn new(config: SgdConfig, params: &RefineNetParams) -> Self {
        Self {
            config,
            velocity: vec![0.0; params.len()],
            iteration: 0,
        }
    }

    /// Applies one update with a precomputed gradient.
    pub fn apply(&mut self, params: &mut RefineNetParams, grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::InvalidState(format!(
                "gradient/velocity length {}/{} does not match {} parameters",
                grad.len(),
                self.velocity.len(),
                params.len()
            )));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
            grad_clip,
        } = self.config;
        let scale = match grad_clip {
            Some(cap) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cap {
                    cap / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((p, v), g) in params.as_mut_slice().iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v + scale * g;
            *p -= lr * *v + lr * weight_decay * *p;
        }
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub anchor: AnchorSpec,
    pub loss_weights: LossWeights,
    /// Whether per-sample weights also scale the classification term.
    pub weight_classification: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            anchor: AnchorSpec::default(),
            loss_weights: LossWeights::default(),
            weight_classification: true,
        }
    }
}

/// What went wrong in an aborted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub iteration: u64,
    pub sample_index: Option<usize>,
    pub message: String,
    pub breakdown: Option<LossBreakdown>,
}

/// Rescales non-negative weights to mean 1. Equal weights become exactly 1;
/// an all-zero vector stays zero.
pub fn normalize_to_unit_mean(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!("sample weights must be finite and non-negative, got {w}")));
    }
    if weights.is_empty() {
        return Ok(Vec::new());
    }
    if weights.iter().all(|w| *w == weights[0]) {
        let fill = if weights[0] > 0.0 { 1.0 } else { 0.0 };
        return Ok(vec![fill; weights.len()]);
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    Ok(weights.iter().map(|w| w / mean).collect())
}

/// Weighted mean loss over a batch and its gradient with respect to every
/// parameter. Sample `i` contributes `w_i·(λ_reg·l_reg2 + λ_nll·l_nll)` plus
/// its classification term (weighted or not per `options`).
pub fn loss_and_gradient(
    params: &RefineNetParams,
    batch: &[(RoiSample, RefineTarget)],
    weights: &[f64],
    options: &TrainOptions,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if weights.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    if batch.is_empty() {
        return Ok((LossBreakdown::default(), grad));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let lw = options.loss_weights;

    let per_sample: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
        .par_iter()
        .zip(weights.par_iter())
        .map(|((sample, target), &w)| {
            let (pred, acts) = forward_with_activations(params, &sample.points)?;
            let (parts, mut dout) = loss_with_output_grad(&pred, target, &options.anchor, &lw);
            let w_cls = if options.weight_classification { w } else { 1.0 };
            for d in dout.residuals.iter_mut().chain(dout.log_vars.iter_mut()) {
                *d *= w * inv_n;
            }
            dout.logit *= w_cls * inv_n;
            let weighted = LossBreakdown {
                l_reg2: w * parts.l_reg2,
                l_cls2: w_cls * parts.l_cls2,
                l_nll: w * parts.l_nll,
                total: w * (lw.reg * parts.l_reg2 + lw.nll * parts.l_nll) + w_cls * lw.cls * parts.l_cls2,
            };
            let mut g = vec![0.0; params.len()];
            if parts.is_finite() {
                backward(params, &sample.points, &acts, &dout, &mut g);
            }
            Ok((weighted, g))
        })
        .collect();

    // Sequential reduction keeps the sum order fixed regardless of threads.
    let mut total = LossBreakdown::default();
    for item in per_sample {
        let (parts, g) = item?;
        total.l_reg2 += parts.l_reg2 * inv_n;
        total.l_cls2 += parts.l_cls2 * inv_n;
        total.l_nll += parts.l_nll * inv_n;
        total.total += parts.total * inv_n;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// One SGD step on the weighted mean loss. On a non-finite loss or gradient
/// the parameters are left untouched and the diagnostics are returned.
pub fn train_step(
    params: &mut RefineNetParams,
    optimizer: &mut Optimizer,
    batch: &[(RoiSample, RefineTarget)],
    weights: &[f64],
    options: &TrainOptions,
) -> Result<LossBreakdown> {
    let (loss, grad) = loss_and_gradient(params, batch, weights, options)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let sample_index = batch.iter().position(|(s, t)| {
            forward_with_activations(params, &s.points)
                .map(|(p, _)| !loss_with_output_grad(&p, t, &options.anchor, &options.loss_weights).0.is_finite())
                .unwrap_or(true)
        });
        return Err(Error::NonFiniteLoss(Box::new(StepDiagnostics {
            iteration: optimizer.iteration,
            sample_index,
            message: format!("batch loss {:?}", loss),
            breakdown: Some(loss),
        })));
    }
    optimizer.apply(params, &grad)?;
    Ok(loss)
}
