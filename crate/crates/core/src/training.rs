//! Supervised training of the refinement stage on labeled frames, with
//! fresh proposals and RoI augmentation every epoch, keeping the
//! checkpoint that scores best on a validation split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{
    build_rois, detect_frames, encode_targets, train_step, LossBreakdown, Optimizer, RefineNetParams, RefineTarget,
    RoiSettings, SgdConfig, TrainOptions,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, APReport, EvalOptions};
use crate::seeding::{component_rng, derive_seed};
use crate::synthdata::{augment_roi, propose_rois, AugmentationParams, Proposal, ProposalParams, RoiSample, SceneFrame};
use crate::uncertainty::AuEncoding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTrainConfig {
    pub encoding: AuEncoding,
    pub epochs: usize,
    pub batch_size: usize,
    /// Trailing share of the labeled frames held out for checkpoint selection.
    pub val_fraction: f64,
    pub roi: RoiSettings,
    pub proposals: ProposalParams,
    pub augmentation: AugmentationParams,
    pub sgd: SgdConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            encoding: AuEncoding::Corner,
            epochs: 30,
            batch_size: 32,
            val_fraction: 0.1,
            roi: RoiSettings::default(),
            proposals: ProposalParams::default(),
            augmentation: AugmentationParams::default(),
            sgd: SgdConfig::default(),
            train: TrainOptions::default(),
            eval: EvalOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEpochMetrics {
    pub epoch: usize,
    pub l_reg2: f64,
    pub l_cls2: f64,
    pub l_nll: f64,
    pub total: f64,
    pub num_samples: usize,
    pub val_ap_3d_moderate: Option<f64>,
}

pub struct SourceTrainOutcome {
    pub params: RefineNetParams,
    pub optimizer: Optimizer,
    pub best_epoch: usize,
    pub metrics: Vec<SourceEpochMetrics>,
}

/// Proposal lists for evaluation, keyed by frame id so that every model
/// scored on a split sees the same RoIs.
pub fn eval_proposals(frames: &[SceneFrame], params: &ProposalParams, roi: &RoiSettings, seed: u64) -> Vec<Vec<Proposal>> {
    frames
        .iter()
        .map(|f| propose_rois(f, params, &roi.anchor, derive_seed(seed, &format!("eval/proposals/{}", f.frame_id))))
        .collect()
}

/// Runs the detector on a split with its fixed evaluation proposals.
pub fn evaluate_params(
    params: &RefineNetParams,
    frames: &[SceneFrame],
    proposals: &ProposalParams,
    roi: &RoiSettings,
    eval: &EvalOptions,
    dataset: &str,
    seed: u64,
) -> Result<APReport> {
    let props = eval_proposals(frames, proposals, roi, seed);
    let dets = detect_frames(params, frames, &props, roi, seed)?;
    evaluate_detections(frames, &dets, dataset, seed, eval)
}

/// A training pair from an (already augmented) RoI. Crops without points
/// are background whatever they overlap.
pub(crate) fn to_training_pair(roi: RoiSample, settings: &RoiSettings) -> (RoiSample, RefineTarget) {
    let target = match roi.gt_target {
        Some(gt) if roi.objectness && !roi.points.is_empty() => RefineTarget::object(encode_targets(&gt, &settings.anchor)),
        _ => RefineTarget::background(),
    };
    (roi, target)
}

/// Fresh proposals, crops and augmentations of `frames` for one epoch.
pub(crate) fn labeled_samples(
    frames: &[SceneFrame],
    config_roi: &RoiSettings,
    proposals: &ProposalParams,
    augmentation: &AugmentationParams,
    seed: u64,
    tag: &str,
) -> Vec<(RoiSample, RefineTarget)> {
    let mut out = Vec::new();
    for frame in frames {
        let props = propose_rois(
            frame,
            proposals,
            &config_roi.anchor,
            derive_seed(seed, &format!("{tag}/proposals/{}", frame.frame_id)),
        );
        for (i, roi) in build_rois(frame, &props, config_roi, derive_seed(seed, tag)).into_iter().enumerate() {
            let aug_seed = derive_seed(seed, &format!("{tag}/augment/{}/{i}", frame.frame_id));
            let (aug, _) = augment_roi(&roi, augmentation, aug_seed);
            out.push(to_training_pair(aug, config_roi));
        }
    }
    out
}

fn validate(config: &SourceTrainConfig) -> Result<()> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", config.val_fraction)));
    }
    config.roi.validate()?;
    config.augmentation.validate()
}

pub(crate) fn accumulate(sum: &mut LossBreakdown, part: &LossBreakdown) {
    sum.l_reg2 += part.l_reg2;
    sum.l_cls2 += part.l_cls2;
    sum.l_nll += part.l_nll;
    sum.total += part.total;
}

pub(crate) fn averaged(sum: LossBreakdown, count: usize) -> LossBreakdown {
    let n = count.max(1) as f64;
    LossBreakdown {
        l_reg2: sum.l_reg2 / n,
        l_cls2: sum.l_cls2 / n,
        l_nll: sum.l_nll / n,
        total: sum.total / n,
    }
}

/// Trains from a seeded initialization. `on_epoch` sees each epoch's metrics
/// as soon as they are available.
pub fn train_source(
    frames: &[SceneFrame],
    config: &SourceTrainConfig,
    mut on_epoch: impl FnMut(&SourceEpochMetrics) -> Result<()>,
) -> Result<SourceTrainOutcome> {
    validate(config)?;
    let n_val = ((frames.len() as f64) * config.val_fraction).round() as usize;
    let (train, val) = frames.split_at(frames.len() - n_val);
    if train.is_empty() {
        return Err(Error::InvalidInput("no labeled frames left for training".into()));
    }
    let seed = config.seed;
    let mut params = RefineNetParams::init(config.encoding, derive_seed(seed, "source/init"));
    let mut optimizer = Optimizer::new(config.sgd, &params);
    let mut best: Option<(f64, usize, RefineNetParams, Optimizer)> = None;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let tag = format!("source/epoch{epoch}");
        let mut samples = labeled_samples(train, &config.roi, &config.proposals, &config.augmentation, seed, &tag);
        samples.shuffle(&mut component_rng(seed, &format!("{tag}/shuffle")));

        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for batch in samples.chunks(config.batch_size) {
            let loss = train_step(&mut params, &mut optimizer, batch, &vec![1.0; batch.len()], &config.train)?;
            accumulate(&mut sum, &loss);
            steps += 1;
        }
        let mean = averaged(sum, steps);

        let val_ap = if val.is_empty() {
            None
        } else {
            let report = evaluate_params(&params, val, &config.proposals, &config.roi, &config.eval, "source-val", seed)?;
            report.moderate_3d()
        };
        let record = SourceEpochMetrics {
            epoch,
            l_reg2: mean.l_reg2,
            l_cls2: mean.l_cls2,
            l_nll: mean.l_nll,
            total: mean.total,
            num_samples: samples.len(),
            val_ap_3d_moderate: val_ap,
        };
        log::info!(
            "source epoch {epoch}: loss {:.4} (reg {:.4} cls {:.4} nll {:.4}) val AP3D mod {:?}",
            mean.total,
            mean.l_reg2,
            mean.l_cls2,
            mean.l_nll,
            val_ap
        );
        on_epoch(&record)?;
        metrics.push(record);

        // Without a validation split the last epoch wins.
        let score = val_ap.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, ..)| score > *b || val.is_empty()) {
            best = Some((score, epoch, params.clone(), optimizer.clone()));
        }
    }

    match best {
        Some((_, best_epoch, params, optimizer)) => Ok(SourceTrainOutcome {
            params,
            optimizer,
            best_epoch,
            metrics,
        }),
        None => Ok(SourceTrainOutcome {
            params,
            optimizer,
            best_epoch: 0,
            metrics,
        }),
    }
}
