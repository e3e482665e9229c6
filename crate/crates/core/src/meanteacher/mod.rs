//! Noise-aware mean-teacher adaptation: an EMA teacher labels unlabeled
//! target frames, the student trains on those labels (down-weighting
//! uncertain ones) alternately with labeled source batches, and a
//! curriculum admits target frames from least to most uncertain.

mod sampling;

pub use sampling::{select_frames, Curriculum, CurriculumStep, FrameSamplingState};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::{
    build_rois, detect_rois, train_step, BoxWithUncertainty, LossBreakdown, LossWeights, Optimizer, RefineNetParams,
    RoiSettings, SgdConfig, TrainOptions,
};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::geometry::iou_bev;
use crate::seeding::{component_rng, derive_seed};
use crate::synthdata::{
    augment_roi, propose_rois, AugmentationParams, Proposal, ProposalParams, RoiSample, SceneFrame, MATCH_IOU_THRESHOLD,
};
use crate::training::{accumulate, averaged, evaluate_params, labeled_samples, to_training_pair};

pub const DEFAULT_BETA: f64 = 0.999;
/// Frame AU given to frames without a single valid detection.
pub const FRAME_AU_SENTINEL: f64 = 1e4;
pub const DEFAULT_U_MIN: f64 = 1e-3;

/// Teacher and student parameters plus the EMA factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTeacherState {
    pub teacher: RefineNetParams,
    pub student: RefineNetParams,
    beta: f64,
    pub iteration: u64,
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("EMA factor must lie in [0, 1], got {beta}")))
    }
}

impl MeanTeacherState {
    /// Both networks start from the same (source-trained) parameters.
    pub fn new(init: RefineNetParams, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self {
            teacher: init.clone(),
            student: init,
            beta,
            iteration: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.beta)?;
        self.iteration += 1;
        Ok(())
    }
}

/// `teacher ← β·teacher + (1 − β)·student`, element-wise.
pub fn ema_update(teacher: &mut RefineNetParams, student: &RefineNetParams, beta: f64) -> Result<()> {
    check_beta(beta)?;
    if !teacher.same_shape(student) {
        return Err(Error::InvalidState("teacher and student parameter shapes differ".into()));
    }
    for (t, s) in teacher.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t = beta * *t + (1.0 - beta) * s;
    }
    Ok(())
}

/// Pseudo-labels per frame id.
pub type PseudoLabelSet = BTreeMap<String, Vec<BoxWithUncertainty>>;

/// Teacher detections on the frame's raw (non-augmented) RoIs, kept when
/// their confidence reaches `confidence_threshold`. Ego frame, descending confidence.
pub fn generate_pseudo_labels(
    teacher: &RefineNetParams,
    frame: &SceneFrame,
    proposals: &[Proposal],
    settings: &RoiSettings,
    confidence_threshold: f64,
    seed: u64,
) -> Result<Vec<BoxWithUncertainty>> {
    let rois = build_rois(frame, proposals, settings, seed);
    Ok(filter_confident(detect_rois(teacher, &rois, settings)?, confidence_threshold))
}

fn filter_confident(dets: Vec<BoxWithUncertainty>, threshold: f64) -> Vec<BoxWithUncertainty> {
    dets.into_iter().filter(|d| d.confidence >= threshold).collect()
}

/// Inverse-uncertainty weights `1 / max(u, u_min)`, rescaled to mean 1.
pub fn object_soft_weights(aus: &[f64], u_min: f64) -> Result<Vec<f64>> {
    if !(u_min > 0.0) {
        return Err(Error::InvalidArgument(format!("u_min must be positive, got {u_min}")));
    }
    if let Some(u) = aus.iter().find(|u| !(**u >= 0.0)) {
        return Err(Error::InvalidArgument(format!("uncertainties must be non-negative, got {u}")));
    }
    let raw: Vec<f64> = aus.iter().map(|u| 1.0 / u.max(u_min)).collect();
    crate::detector::normalize_to_unit_mean(&raw)
}

/// Weighted mean of per-object totals. The weights scale the regression and
/// NLL parts, and the classification part when `weight_classification`.
pub fn weighted_target_loss(
    losses: &[LossBreakdown],
    weights: &[f64],
    loss_weights: &LossWeights,
    weight_classification: bool,
) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::InvalidArgument(format!("{} weights for {} losses", weights.len(), losses.len())));
    }
    if losses.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = losses
        .iter()
        .zip(weights)
        .map(|(l, &w)| {
            let cls = loss_weights.cls * l.l_cls2;
            w * (loss_weights.reg * l.l_reg2 + loss_weights.nll * l.l_nll) + if weight_classification { w * cls } else { cls }
        })
        .sum();
    Ok(sum / losses.len() as f64)
}

/// Mean AU of the detections at or above `validity_threshold`, or
/// [`FRAME_AU_SENTINEL`] when there are none.
pub fn mean_valid_au(dets: &[BoxWithUncertainty], validity_threshold: f64) -> f64 {
    let valid: Vec<f64> = dets.iter().filter(|d| d.confidence >= validity_threshold).map(|d| d.au).collect();
    if valid.is_empty() {
        FRAME_AU_SENTINEL
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    }
}

pub fn frame_uncertainty(
    teacher: &RefineNetParams,
    frame: &SceneFrame,
    proposals: &[Proposal],
    settings: &RoiSettings,
    validity_threshold: f64,
    seed: u64,
) -> Result<f64> {
    let rois = build_rois(frame, proposals, settings, seed);
    Ok(mean_valid_au(&detect_rois(teacher, &rois, settings)?, validity_threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub confidence_threshold: f64,
    pub validity_threshold: f64,
    pub u_min: f64,
    /// Frame-level curriculum sampling.
    pub frame_level: bool,
    /// Object-level inverse-uncertainty weighting.
    pub object_level: bool,
    pub curriculum: Curriculum,
    pub roi: RoiSettings,
    pub proposals: ProposalParams,
    pub augmentation: AugmentationParams,
    pub sgd: SgdConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
    /// Held-out evaluation every this many epochs (0: only the last epoch).
    pub eval_every: usize,
    pub seed: u64,
    /// Stop after this many student steps (equivalence checks).
    pub max_steps: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            beta: DEFAULT_BETA,
            confidence_threshold: 0.6,
            validity_threshold: 0.6,
            u_min: DEFAULT_U_MIN,
            frame_level: true,
            object_level: true,
            curriculum: Curriculum::default(),
            roi: RoiSettings::default(),
            proposals: ProposalParams::default(),
            augmentation: AugmentationParams::default(),
            sgd: SgdConfig::default(),
            train: TrainOptions::default(),
            eval: EvalOptions::default(),
            eval_every: 0,
            seed: 0,
            max_steps: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("validity_threshold", self.validity_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.u_min > 0.0) {
            return Err(Error::Config(format!("u_min must be positive, got {}", self.u_min)));
        }
        self.curriculum.validate()?;
        self.roi.validate()?;
        self.augmentation.validate()
    }
}

/// One line of the adaptation metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_reg2: f64,
    pub l_cls2: f64,
    pub l_nll: f64,
    pub n_pseudo_labels: usize,
    pub n_frames_selected: usize,
    pub mean_frame_au: f64,
    /// Teacher AP at the moderate level on the held-out split, when evaluated.
    pub ap_bev_07: Option<f64>,
    pub ap_3d_07: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

pub struct AdaptOutcome {
    pub state: MeanTeacherState,
    pub optimizer: Optimizer,
    pub metrics: Vec<EpochMetrics>,
}

/// Assigns each raw target RoI the best-overlapping pseudo-label (BEV IoU of
/// the anchor at the proposal pose, at least the proposal matching
/// threshold). Returns the label's AU for object RoIs.
fn attach_pseudo_target(roi: &mut RoiSample, labels: &[BoxWithUncertainty], settings: &RoiSettings) -> Option<f64> {
    let anchor_box = roi.roi_pose.anchor_box(&settings.anchor);
    let mut best: Option<(usize, f64)> = None;
    for (i, label) in labels.iter().enumerate() {
        let iou = iou_bev(&anchor_box, &label.bbox);
        if iou >= MATCH_IOU_THRESHOLD && best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    roi.gt_index = None;
    match best {
        Some((i, _)) => {
            roi.gt_target = Some(roi.roi_pose.box_to_local(&labels[i].bbox));
            roi.objectness = true;
            Some(labels[i].au)
        }
        None => {
            roi.gt_target = None;
            roi.objectness = false;
            None
        }
    }
}

/// Per-sample weights for a target batch: object samples get soft weights
/// normalized over the batch's objects, background samples weight 1.
fn target_batch_weights(aus: &[Option<f64>], object_level: bool, u_min: f64) -> Result<Vec<f64>> {
    let mut weights = vec![1.0; aus.len()];
    if !object_level {
        return Ok(weights);
    }
    let object_aus: Vec<f64> = aus.iter().flatten().copied().collect();
    let soft = object_soft_weights(&object_aus, u_min)?;
    let mut it = soft.into_iter();
    for (w, au) in weights.iter_mut().zip(aus) {
        if au.is_some() {
            *w = it.next().expect("one weight per object");
        }
    }
    Ok(weights)
}

struct TargetEpochData {
    samples: Vec<(RoiSample, crate::detector::RefineTarget)>,
    aus: Vec<Option<f64>>,
    n_labels: usize,
    frame_aus: Vec<f64>,
}

/// Student samples for the selected frames, taken in frame-id order so the
/// result does not depend on how the selection was ranked.
fn target_epoch_data(
    teacher: &RefineNetParams,
    frames: &[&SceneFrame],
    proposals: &BTreeMap<String, Vec<Proposal>>,
    config: &AdaptConfig,
    tag: &str,
) -> Result<TargetEpochData> {
    let seed = config.seed;
    let mut data = TargetEpochData {
        samples: Vec::new(),
        aus: Vec::new(),
        n_labels: 0,
        frame_aus: Vec::new(),
    };
    for frame in frames {
        let props = &proposals[&frame.frame_id];
        let rois = build_rois(frame, props, &config.roi, derive_seed(seed, tag));
        let dets = detect_rois(teacher, &rois, &config.roi)?;
        data.frame_aus.push(mean_valid_au(&dets, config.validity_threshold));
        let labels = filter_confident(dets, config.confidence_threshold);
        data.n_labels += labels.len();
        for (i, mut roi) in rois.into_iter().enumerate() {
            let au = attach_pseudo_target(&mut roi, &labels, &config.roi);
            let aug_seed = derive_seed(seed, &format!("{tag}/augment/{}/{i}", frame.frame_id));
            let (aug, _) = augment_roi(&roi, &config.augmentation, aug_seed);
            let pair = to_training_pair(aug, &config.roi);
            data.aus.push(if pair.1.objectness { au } else { None });
            data.samples.push(pair);
        }
    }
    Ok(data)
}

/// The full adaptation loop. Teacher and student start from `init`; the
/// returned teacher is the adapted model. `heldout` (labeled target frames)
/// is only used for the metrics log.
pub fn run_adaptation(
    source: &[SceneFrame],
    target: &[SceneFrame],
    heldout: &[SceneFrame],
    init: &RefineNetParams,
    config: &AdaptConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidInput("adaptation needs labeled source frames".into()));
    }
    let seed = config.seed;
    let mut state = MeanTeacherState::new(init.clone(), config.beta)?;
    let mut optimizer = Optimizer::new(config.sgd, init);
    let mut sampling = FrameSamplingState::new(target.iter().map(|f| f.frame_id.clone()), config.curriculum.clone())?;
    let by_id: BTreeMap<&str, &SceneFrame> = target.iter().map(|f| (f.frame_id.as_str(), f)).collect();
    if by_id.len() != target.len() {
        return Err(Error::InvalidInput("target frame ids are not unique".into()));
    }
    let mut selected: Vec<String> = by_id.keys().map(|k| k.to_string()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);

    let exhausted = |state: &MeanTeacherState| config.max_steps.is_some_and(|m| state.iteration >= m as u64);
    for epoch in 1..=config.epochs {
        if exhausted(&state) {
            break;
        }
        let tag = format!("adapt/epoch{epoch}");
        let proposals: BTreeMap<String, Vec<Proposal>> = target
            .iter()
            .map(|f| {
                let s = derive_seed(seed, &format!("{tag}/target/proposals/{}", f.frame_id));
                (f.frame_id.clone(), propose_rois(f, &config.proposals, &config.roi.anchor, s))
            })
            .collect();

        if config.frame_level {
            if let Some(fraction) = config.curriculum.refresh_fraction(epoch) {
                let all: Vec<&SceneFrame> = by_id.values().copied().collect();
                for frame in &all {
                    let u = frame_uncertainty(
                        &state.teacher,
                        frame,
                        &proposals[&frame.frame_id],
                        &config.roi,
                        config.validity_threshold,
                        derive_seed(seed, &format!("{tag}/target")),
                    )?;
                    sampling.u_frame.insert(frame.frame_id.clone(), u);
                }
                sampling.set_fraction(fraction);
                selected = select_frames(&sampling)?;
                log::debug!("epoch {epoch}: selected {} of {} target frames", selected.len(), sampling.n_t);
            }
        }
        let mut ordered = selected.clone();
        ordered.sort();
        let frames: Vec<&SceneFrame> = ordered.iter().map(|id| by_id[id.as_str()]).collect();

        let tdata = target_epoch_data(&state.teacher, &frames, &proposals, config, &format!("{tag}/target"))?;
        let mut order: Vec<usize> = (0..tdata.samples.len()).collect();
        order.shuffle(&mut component_rng(seed, &format!("{tag}/target/shuffle")));

        let mut source_samples = labeled_samples(
            source,
            &config.roi,
            &config.proposals,
            &config.augmentation,
            seed,
            &format!("{tag}/source"),
        );
        source_samples.shuffle(&mut component_rng(seed, &format!("{tag}/source/shuffle")));
        let source_batches: Vec<&[_]> = source_samples.chunks(config.batch_size).collect();

        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        let mut step = |state: &mut MeanTeacherState,
                        optimizer: &mut Optimizer,
                        batch: &[(RoiSample, crate::detector::RefineTarget)],
                        weights: &[f64]|
         -> Result<()> {
            let loss = train_step(&mut state.student, optimizer, batch, weights, &config.train)?;
            state.ema_update()?;
            accumulate(&mut sum, &loss);
            steps += 1;
            Ok(())
        };

        let warning = if tdata.n_labels == 0 {
            log::warn!("epoch {epoch}: no pseudo-labels, training on source batches only");
            for batch in &source_batches {
                if exhausted(&state) {
                    break;
                }
                step(&mut state, &mut optimizer, batch, &vec![1.0; batch.len()])?;
            }
            Some("no pseudo-labels; source-only epoch".to_string())
        } else {
            // An epoch runs as many iterations as the longer of the two
            // streams, cycling the shorter, so a reduced frame pool trains
            // for as many steps as the full one.
            let target_batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
            let iterations = source_batches.len().max(target_batches.len());
            for k in 0..iterations {
                let src = source_batches[k % source_batches.len()];
                if exhausted(&state) {
                    break;
                }
                step(&mut state, &mut optimizer, src, &vec![1.0; src.len()])?;
                if exhausted(&state) {
                    break;
                }
                let chunk = target_batches[k % target_batches.len()];
                let batch: Vec<_> = chunk.iter().map(|&i| tdata.samples[i].clone()).collect();
                let aus: Vec<Option<f64>> = chunk.iter().map(|&i| tdata.aus[i]).collect();
                let weights = target_batch_weights(&aus, config.object_level, config.u_min)?;
                step(&mut state, &mut optimizer, &batch, &weights)?;
            }
            None
        };
        let mean = averaged(sum, steps);

        let evaluate = !heldout.is_empty()
            && (epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0));
        let (ap_bev, ap_3d) = if evaluate {
            let report = evaluate_params(&state.teacher, heldout, &config.proposals, &config.roi, &config.eval, "heldout", seed)?;
            (report.bev.moderate.ap, report.three_d.moderate.ap)
        } else {
            (None, None)
        };
        let mean_frame_au = if tdata.frame_aus.is_empty() {
            FRAME_AU_SENTINEL
        } else {
            tdata.frame_aus.iter().sum::<f64>() / tdata.frame_aus.len() as f64
        };
        let record = EpochMetrics {
            epoch,
            l_reg2: mean.l_reg2,
            l_cls2: mean.l_cls2,
            l_nll: mean.l_nll,
            n_pseudo_labels: tdata.n_labels,
            n_frames_selected: frames.len(),
            mean_frame_au,
            ap_bev_07: ap_bev,
            ap_3d_07: ap_3d,
            warning,
        };
        log::info!(
            "adapt epoch {epoch}: loss {:.4} labels {} frames {} frame AU {:.4} AP3D {:?}",
            mean.total,
            record.n_pseudo_labels,
            record.n_frames_selected,
            record.mean_frame_au,
            record.ap_3d_07
        );
        on_epoch(&record)?;
        metrics.push(record);
    }
    Ok(AdaptOutcome {
        state,
        optimizer,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::AuEncoding;

    #[test]
    fn ema_direct_values() {
        let mut t = RefineNetParams::zeros(AuEncoding::Corner);
        t.as_mut_slice().fill(1.0);
        let s = RefineNetParams::zeros(AuEncoding::Corner);
        ema_update(&mut t, &s, 0.999).unwrap();
        assert!(t.as_slice().iter().all(|v| *v == 0.999));
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        assert!(matches!(
            ema_update(&mut t, &RefineNetParams::zeros(AuEncoding::Box), 0.5),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn soft_weight_cases() {
        assert_eq!(object_soft_weights(&[0.5, 2.0], 1e-3).unwrap(), vec![1.6, 0.4]);
        assert_eq!(object_soft_weights(&[0.02; 4], 1e-3).unwrap(), vec![1.0; 4]);
        // u = 0 is clamped: raw weight 1000 against raw 1 for u = 1.
        let w = object_soft_weights(&[0.0, 1.0], 1e-3).unwrap();
        assert!((w[0] / w[1] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn weighted_loss_cases() {
        let l = |r: f64, c: f64, n: f64| LossBreakdown { l_reg2: r, l_cls2: c, l_nll: n, total: r + c + n };
        let losses = [l(1.0, 0.5, 0.2), l(0.3, 0.1, -0.4)];
        let lw = LossWeights::default();
        let unweighted = (losses[0].total + losses[1].total) / 2.0;
        assert_eq!(weighted_target_loss(&losses, &[1.0, 1.0], &lw, true).unwrap(), unweighted);
        assert_eq!(weighted_target_loss(&losses, &[2.0, 0.0], &lw, true).unwrap(), losses[0].total);
        assert!(weighted_target_loss(&losses, &[1.0], &lw, true).is_err());
    }

    #[test]
    fn frame_au_mean_and_sentinel() {
        use crate::detector::Uncertainty;
        use crate::geometry::OrientedBox3D;
        use crate::uncertainty::CornerUncertainty;
        let det = |au: f64, conf: f64| {
            BoxWithUncertainty::new(
                OrientedBox3D::new([0.0; 3], 4.0, 1.6, 1.5, 0.0).unwrap(),
                Uncertainty::Corner(CornerUncertainty::uniform(au).unwrap()),
                conf,
            )
        };
        let au = mean_valid_au(&[det(0.01, 0.9), det(0.03, 0.7), det(5.0, 0.2)], 0.6);
        assert!((au - 0.02).abs() < 1e-15);
        assert_eq!(mean_valid_au(&[det(0.01, 0.1)], 0.6), FRAME_AU_SENTINEL);
        assert_eq!(mean_valid_au(&[], 0.6), FRAME_AU_SENTINEL);
    }

    #[test]
    fn batch_weights_leave_background_at_one() {
        let w = target_batch_weights(&[Some(0.5), None, Some(2.0)], true, 1e-3).unwrap();
        assert_eq!(w, vec![1.6, 1.0, 0.4]);
        assert_eq!(target_batch_weights(&[Some(0.5), None], false, 1e-3).unwrap(), vec![1.0, 1.0]);
    }
}
