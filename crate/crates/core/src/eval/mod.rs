//! KITTI-style average precision at a fixed IoU threshold, per difficulty
//! level, in bird's-eye view and in 3D; plus uncertainty diagnostics.

mod diagnostics;
mod report;

pub use diagnostics::{au_iou_correlation, spearman, AuDiagnostics, AuPair, RankCorrelation, MIN_DIAGNOSTIC_PAIRS};
pub use report::{format_table, write_diagnostics_csv, write_report_json, write_scatter_svg};

use serde::{Deserialize, Serialize};

use crate::detector::BoxWithUncertainty;
use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, OrientedBox3D};
use crate::synthdata::{Difficulty, SceneFrame};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IouKind {
    #[serde(rename = "bev")]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub const BOTH: [IouKind; 2] = [IouKind::Bev, IouKind::ThreeD];

    pub fn iou(&self, a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            IouKind::Bev => "bev",
            IouKind::ThreeD => "3d",
        }
    }
}

/// Recall sampling of the precision envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Recall 1/40, 2/40, ..., 1.
    Points40,
    /// Recall 0, 0.1, ..., 1.
    Points11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Matched a ground truth that does not count at this level.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub outcomes: Vec<MatchOutcome>,
    /// Index of the ground truth each prediction took, if any.
    pub assigned: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// Greedy one-to-one matching. Predictions must already be in descending
/// confidence. Each prediction takes the highest-IoU unmatched counted
/// ground truth at or above `threshold`; failing that, an ignored ground
/// truth absorbs it without scoring.
pub fn match_detections(
    preds: &[BoxWithUncertainty],
    gts: &[OrientedBox3D],
    ignored: &[bool],
    kind: IouKind,
    threshold: f64,
) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(preds.len());
    let mut assigned = Vec::with_capacity(preds.len());
    for pred in preds {
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (j, gt) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let iou = kind.iou(&pred.bbox, gt);
            if iou < threshold {
                continue;
            }
            let slot = &mut best[usize::from(ignored[j])];
            if slot.is_none_or(|(_, b)| iou > b) {
                *slot = Some((j, iou));
            }
        }
        match best {
            [Some((j, _)), _] => {
                gt_matched[j] = true;
                outcomes.push(MatchOutcome::TruePositive);
                assigned.push(Some(j));
            }
            [None, Some((j, _))] => {
                gt_matched[j] = true;
                outcomes.push(MatchOutcome::Ignored);
                assigned.push(Some(j));
            }
            [None, None] => {
                outcomes.push(MatchOutcome::FalsePositive);
                assigned.push(None);
            }
        }
    }
    MatchResult {
        outcomes,
        assigned,
        gt_matched,
    }
}

/// Interpolated AP in percent from `(confidence, is_true_positive)` pairs
/// pooled over a split. Precision/recall points are taken only after whole
/// groups of equal confidence.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize, interpolation: Interpolation) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));

    // (true positives, precision) after each tie group.
    let mut curve: Vec<(usize, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(k + 1).is_none_or(|&next| scored[next].0 != scored[i].0);
        if group_ends {
            curve.push((tp, tp as f64 / (tp + fp) as f64));
        }
    }

    let (samples, steps): (Vec<usize>, usize) = match interpolation {
        Interpolation::Points40 => ((1..=40).collect(), 40),
        Interpolation::Points11 => ((0..=10).collect(), 10),
    };
    let mut sum = 0.0;
    for &k in &samples {
        // recall ≥ k/steps, compared in integers.
        let envelope = curve
            .iter()
            .filter(|(t, _)| t * steps >= k * num_gt)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += envelope;
    }
    Ok(100.0 * sum / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    /// `None` when the level has no ground truths.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub easy: LevelResult,
    pub moderate: LevelResult,
    pub hard: LevelResult,
    /// Mean over the levels that have an AP.
    pub mean: Option<f64>,
}

impl MetricResult {
    pub fn level(&self, d: Difficulty) -> &LevelResult {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Moderate => &self.moderate,
            _ => &self.hard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub dataset: String,
    pub seed: u64,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub num_frames: usize,
    pub bev: MetricResult,
    #[serde(rename = "3d")]
    pub three_d: MetricResult,
}

impl APReport {
    pub fn metric(&self, kind: IouKind) -> &MetricResult {
        match kind {
            IouKind::Bev => &self.bev,
            IouKind::ThreeD => &self.three_d,
        }
    }

    /// AP_3D at the moderate level, the headline number.
    pub fn moderate_3d(&self) -> Option<f64> {
        self.three_d.moderate.ap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            interpolation: Interpolation::Points40,
        }
    }
}

fn level_rank(d: Difficulty) -> usize {
    match d {
        Difficulty::Easy => 0,
        Difficulty::Moderate => 1,
        Difficulty::Hard => 2,
        Difficulty::Excluded => 3,
    }
}

fn evaluate_level(
    frames: &[SceneFrame],
    detections: &[Vec<BoxWithUncertainty>],
    level: Difficulty,
    kind: IouKind,
    options: &EvalOptions,
) -> LevelResult {
    let mut scored = Vec::new();
    let (mut num_gt, mut tp, mut fp) = (0, 0, 0);
    for (frame, dets) in frames.iter().zip(detections) {
        let gts: Vec<OrientedBox3D> = frame.boxes.iter().map(|g| g.bbox).collect();
        let ignored: Vec<bool> = frame.boxes.iter().map(|g| level_rank(g.difficulty) > level_rank(level)).collect();
        num_gt += ignored.iter().filter(|i| !**i).count();
        let m = match_detections(dets, &gts, &ignored, kind, options.iou_threshold);
        for (det, outcome) in dets.iter().zip(&m.outcomes) {
            match outcome {
                MatchOutcome::TruePositive => {
                    tp += 1;
                    scored.push((det.confidence, true));
                }
                MatchOutcome::FalsePositive => {
                    fp += 1;
                    scored.push((det.confidence, false));
                }
                MatchOutcome::Ignored => {}
            }
        }
    }
    LevelResult {
        ap: average_precision(&scored, num_gt, options.interpolation).ok(),
        tp,
        fp,
        fn_: num_gt - tp,
        num_gt,
    }
}

/// Scores per-frame detections (each list in descending confidence)
/// against the frames' ground truth. Level L counts ground truths of
/// difficulty L or easier; the rest are ignored.
pub fn evaluate_detections(
    frames: &[SceneFrame],
    detections: &[Vec<BoxWithUncertainty>],
    dataset: &str,
    seed: u64,
    options: &EvalOptions,
) -> Result<APReport> {
    if frames.len() != detections.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection lists for {} frames",
            detections.len(),
            frames.len()
        )));
    }
    let metric = |kind| {
        let [easy, moderate, hard] =
            Difficulty::LEVELS.map(|level| evaluate_level(frames, detections, level, kind, options));
        let aps: Vec<f64> = [easy.ap, moderate.ap, hard.ap].into_iter().flatten().collect();
        MetricResult {
            easy,
            moderate,
            hard,
            mean: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        }
    };
    Ok(APReport {
        dataset: dataset.to_string(),
        seed,
        iou_threshold: options.iou_threshold,
        interpolation: options.interpolation,
        num_frames: frames.len(),
        bev: metric(IouKind::Bev),
        three_d: metric(IouKind::ThreeD),
    })
}

/// Detections that reproduce each frame's ground truth with confidence 1.
pub fn oracle_detections(frames: &[SceneFrame]) -> Vec<Vec<BoxWithUncertainty>> {
    use crate::detector::Uncertainty;
    use crate::uncertainty::CornerUncertainty;
    let sigma = Uncertainty::Corner(CornerUncertainty::uniform(crate::uncertainty::VARIANCE_MIN).expect("positive"));
    frames
        .iter()
        .map(|f| f.boxes.iter().map(|g| BoxWithUncertainty::new(g.bbox, sigma, 1.0)).collect())
        .collect()
}
