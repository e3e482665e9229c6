use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predict, AnchorSpec, BoxWithUncertainty, RefineNetParams};
use crate::error::{Error, Result};
use crate::geometry::iou_bev;
use crate::seeding::{derive_seed, rng_from_seed};
use crate::synthdata::{extract_roi, Proposal, RoiSample, SceneFrame};

/// How RoIs are cut out of a frame before they reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSettings {
    pub anchor: AnchorSpec,
    /// Crop box = anchor extents times this factor.
    pub crop_margin: f64,
    /// Points kept per RoI; larger crops are subsampled uniformly.
    pub max_points: usize,
    /// Detections overlapping a more confident one above this BEV IoU are dropped.
    pub nms_iou: f64,
}

impl Default for RoiSettings {
    fn default() -> Self {
        Self {
            anchor: AnchorSpec::default(),
            crop_margin: 1.5,
            max_points: 128,
            nms_iou: 0.25,
        }
    }
}

impl RoiSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_margin > 0.0) || self.max_points == 0 || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidArgument(format!(
                "roi settings need crop_margin > 0, max_points > 0, nms_iou in [0, 1]; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Crops every proposal of a frame. Subsampling draws from a stream keyed by
/// `(seed, frame_id, proposal index)`, so a RoI is identical wherever it is built.
pub fn build_rois(frame: &SceneFrame, proposals: &[Proposal], settings: &RoiSettings, seed: u64) -> Vec<RoiSample> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut roi = extract_roi(frame, p, &settings.anchor, settings.crop_margin);
            let mut rng = rng_from_seed(derive_seed(seed, &format!("roi/{}/{i}", frame.frame_id)));
            roi.subsample(settings.max_points, &mut rng);
            roi
        })
        .collect()
}

/// Greedy BEV suppression; input order is the priority order.
pub fn suppress_overlaps(sorted: Vec<BoxWithUncertainty>, iou_threshold: f64) -> Vec<BoxWithUncertainty> {
    let mut kept: Vec<BoxWithUncertainty> = Vec::with_capacity(sorted.len());
    for det in sorted {
        if kept.iter().all(|k| iou_bev(&k.bbox, &det.bbox) <= iou_threshold) {
            kept.push(det);
        }
    }
    kept
}

/// Sorts by descending confidence; equal confidences keep their input order.
pub fn sort_by_confidence(dets: &mut [BoxWithUncertainty]) {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Runs the refinement network on each RoI and returns the surviving
/// detections in descending confidence.
pub fn detect_rois(params: &RefineNetParams, rois: &[RoiSample], settings: &RoiSettings) -> Result<Vec<BoxWithUncertainty>> {
    let mut dets = rois
        .iter()
        .map(|roi| predict(params, roi, &settings.anchor))
        .collect::<Result<Vec<_>>>()?;
    sort_by_confidence(&mut dets);
    Ok(suppress_overlaps(dets, settings.nms_iou))
}

/// Detections for many frames, frames processed in parallel.
pub fn detect_frames(
    params: &RefineNetParams,
    frames: &[SceneFrame],
    proposals: &[Vec<Proposal>],
    settings: &RoiSettings,
    seed: u64,
) -> Result<Vec<Vec<BoxWithUncertainty>>> {
    if frames.len() != proposals.len() {
        return Err(Error::InvalidArgument(format!(
            "{} proposal lists for {} frames",
            proposals.len(),
            frames.len()
        )));
    }
    frames
        .par_iter()
        .zip(proposals.par_iter())
        .map(|(frame, props)| detect_rois(params, &build_rois(frame, props, settings, seed), settings))
        .collect()
}
