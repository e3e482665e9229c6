use serde::{Deserialize, Serialize};

use super::{match_detections, IouKind};
use crate::detector::BoxWithUncertainty;
use crate::error::{Error, Result};
use crate::geometry::{iou_3d, OrientedBox3D};
use crate::synthdata::SceneFrame;

pub const MIN_DIAGNOSTIC_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuPair {
    pub au: f64,
    /// 3D IoU with the matched ground truth.
    pub iou: f64,
    /// BEV distance from the ego origin to the ground-truth center (m).
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub rho: f64,
    /// Set when one side has no rank spread; `rho` is then 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuDiagnostics {
    pub match_iou: f64,
    pub pairs: Vec<AuPair>,
    pub au_vs_iou: RankCorrelation,
    pub au_vs_distance: RankCorrelation,
}

/// Ranks starting at 1; tied values share the average of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = 0.5 * ((start + 1) + end) as f64;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho as the Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<RankCorrelation> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("spearman: {} vs {} values", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if x.is_empty() || sxx == 0.0 || syy == 0.0 {
        return Ok(RankCorrelation {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorrelation {
        rho: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    })
}

/// Pairs every detection that matches a ground truth (3D IoU at least
/// `match_iou`, any difficulty) with that match's IoU and range, then rank
/// correlates AU against both.
pub fn au_iou_correlation(
    frames: &[SceneFrame],
    detections: &[Vec<BoxWithUncertainty>],
    match_iou: f64,
) -> Result<AuDiagnostics> {
    let mut pairs = Vec::new();
    for (frame, dets) in frames.iter().zip(detections) {
        let gts: Vec<OrientedBox3D> = frame.boxes.iter().map(|g| g.bbox).collect();
        let m = match_detections(dets, &gts, &vec![false; gts.len()], IouKind::ThreeD, match_iou);
        for (det, gt) in dets.iter().zip(&m.assigned) {
            if let Some(j) = gt {
                pairs.push(AuPair {
                    au: det.au,
                    iou: iou_3d(&det.bbox, &gts[*j]),
                    distance: gts[*j].range_xy(),
                });
            }
        }
    }
    if pairs.len() < MIN_DIAGNOSTIC_PAIRS {
        return Err(Error::InsufficientData {
            found: pairs.len(),
            required: MIN_DIAGNOSTIC_PAIRS,
        });
    }
    let au: Vec<f64> = pairs.iter().map(|p| p.au).collect();
    let iou: Vec<f64> = pairs.iter().map(|p| p.iou).collect();
    let dist: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    Ok(AuDiagnostics {
        match_iou,
        au_vs_iou: spearman(&au, &iou)?,
        au_vs_distance: spearman(&au, &dist)?,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn monotone_cases() {
        let x = [0.5, 0.4, 0.3, 0.2, 0.1];
        let y = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(spearman(&x, &y).unwrap().rho, -1.0);
        assert_eq!(spearman(&y, &y).unwrap().rho, 1.0);
    }

    #[test]
    fn constant_input_is_flagged() {
        let r = spearman(&[1.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r, RankCorrelation { rho: 0.0, degenerate: true });
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // Textbook example with ties: rho from the rank formula.
        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let rx = [1.0, 2.5, 2.5, 4.0];
        let ry = [1.0, 3.0, 2.0, 4.0];
        let m = 2.5;
        let num: f64 = (0..4).map(|i| (rx[i] - m) * (ry[i] - m)).sum();
        let den = ((0..4).map(|i| (rx[i] - m).powi(2)).sum::<f64>() * (0..4).map(|i| (ry[i] - m).powi(2)).sum::<f64>()).sqrt();
        assert_abs_diff_eq!(spearman(&x, &y).unwrap().rho, num / den, epsilon = 1e-15);
    }
}
