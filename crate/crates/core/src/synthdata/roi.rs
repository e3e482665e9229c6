use std::f64::consts::{FRAC_PI_4, PI};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::SceneFrame;
use crate::detector::AnchorSpec;
use crate::error::{Error, Result};
use crate::geometry::{iou_bev, normalize_angle, rotate_z, sin_cos, OrientedBox3D, Vec3};
use crate::seeding::{rng_from_seed, Rng};

/// A proposal is assigned to a ground truth when the anchor placed at the
/// proposal pose overlaps it by at least this BEV IoU.
pub const MATCH_IOU_THRESHOLD: f64 = 0.3;

/// False proposals are rejected if they overlap any ground truth by this much.
const FALSE_PROPOSAL_MAX_IOU: f64 = 0.1;
const FALSE_PROPOSAL_TRIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoiPose {
    pub center: Vec3,
    pub yaw: f64,
}

impl RoiPose {
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = sin_cos(self.yaw);
        rotate_z(
            [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]],
            -s,
            c,
        )
    }

    pub fn to_ego(&self, p: Vec3) -> Vec3 {
        let (s, c) = sin_cos(self.yaw);
        let r = rotate_z(p, s, c);
        [r[0] + self.center[0], r[1] + self.center[1], r[2] + self.center[2]]
    }

    pub fn box_to_local(&self, b: &OrientedBox3D) -> OrientedBox3D {
        let c = self.to_local(b.center());
        OrientedBox3D {
            cx: c[0],
            cy: c[1],
            cz: c[2],
            yaw: normalize_angle(b.yaw - self.yaw),
            ..*b
        }
    }

    pub fn box_to_ego(&self, b: &OrientedBox3D) -> OrientedBox3D {
        let c = self.to_ego(b.center());
        OrientedBox3D {
            cx: c[0],
            cy: c[1],
            cz: c[2],
            yaw: normalize_angle(b.yaw + self.yaw),
            ..*b
        }
    }

    /// The anchor box placed at this pose.
    pub fn anchor_box(&self, anchor: &AnchorSpec) -> OrientedBox3D {
        OrientedBox3D {
            cx: self.center[0],
            cy: self.center[1],
            cz: self.center[2],
            l: anchor.l,
            w: anchor.w,
            h: anchor.h,
            yaw: normalize_angle(self.yaw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub pose: RoiPose,
    /// True when the proposal was spawned from a ground-truth object.
    pub from_object: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub center_jitter_std: f64,
    pub yaw_jitter_std: f64,
    /// Expected false proposals per ground-truth object.
    pub fp_rate: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            center_jitter_std: 0.3,
            yaw_jitter_std: 0.1,
            fp_rate: 0.3,
        }
    }
}

/// Stand-in for a first-stage network: one jittered proposal per ground
/// truth plus Poisson-many false proposals near objects or on background.
/// Sizes are not proposed; the anchor supplies them.
pub fn propose_rois(frame: &SceneFrame, params: &ProposalParams, anchor: &AnchorSpec, seed: u64) -> Vec<Proposal> {
    let mut rng = rng_from_seed(seed);
    let center_noise = Normal::new(0.0, params.center_jitter_std.max(0.0)).expect("finite std");
    let yaw_noise = Normal::new(0.0, params.yaw_jitter_std.max(0.0)).expect("finite std");

    let mut out: Vec<Proposal> = frame
        .boxes
        .iter()
        .map(|gt| {
            let c = gt.bbox.center();
            let center = [
                c[0] + center_noise.sample(&mut rng),
                c[1] + center_noise.sample(&mut rng),
                c[2] + center_noise.sample(&mut rng),
            ];
            Proposal {
                pose: RoiPose {
                    center,
                    yaw: normalize_angle(gt.bbox.yaw + yaw_noise.sample(&mut rng)),
                },
                from_object: true,
            }
        })
        .collect();

    if frame.boxes.is_empty() || params.fp_rate <= 0.0 {
        return out;
    }
    let mean = params.fp_rate * frame.boxes.len() as f64;
    let count = Poisson::new(mean).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
    let ground_center_z = frame.boxes[0].bbox.z_min() + 0.5 * anchor.h;
    let max_range = frame.boxes.iter().map(|g| g.bbox.range_xy()).fold(0.0, f64::max);
    for _ in 0..count {
        for _ in 0..FALSE_PROPOSAL_TRIES {
            let (x, y) = if rng.random::<f64>() < 0.5 {
                let host = &frame.boxes[rng.random_range(0..frame.boxes.len())].bbox;
                let r = rng.random_range(2.5..5.0);
                let (s, c) = sin_cos(rng.random_range(-PI..PI));
                (host.cx + r * c, host.cy + r * s)
            } else {
                let r = rng.random_range(3.0..max_range.max(3.0) + 1.0);
                let (s, c) = sin_cos(rng.random_range(-PI..PI));
                (r * c, r * s)
            };
            let pose = RoiPose {
                center: [x, y, ground_center_z],
                yaw: rng.random_range(-PI..PI),
            };
            let anchor_box = pose.anchor_box(anchor);
            if frame.boxes.iter().all(|g| iou_bev(&anchor_box, &g.bbox) < FALSE_PROPOSAL_MAX_IOU) {
                out.push(Proposal {
                    pose,
                    from_object: false,
                });
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSample {
    /// Points in the RoI frame: proposal center at the origin, heading along +x.
    pub points: Vec<Vec3>,
    pub roi_pose: RoiPose,
    /// Opaque per-RoI features carried through augmentation untouched.
    pub passthrough_features: Vec<f64>,
    /// Matched ground truth in the RoI frame.
    pub gt_target: Option<OrientedBox3D>,
    pub objectness: bool,
    /// Index of the matched ground truth within its frame.
    pub gt_index: Option<usize>,
}

impl RoiSample {
    /// Keeps at most `max_points` points, chosen uniformly without
    /// replacement; the surviving points keep their relative order.
    pub fn subsample(&mut self, max_points: usize, rng: &mut Rng) {
        let n = self.points.len();
        if n <= max_points {
            return;
        }
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..max_points {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut keep = idx[..max_points].to_vec();
        keep.sort_unstable();
        self.points = keep.into_iter().map(|i| self.points[i]).collect();
    }
}

/// Crops the points inside the margin-scaled anchor at the proposal pose and
/// expresses them in the RoI frame. The best-overlapping ground truth (BEV
/// IoU of the anchor at the proposal pose, at least [`MATCH_IOU_THRESHOLD`])
/// becomes the local regression target.
pub fn extract_roi(frame: &SceneFrame, proposal: &Proposal, anchor: &AnchorSpec, crop_margin: f64) -> RoiSample {
    let pose = proposal.pose;
    let crop = OrientedBox3D {
        l: anchor.l * crop_margin,
        w: anchor.w * crop_margin,
        h: anchor.h * crop_margin,
        ..pose.anchor_box(anchor)
    };
    let (hl, hw, hh) = (0.5 * crop.l, 0.5 * crop.w, 0.5 * crop.h);
    let points = frame
        .points
        .iter()
        .map(|p| pose.to_local(*p))
        .filter(|q| q[0].abs() <= hl && q[1].abs() <= hw && q[2].abs() <= hh)
        .collect();

    let anchor_box = pose.anchor_box(anchor);
    let best = frame
        .boxes
        .iter()
        .enumerate()
        .map(|(i, g)| (i, iou_bev(&anchor_box, &g.bbox)))
        .filter(|(_, iou)| *iou >= MATCH_IOU_THRESHOLD)
        .fold(None::<(usize, f64)>, |acc, cur| match acc {
            Some(a) if a.1 >= cur.1 => Some(a),
            _ => Some(cur),
        });

    RoiSample {
        points,
        roi_pose: pose,
        passthrough_features: Vec::new(),
        gt_target: best.map(|(i, _)| pose.box_to_local(&frame.boxes[i].bbox)),
        objectness: best.is_some(),
        gt_index: best.map(|(i, _)| i),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// Interval for each of the axis-wise scale factors `q_l, q_w, q_h`.
    pub scale_range: (f64, f64),
    pub translate_max: f64,
    pub rotate_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            scale_range: (0.7, 1.3),
            translate_max: 0.5,
            rotate_max: FRAC_PI_4,
            flip_prob: 0.5,
        }
    }
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            translate_max: 0.0,
            rotate_max: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale_range must lie in (0, inf), got ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if !(self.translate_max >= 0.0 && self.rotate_max >= 0.0) {
            return Err(Error::InvalidArgument("translate_max and rotate_max must be non-negative".into()));
        }
        Ok(())
    }
}

/// The transform applied by [`augment_roi`]: axis-wise scaling, then
/// translation, then rotation about z, then an optional y-axis flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugTransform {
    pub scale: Vec3,
    pub translation: Vec3,
    pub rotation: f64,
    pub flip: bool,
}

impl AugTransform {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            translation: [0.0; 3],
            rotation: 0.0,
            flip: false,
        }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let t = [
            p[0] * self.scale[0] + self.translation[0],
            p[1] * self.scale[1] + self.translation[1],
            p[2] * self.scale[2] + self.translation[2],
        ];
        let (s, c) = sin_cos(self.rotation);
        let mut r = rotate_z(t, s, c);
        if self.flip {
            r[1] = -r[1];
        }
        r
    }

    pub fn invert_point(&self, q: Vec3) -> Vec3 {
        let mut r = q;
        if self.flip {
            r[1] = -r[1];
        }
        let (s, c) = sin_cos(self.rotation);
        let t = rotate_z(r, -s, c);
        [
            (t[0] - self.translation[0]) / self.scale[0],
            (t[1] - self.translation[1]) / self.scale[1],
            (t[2] - self.translation[2]) / self.scale[2],
        ]
    }

    /// Applies the transform to a box in the RoI frame. Extents scale with
    /// the matching axis factors.
    pub fn apply_box(&self, b: &OrientedBox3D) -> OrientedBox3D {
        let c = self.apply_point(b.center());
        let mut yaw = b.yaw + self.rotation;
        if self.flip {
            yaw = -yaw;
        }
        OrientedBox3D {
            cx: c[0],
            cy: c[1],
            cz: c[2],
            l: b.l * self.scale[0],
            w: b.w * self.scale[1],
            h: b.h * self.scale[2],
            yaw: normalize_angle(yaw),
        }
    }
}

pub fn augment_roi(sample: &RoiSample, params: &AugmentationParams, seed: u64) -> (RoiSample, AugTransform) {
    let mut rng = rng_from_seed(seed);
    let (lo, hi) = params.scale_range;
    let mut scale = [1.0; 3];
    for s in &mut scale {
        *s = if hi > lo { rng.random_range(lo..hi) } else { lo };
    }
    let mut translation = [0.0; 3];
    for t in &mut translation {
        *t = if params.translate_max > 0.0 {
            rng.random_range(-params.translate_max..=params.translate_max)
        } else {
            0.0
        };
    }
    let rotation = if params.rotate_max > 0.0 {
        rng.random_range(-params.rotate_max..=params.rotate_max)
    } else {
        0.0
    };
    let flip = rng.random::<f64>() < params.flip_prob;
    let transform = AugTransform {
        scale,
        translation,
        rotation,
        flip,
    };
    (apply_augmentation(sample, &transform), transform)
}

/// Applies a fixed transform to a sample's points and target.
pub fn apply_augmentation(sample: &RoiSample, transform: &AugTransform) -> RoiSample {
    RoiSample {
        points: sample.points.iter().map(|p| transform.apply_point(*p)).collect(),
        roi_pose: sample.roi_pose,
        passthrough_features: sample.passthrough_features.clone(),
        gt_target: sample.gt_target.map(|b| transform.apply_box(&b)),
        objectness: sample.objectness,
        gt_index: sample.gt_index,
    }
}
