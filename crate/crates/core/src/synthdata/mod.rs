//! Seeded synthetic scenes for a simulated source domain and a "real"
//! target domain, plus the proposal oracle, RoI cropping and RoI
//! augmentation used by the refinement stage.

mod io;
mod roi;

pub use io::{load_dataset, read_frame, write_dataset, write_frame, Dataset, Manifest};
pub use roi::{
    augment_roi, extract_roi, propose_rois, AugTransform, AugmentationParams, Proposal,
    ProposalParams, RoiPose, RoiSample, MATCH_IOU_THRESHOLD,
};

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_intersection_area, sin_cos, OrientedBox3D, Vec3};
use crate::seeding::{derive_seed, rng_from_seed, Rng};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Minimum in-box point counts for the easy, moderate and hard levels.
pub const EASY_MIN_POINTS: usize = 200;
pub const MODERATE_MIN_POINTS: usize = 60;
pub const HARD_MIN_POINTS: usize = 15;

/// Objects are kept at least this far apart (m) in the ground plane.
const PLACEMENT_GAP: f64 = 0.5;
/// Radius (m) of the ground patch sampled around each object.
const GROUND_PATCH_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Sim,
    Real,
}

impl DomainTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::Sim => "sim",
            DomainTag::Real => "real",
        }
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(DomainTag::Sim),
            "real" => Ok(DomainTag::Real),
            other => Err(Error::InvalidArgument(format!("unknown domain {other:?}"))),
        }
    }
}

/// Object size distribution, `(l, w, h)` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeModel {
    Catalog { sizes: Vec<[f64; 3]> },
    Gaussian { mean: [f64; 3], std: [f64; 3] },
}

impl SizeModel {
    pub fn sample(&self, rng: &mut Rng) -> [f64; 3] {
        match self {
            SizeModel::Catalog { sizes } => sizes[rng.random_range(0..sizes.len())],
            SizeModel::Gaussian { mean, std } => {
                let mut out = [0.0; 3];
                for k in 0..3 {
                    // Redraw the (practically unreachable) non-physical tail.
                    loop {
                        let v = mean[k] + std[k] * rng.sample::<f64, _>(rand_distr::StandardNormal);
                        if v > 0.1 * mean[k] {
                            out[k] = v;
                            break;
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain: DomainTag,
    pub size_model: SizeModel,
    /// Expected surface returns per object at 10 m.
    pub base_point_density: f64,
    /// Exponent of the `(10 / d)` distance decay.
    pub density_falloff: f64,
    pub point_noise_std: f64,
    pub dropout_rate: f64,
    /// Inclusive range of objects per frame.
    pub objects_per_frame: (usize, usize),
    pub distance_range: (f64, f64),
    /// Height of the sensor above the ground plane; the ego origin is the sensor.
    pub sensor_height: f64,
    /// Ground clutter returns per m² at 10 m.
    pub ground_point_density: f64,
}

impl DomainConfig {
    pub fn default_sim() -> Self {
        Self {
            domain: DomainTag::Sim,
            size_model: SizeModel::Catalog {
                sizes: vec![
                    [3.5, 1.5, 1.4],
                    [4.2, 1.7, 1.5],
                    [4.8, 1.9, 1.7],
                    [5.2, 2.0, 1.9],
                    [3.0, 1.4, 1.4],
                ],
            },
            base_point_density: 400.0,
            density_falloff: 1.0,
            point_noise_std: 0.01,
            dropout_rate: 0.0,
            objects_per_frame: (4, 8),
            distance_range: (4.0, 30.0),
            sensor_height: 1.73,
            ground_point_density: 2.0,
        }
    }

    pub fn default_real() -> Self {
        Self {
            domain: DomainTag::Real,
            size_model: SizeModel::Gaussian {
                mean: [3.9, 1.6, 1.56],
                std: [0.35, 0.10, 0.12],
            },
            base_point_density: 150.0,
            density_falloff: 2.0,
            point_noise_std: 0.05,
            dropout_rate: 0.4,
            objects_per_frame: (4, 8),
            distance_range: (4.0, 30.0),
            sensor_height: 1.73,
            ground_point_density: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let non_negative = [
            ("base_point_density", self.base_point_density),
            ("density_falloff", self.density_falloff),
            ("point_noise_std", self.point_noise_std),
            ("dropout_rate", self.dropout_rate),
            ("ground_point_density", self.ground_point_density),
            ("sensor_height", self.sensor_height),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if self.dropout_rate >= 1.0 {
            return bad(format!("dropout_rate must be < 1, got {}", self.dropout_rate));
        }
        let (lo, hi) = self.distance_range;
        if !(lo > 0.0 && lo <= hi && hi <= 200.0) {
            return bad(format!("distance_range must lie within (0, 200], got ({lo}, {hi})"));
        }
        if self.objects_per_frame.0 > self.objects_per_frame.1 {
            return bad("objects_per_frame minimum exceeds maximum".into());
        }
        match &self.size_model {
            SizeModel::Catalog { sizes } => {
                if sizes.is_empty() || sizes.iter().flatten().any(|v| !(*v > 0.0)) {
                    return bad("size catalog must be non-empty with positive sizes".into());
                }
            }
            SizeModel::Gaussian { mean, std } => {
                if mean.iter().any(|v| !(*v > 0.0)) || std.iter().any(|v| !(*v >= 0.0)) {
                    return bad("gaussian size model needs positive means and non-negative stds".into());
                }
            }
        }
        Ok(())
    }

    /// Expected number of surface returns for an object at distance `d`, before dropout.
    pub fn expected_points(&self, d: f64) -> f64 {
        self.base_point_density * (10.0 / d).powf(self.density_falloff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    /// Too few returns to be evaluated at any level.
    Excluded,
}

impl Difficulty {
    pub fn from_point_count(n: usize) -> Self {
        if n >= EASY_MIN_POINTS {
            Difficulty::Easy
        } else if n >= MODERATE_MIN_POINTS {
            Difficulty::Moderate
        } else if n >= HARD_MIN_POINTS {
            Difficulty::Hard
        } else {
            Difficulty::Excluded
        }
    }

    pub const LEVELS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Excluded => "excluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub bbox: OrientedBox3D,
    pub difficulty: Difficulty,
    /// Surface returns of this object that survived dropout.
    pub num_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub frame_id: String,
    pub domain: DomainTag,
    pub seed: u64,
    pub points: Vec<Vec3>,
    pub boxes: Vec<GroundTruth>,
}

struct Face {
    center: Vec3,
    normal: Vec3,
    axis_u: Vec3,
    axis_v: Vec3,
    half_u: f64,
    half_v: f64,
}

fn box_faces(b: &OrientedBox3D) -> [Face; 5] {
    let (s, c) = sin_cos(b.yaw);
    let ex = [c, s, 0.0];
    let ey = [-s, c, 0.0];
    let ez = [0.0, 0.0, 1.0];
    let at = |dx: f64, dy: f64, dz: f64| {
        [
            b.cx + dx * ex[0] + dy * ey[0],
            b.cy + dx * ex[1] + dy * ey[1],
            b.cz + dz,
        ]
    };
    let neg = |v: Vec3| [-v[0], -v[1], -v[2]];
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    [
        Face { center: at(hl, 0.0, 0.0), normal: ex, axis_u: ey, axis_v: ez, half_u: hw, half_v: hh },
        Face { center: at(-hl, 0.0, 0.0), normal: neg(ex), axis_u: ey, axis_v: ez, half_u: hw, half_v: hh },
        Face { center: at(0.0, hw, 0.0), normal: ey, axis_u: ex, axis_v: ez, half_u: hl, half_v: hh },
        Face { center: at(0.0, -hw, 0.0), normal: neg(ey), axis_u: ex, axis_v: ez, half_u: hl, half_v: hh },
        Face { center: at(0.0, 0.0, hh), normal: ez, axis_u: ex, axis_v: ey, half_u: hl, half_v: hw },
    ]
}

fn poisson(rng: &mut Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

/// Samples returns on the faces that look toward the sensor at the origin,
/// weighted by projected area.
fn sample_object_points(cfg: &DomainConfig, b: &OrientedBox3D, rng: &mut Rng) -> Vec<Vec3> {
    let faces = box_faces(b);
    let weights: Vec<f64> = faces
        .iter()
        .map(|f| {
            let to_sensor = [-f.center[0], -f.center[1], -f.center[2]];
            let dist = (to_sensor[0].powi(2) + to_sensor[1].powi(2) + to_sensor[2].powi(2)).sqrt();
            let cos = (0..3).map(|k| f.normal[k] * to_sensor[k]).sum::<f64>() / dist;
            if cos > 0.0 {
                4.0 * f.half_u * f.half_v * cos
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let n = poisson(rng, cfg.expected_points(b.range_xy())).max(1);
    let noise = Normal::new(0.0, cfg.point_noise_std.max(0.0)).expect("finite std");

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut face = &faces[0];
        for (f, w) in faces.iter().zip(&weights) {
            if *w <= 0.0 {
                continue;
            }
            face = f;
            if pick < *w {
                break;
            }
            pick -= w;
        }
        let u = rng.random_range(-1.0..=1.0) * face.half_u;
        let v = rng.random_range(-1.0..=1.0) * face.half_v;
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = face.center[k] + u * face.axis_u[k] + v * face.axis_v[k] + noise.sample(rng);
        }
        out.push(p);
    }
    out
}

fn sample_ground_patch(cfg: &DomainConfig, b: &OrientedBox3D, rng: &mut Rng) -> Vec<Vec3> {
    let area = PI * GROUND_PATCH_RADIUS * GROUND_PATCH_RADIUS;
    let density = cfg.ground_point_density * (10.0 / b.range_xy()).powf(cfg.density_falloff);
    let n = poisson(rng, density * area);
    let noise = Normal::new(0.0, cfg.point_noise_std.max(0.0)).expect("finite std");
    let shadow = OrientedBox3D {
        l: b.l + 0.4,
        w: b.w + 0.4,
        ..*b
    };
    let ground_z = -cfg.sensor_height;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = GROUND_PATCH_RADIUS * rng.random::<f64>().sqrt();
        let phi = rng.random_range(-PI..PI);
        let (s, c) = sin_cos(phi);
        let p = [b.cx + r * c, b.cy + r * s, ground_z + noise.sample(rng)];
        let under = shadow.to_local(p);
        if under[0].abs() <= 0.5 * shadow.l && under[1].abs() <= 0.5 * shadow.w {
            continue;
        }
        out.push(p);
    }
    out
}

/// Generates one frame. Fully determined by `(config, seed)`.
pub fn generate_frame(config: &DomainConfig, seed: u64) -> Result<SceneFrame> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let (lo, hi) = config.objects_per_frame;
    let requested = rng.random_range(lo..=hi);

    let mut placed: Vec<OrientedBox3D> = Vec::with_capacity(requested);
    let mut attempts = 0;
    while placed.len() < requested {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailure {
                requested,
                placed: placed.len(),
                attempts,
            });
        }
        attempts += 1;
        let (dmin, dmax) = config.distance_range;
        let d = rng.random_range(dmin..=dmax);
        let azimuth = rng.random_range(-PI..PI);
        let yaw = rng.random_range(-PI..PI);
        let [l, w, h] = config.size_model.sample(&mut rng);
        let cz = -config.sensor_height + 0.5 * h;
        let (s, c) = sin_cos(azimuth);
        let candidate = OrientedBox3D::new([d * c, d * s, cz], l, w, h, yaw)?;
        let padded = OrientedBox3D {
            l: l + PLACEMENT_GAP,
            w: w + PLACEMENT_GAP,
            ..candidate
        };
        let clash = placed.iter().any(|o| {
            let other = OrientedBox3D {
                l: o.l + PLACEMENT_GAP,
                w: o.w + PLACEMENT_GAP,
                ..*o
            };
            bev_intersection_area(&padded, &other) > 0.0
        });
        if !clash {
            placed.push(candidate);
        }
    }

    let keep = 1.0 - config.dropout_rate;
    let mut points = Vec::new();
    let mut boxes = Vec::with_capacity(placed.len());
    for b in &placed {
        let surface = sample_object_points(config, b, &mut rng);
        let mut survived = 0;
        for p in surface {
            if rng.random::<f64>() < keep {
                points.push(p);
                survived += 1;
            }
        }
        boxes.push(GroundTruth {
            bbox: *b,
            difficulty: Difficulty::from_point_count(survived),
            num_points: survived,
        });
    }
    for b in &placed {
        for p in sample_ground_patch(config, b, &mut rng) {
            if rng.random::<f64>() < keep {
                points.push(p);
            }
        }
    }

    Ok(SceneFrame {
        frame_id: format!("{}_{seed:016x}", config.domain.as_str()),
        domain: config.domain,
        seed,
        points,
        boxes,
    })
}

/// Seed of frame `index` in the named split of a dataset rooted at `root_seed`.
pub fn frame_seed(root_seed: u64, domain: DomainTag, split: &str, index: usize) -> u64 {
    derive_seed(root_seed, &format!("frames/{}/{split}/{index}", domain.as_str()))
}

/// Generates `count` frames named `{domain}_{split}_{index:06}`.
pub fn generate_split(
    config: &DomainConfig,
    root_seed: u64,
    split: &str,
    count: usize,
) -> Result<Vec<SceneFrame>> {
    (0..count)
        .map(|i| {
            let mut frame = generate_frame(config, frame_seed(root_seed, config.domain, split, i))?;
            frame.frame_id = format!("{}_{split}_{i:06}", config.domain.as_str());
            Ok(frame)
        })
        .collect()
}
