
use boxadapt::detector::{
    activation_pattern, forward, loss_and_gradient, ParamId, RefineNetParams, RefineTarget, TrainOptions,
};
use boxadapt::geometry::Vec3;
use boxadapt::seeding::rng_from_seed;
use boxadapt::synthdata::{RoiPose, RoiSample};
use boxadapt::uncertainty::{AuEncoding, VARIANCE_MAX, VARIANCE_MIN};
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
/// Coordinates sampled per parameter array and draw.
const COORDS_PER_ARRAY: usize = 4;

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h probe crossed a ReLU, max-pool, smooth-L1 or clamp kink.
    pub skipped: usize,
    pub worst: String,
}

fn sample(points: Vec<Vec3>) -> RoiSample {
    RoiSample {
        points,
        roi_pose: RoiPose { center: [0.0; 3], yaw: 0.0 },
        passthrough_features: vec![],
        gt_target: None,
        objectness: true,
        gt_index: None,
    }
}

/// A random (parameters, batch, weights) draw with nonzero heads so that
/// every parameter array receives gradient.
pub fn random_draw(encoding: AuEncoding, seed: u64) -> (RefineNetParams, Vec<(RoiSample, RefineTarget)>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let mut params = RefineNetParams::init(encoding, seed ^ 0x5eed);
    for id in [ParamId::RegW, ParamId::VarW, ParamId::ClsW] {
        for v in params.get_mut(id) {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    for id in [ParamId::RegB, ParamId::VarB, ParamId::ClsB, ParamId::Enc1B, ParamId::Enc2B, ParamId::TrunkB] {
        for v in params.get_mut(id) {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let batch = (0..3)
        .map(|k| {
            let n = rng.random_range(4..12);
            let pts = (0..n)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8)])
                .collect();
            let residuals: [f64; 7] = std::array::from_fn(|i| match i {
                0..=2 => rng.random_range(-0.3..0.3),
                3..=5 => rng.random_range(-0.3..0.3),
                _ => rng.random_range(-0.6..0.6),
            });
            let target = if k == 2 { RefineTarget::background() } else { RefineTarget::object(residuals) };
            (sample(pts), target)
        })
        .collect();
    let weights = vec![rng.random_range(0.2..2.0), rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
    (params, batch, weights)
}

fn loss(params: &RefineNetParams, batch: &[(RoiSample, RefineTarget)], weights: &[f64], opts: &TrainOptions) -> f64 {
    loss_and_gradient(params, batch, weights, opts).unwrap().0.total
}

/// True when the network or loss changes branch between the two probes.
fn crosses_kink(a: &RefineNetParams, b: &RefineNetParams, batch: &[(RoiSample, RefineTarget)]) -> bool {
    let (lo, hi) = (VARIANCE_MIN.ln(), VARIANCE_MAX.ln());
    batch.iter().any(|(s, t)| {
        if activation_pattern(a, &s.points).unwrap() != activation_pattern(b, &s.points).unwrap() {
            return true;
        }
        let (pa, pb) = (forward(a, s).unwrap(), forward(b, s).unwrap());
        let l1 = (0..7).any(|k| {
            let (da, db) = (pa.residuals[k] - t.residuals[k], pb.residuals[k] - t.residuals[k]);
            (da.abs() < 1.0) != (db.abs() < 1.0)
        });
        let clamp = pa.log_vars.iter().zip(&pb.log_vars).any(|(x, y)| (*x < lo) != (*y < lo) || (*x > hi) != (*y > hi));
        l1 || clamp
    })
}

pub fn gradient_check(encoding: AuEncoding, draws: u64) -> GradCheck {
    let opts = TrainOptions::default();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0, worst: String::new() };
    for draw in 0..draws {
        let (params, batch, weights) = random_draw(encoding, 1000 + draw);
        let (_, grad) = loss_and_gradient(&params, &batch, &weights, &opts).unwrap();
        let mut rng = rng_from_seed(77 + draw);
        for id in ParamId::ALL {
            let range = params.range(id);
            for _ in 0..COORDS_PER_ARRAY {
                let idx = rng.random_range(range.clone());
                let mut plus = params.clone();
                plus.as_mut_slice()[idx] += FD_STEP;
                let mut minus = params.clone();
                minus.as_mut_slice()[idx] -= FD_STEP;
                if crosses_kink(&plus, &minus, &batch) {
                    out.skipped += 1;
                    continue;
                }
                let numeric = (loss(&plus, &batch, &weights, &opts) - loss(&minus, &batch, &weights, &opts)) / (2.0 * FD_STEP);
                let analytic = grad[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                out.checked += 1;
                if rel > out.max_rel_error {
                    out.max_rel_error = rel;
                    out.worst = format!("{} [{}] draw {draw}: analytic {analytic:e} numeric {numeric:e}", id.name(), idx - range.start);
                }
            }
        }
    }
    out
}
