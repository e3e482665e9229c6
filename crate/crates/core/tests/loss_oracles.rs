//! Second-stage losses and weighting checked against longhand scalar
//! recomputations.

mod common;

use std::f64::consts::PI;

use boxadapt::detector::{
    compute_loss, encode_targets, AnchorSpec, BoxWithUncertainty, LossBreakdown, LossWeights, Prediction, RefineTarget,
    Uncertainty,
};
use boxadapt::geometry::OrientedBox3D;
use boxadapt::meanteacher::{mean_valid_au, weighted_target_loss, FRAME_AU_SENTINEL};
use boxadapt::seeding::rng_from_seed;
use boxadapt::uncertainty::{bf_nll_loss, corner_nll_loss, BoxUncertaintyBF, CornerUncertainty};
use common::oracles::{perturbed_box, random_box, scalar_corner};
use rand::Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

fn scalar_corner_nll(pred: &OrientedBox3D, sigma: &[f64; 8], gt: &OrientedBox3D) -> f64 {
    let mut sum = 0.0;
    for i in 0..8 {
        let (p, g) = (scalar_corner(pred, i), scalar_corner(gt, i));
        let d2 = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2);
        // Three independent coordinates sharing one variance.
        sum += d2 / (2.0 * sigma[i]) + 3.0 * 0.5 * sigma[i].ln();
    }
    sum / 8.0
}

#[test]
fn corner_nll_matches_scalar_recomputation() {
    let mut rng = rng_from_seed(21);
    for _ in 0..50 {
        let g = random_box(&mut rng);
        let p = perturbed_box(&g, &mut rng);
        let sigma: [f64; 8] = std::array::from_fn(|_| rng.random_range(0.01..2.0));
        let (total, _) = corner_nll_loss(&p, &CornerUncertainty::new(sigma).unwrap(), &g);
        assert!(close(total, scalar_corner_nll(&p, &sigma, &g)));
    }
}

#[test]
fn box_nll_matches_scalar_recomputation() {
    let mut rng = rng_from_seed(22);
    for _ in 0..50 {
        let g = random_box(&mut rng);
        let p = perturbed_box(&g, &mut rng);
        let sigma: [f64; 7] = std::array::from_fn(|_| rng.random_range(0.01..2.0));
        let (total, _) = bf_nll_loss(&p, &BoxUncertaintyBF::new(sigma).unwrap(), &g);
        let mut dyaw = (p.yaw - g.yaw) % PI;
        if dyaw > PI / 2.0 {
            dyaw -= PI;
        } else if dyaw <= -PI / 2.0 {
            dyaw += PI;
        }
        let r = [p.cx - g.cx, p.cy - g.cy, p.cz - g.cz, p.l - g.l, p.w - g.w, p.h - g.h, dyaw];
        let expected = (0..7).map(|k| r[k] * r[k] / (2.0 * sigma[k]) + 0.5 * sigma[k].ln()).sum::<f64>() / 7.0;
        assert!(close(total, expected), "{total} vs {expected}");
    }
}

/// The local box the residuals stand for, spelled out.
fn scalar_decode(r: &[f64; 7], a: &AnchorSpec) -> OrientedBox3D {
    let d = (a.l * a.l + a.w * a.w).sqrt();
    OrientedBox3D::new([r[0] * d, r[1] * d, r[2] * d], a.l * r[3].exp(), a.w * r[4].exp(), a.h * r[5].exp(), r[6]).unwrap()
}

#[test]
fn total_loss_matches_scalar_recomputation() {
    let anchor = AnchorSpec::default();
    let weights = LossWeights { reg: 0.7, cls: 1.3, nll: 0.4 };
    let mut rng = rng_from_seed(23);
    for trial in 0..50 {
        let gt = OrientedBox3D::new(
            [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3)],
            rng.random_range(3.0..5.0),
            rng.random_range(1.4..2.0),
            rng.random_range(1.3..1.9),
            rng.random_range(-1.2..1.2),
        )
        .unwrap();
        let target = if trial % 5 == 4 { RefineTarget::background() } else { RefineTarget::object(encode_targets(&gt, &anchor)) };
        let residuals: [f64; 7] = std::array::from_fn(|k| target.residuals[k] + rng.random_range(-1.5..1.5));
        let log_vars: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..1.0)).collect();
        let logit = rng.random_range(-4.0..4.0);
        let pred = Prediction { residuals, log_vars: log_vars.clone(), objectness_logit: logit };
        let out = compute_loss(&pred, &target, &anchor, &weights);

        let y = if target.objectness { 1.0 } else { 0.0 };
        let p = 1.0 / (1.0 + (-logit).exp());
        let cls = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let (mut reg, mut nll) = (0.0, 0.0);
        if target.objectness {
            for k in 0..7 {
                let x: f64 = residuals[k] - target.residuals[k];
                reg += if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
            }
            let sigma: [f64; 8] = std::array::from_fn(|i| log_vars[i].exp());
            nll = scalar_corner_nll(&scalar_decode(&residuals, &anchor), &sigma, &scalar_decode(&target.residuals, &anchor));
        }
        let total = weights.reg * reg + weights.cls * cls + weights.nll * nll;
        assert!(close(out.l_reg2, reg) && close(out.l_nll, nll));
        assert!((out.l_cls2 - cls).abs() < 1e-9, "{} vs {cls}", out.l_cls2);
        assert!((out.total - total).abs() < 1e-9 * (1.0 + total.abs()));
    }
}

#[test]
fn weighted_loss_is_a_dot_product() {
    let mut rng = rng_from_seed(24);
    let lw = LossWeights { reg: 1.0, cls: 0.5, nll: 2.0 };
    for weight_cls in [true, false] {
        let losses: Vec<LossBreakdown> = (0..9)
            .map(|_| LossBreakdown {
                l_reg2: rng.random_range(0.0..2.0),
                l_cls2: rng.random_range(0.0..1.0),
                l_nll: rng.random_range(-2.0..2.0),
                total: 0.0,
            })
            .collect();
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..3.0)).collect();
        let got = weighted_target_loss(&losses, &w, &lw, weight_cls).unwrap();
        let mut dot = 0.0;
        for i in 0..9 {
            let obj = lw.reg * losses[i].l_reg2 + lw.nll * losses[i].l_nll;
            let cls = lw.cls * losses[i].l_cls2;
            dot += w[i] * obj + if weight_cls { w[i] } else { 1.0 } * cls;
        }
        assert!(close(got, dot / 9.0));
    }
    let uniform: Vec<LossBreakdown> = (0..4).map(|i| LossBreakdown { l_reg2: i as f64, l_cls2: 0.1, l_nll: 0.5, total: 0.0 }).collect();
    let plain = uniform.iter().map(|l| l.l_reg2 + 0.5 * l.l_cls2 + 2.0 * l.l_nll).sum::<f64>() / 4.0;
    assert!(close(weighted_target_loss(&uniform, &[1.0; 4], &lw, true).unwrap(), plain));
}

#[test]
fn frame_au_matches_brute_force_mean() {
    let mut rng = rng_from_seed(25);
    let b = OrientedBox3D::new([10.0, 0.0, 0.0], 4.0, 1.7, 1.5, 0.0).unwrap();
    for _ in 0..30 {
        let dets: Vec<BoxWithUncertainty> = (0..rng.random_range(0..8))
            .map(|_| {
                let s = CornerUncertainty::uniform(rng.random_range(0.001..0.2)).unwrap();
                BoxWithUncertainty::new(b, Uncertainty::Corner(s), rng.random_range(0.0..1.0))
            })
            .collect();
        let valid: Vec<f64> = dets.iter().filter(|d| d.confidence >= 0.6).map(|d| d.au).collect();
        let expected = if valid.is_empty() { FRAME_AU_SENTINEL } else { valid.iter().sum::<f64>() / valid.len() as f64 };
        assert!(close(mean_valid_au(&dets, 0.6), expected));
    }
}
