//! Statistical checks of the scene generator, proposal stand-in and RoI
//! augmentation against their defining distributions.

use boxadapt::detector::AnchorSpec;
use boxadapt::geometry::OrientedBox3D;
use boxadapt::seeding::derive_seed;
use boxadapt::synthdata::{
    augment_roi, extract_roi, generate_frame, propose_rois, AugmentationParams, DomainConfig, ProposalParams, RoiSample,
};

fn real_single_object_at(d: f64) -> DomainConfig {
    DomainConfig {
        objects_per_frame: (1, 1),
        distance_range: (d, d),
        ground_point_density: 0.0,
        ..DomainConfig::default_real()
    }
}

/// Points within 0.5 m of the box, which catches surface returns pushed
/// outward by range noise.
fn near_box(points: &[[f64; 3]], b: &OrientedBox3D) -> usize {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    points
        .iter()
        .filter(|p| {
            let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            u.abs() <= 0.5 * b.l + 0.5 && v.abs() <= 0.5 * b.w + 0.5 && (p[2] - b.cz).abs() <= 0.5 * b.h + 0.5
        })
        .count()
}

#[test]
fn point_count_falls_off_with_distance() {
    let cfg_near = real_single_object_at(10.0);
    let cfg_far = real_single_object_at(60.0);
    let (mut near, mut far) = (0usize, 0usize);
    for seed in 0..100 {
        let f = generate_frame(&cfg_near, seed).unwrap();
        near += near_box(&f.points, &f.boxes[0].bbox);
        let f = generate_frame(&cfg_far, 1000 + seed).unwrap();
        far += near_box(&f.points, &f.boxes[0].bbox);
    }
    let ratio = far as f64 / near as f64;
    let expected = (10.0f64 / 60.0).powf(cfg_near.density_falloff);
    // Poisson noise on both totals.
    let rel_sigma = (1.0 / far as f64 + 1.0 / near as f64).sqrt();
    println!("far/near = {ratio:.4}, expected {expected:.4} ± {:.4}", 3.0 * rel_sigma * expected);
    assert!((ratio / expected - 1.0).abs() <= 3.0 * rel_sigma);
}

fn four_object_frame(seed: u64) -> boxadapt::synthdata::SceneFrame {
    let cfg = DomainConfig {
        objects_per_frame: (4, 4),
        ..DomainConfig::default_real()
    };
    generate_frame(&cfg, seed).unwrap()
}

#[test]
fn proposal_center_jitter_has_the_configured_spread() {
    let params = ProposalParams { center_jitter_std: 0.3, yaw_jitter_std: 0.1, fp_rate: 0.0 };
    let anchor = AnchorSpec::default();
    let (mut ex, mut ey) = (Vec::new(), Vec::new());
    for seed in 0..250 {
        let frame = four_object_frame(seed);
        for (p, g) in propose_rois(&frame, &params, &anchor, derive_seed(seed, "jitter")).iter().zip(&frame.boxes) {
            ex.push(p.pose.center[0] - g.bbox.cx);
            ey.push(p.pose.center[1] - g.bbox.cy);
        }
    }
    assert_eq!(ex.len(), 1000);
    for errors in [ex, ey] {
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / 0.3 - 1.0).abs() <= 0.1, "std {std}");
    }
}

#[test]
fn false_proposals_follow_the_poisson_mean() {
    let params = ProposalParams { center_jitter_std: 0.3, yaw_jitter_std: 0.1, fp_rate: 0.5 };
    let anchor = AnchorSpec::default();
    let frames = 2000;
    let mut total = 0usize;
    for seed in 0..frames {
        let frame = four_object_frame(seed);
        total += propose_rois(&frame, &params, &anchor, derive_seed(seed, "fp")).iter().filter(|p| !p.from_object).count();
    }
    let mean = total as f64 / frames as f64;
    let sigma = (2.0 / frames as f64).sqrt();
    println!("false proposals per frame {mean:.3} (expected 2 ± {:.3})", 3.0 * sigma);
    assert!((mean - 2.0).abs() <= 3.0 * sigma);
}

#[test]
fn crop_matches_brute_force_membership() {
    let anchor = AnchorSpec::default();
    let margin = 1.5;
    for seed in 0..20 {
        let frame = four_object_frame(seed);
        for p in propose_rois(&frame, &ProposalParams::default(), &anchor, seed) {
            let roi = extract_roi(&frame, &p, &anchor, margin);
            let (c, s) = (p.pose.yaw.cos(), p.pose.yaw.sin());
            let expected: Vec<[f64; 3]> = frame
                .points
                .iter()
                .map(|q| {
                    let d = [q[0] - p.pose.center[0], q[1] - p.pose.center[1], q[2] - p.pose.center[2]];
                    [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
                })
                .filter(|l| {
                    l[0].abs() <= 0.5 * margin * anchor.l
                        && l[1].abs() <= 0.5 * margin * anchor.w
                        && l[2].abs() <= 0.5 * margin * anchor.h
                })
                .collect();
            assert_eq!(roi.points.len(), expected.len());
            for (a, b) in roi.points.iter().zip(&expected) {
                assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-9));
            }
        }
    }
}

/// Two-sided Kolmogorov–Smirnov statistic against U(lo, hi).
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn scale_factors_are_uniform() {
    let sample = RoiSample {
        points: vec![[0.5, 0.2, 0.1]],
        roi_pose: Default::default(),
        passthrough_features: vec![],
        gt_target: None,
        objectness: false,
        gt_index: None,
    };
    let params = AugmentationParams::default();
    let draws = 10_000;
    let mut per_axis = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..draws {
        let (_, t) = augment_roi(&sample, &params, derive_seed(9, &format!("aug/{i}")));
        for k in 0..3 {
            per_axis[k].push(t.scale[k]);
        }
    }
    // 1% critical value of the one-sample KS test.
    let critical = 1.628 / (draws as f64).sqrt();
    for xs in per_axis {
        let d = ks_uniform(xs, 0.7, 1.3);
        assert!(d < critical, "KS D = {d}");
    }
}
