mod common;

use std::f64::consts::FRAC_PI_4;

use boxadapt::geometry::{box_to_corners, corners_to_box, iou_3d, iou_bev, normalize_angle, OrientedBox3D};
use boxadapt::seeding::rng_from_seed;
use common::oracles::{monte_carlo_iou_3d, monte_carlo_iou_bev, perturbed_box, random_box, scalar_corner};

const MC_SAMPLES: usize = 200_000;

#[test]
fn corners_agree_with_scalar_recomputation() {
    let b = OrientedBox3D::new([1.0, 2.0, 0.0], 4.0, 2.0, 1.5, 0.7).unwrap();
    let cs = box_to_corners(&b);
    for i in 0..8 {
        let expected = scalar_corner(&b, i);
        for k in 0..3 {
            assert!((cs.corners[i][k] - expected[k]).abs() < 1e-12, "corner {i}");
        }
    }
}

#[test]
fn corner_round_trip_on_random_boxes() {
    let mut rng = rng_from_seed(11);
    for _ in 0..100 {
        let b = random_box(&mut rng);
        let r = corners_to_box(&box_to_corners(&b)).unwrap();
        let err = [r.cx - b.cx, r.cy - b.cy, r.cz - b.cz, r.l - b.l, r.w - b.w, r.h - b.h, normalize_angle(r.yaw - b.yaw)]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-9, "{b:?} -> {r:?}");
    }
}

#[test]
fn rotated_square_matches_monte_carlo() {
    let a = OrientedBox3D::new([0.0; 3], 1.0, 1.0, 1.0, 0.0).unwrap();
    let b = OrientedBox3D::new([0.0; 3], 1.0, 1.0, 1.0, FRAC_PI_4).unwrap();
    let mc = monte_carlo_iou_bev(&a, &b, MC_SAMPLES, &mut rng_from_seed(3));
    assert!((iou_bev(&a, &b) - mc).abs() <= 0.01, "{} vs {mc}", iou_bev(&a, &b));
    // Octagon intersection: 2(√2 − 1) of the unit square.
    let octagon = 2.0 * (2f64.sqrt() - 1.0);
    assert!((iou_bev(&a, &b) - octagon / (2.0 - octagon)).abs() < 1e-12);
}

#[test]
fn random_pairs_match_monte_carlo() {
    let mut rng = rng_from_seed(5);
    let mut mc_rng = rng_from_seed(6);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let a = random_box(&mut rng);
        let b = perturbed_box(&a, &mut rng);
        let bev = (iou_bev(&a, &b) - monte_carlo_iou_bev(&a, &b, MC_SAMPLES, &mut mc_rng)).abs();
        let vol = (iou_3d(&a, &b) - monte_carlo_iou_3d(&a, &b, MC_SAMPLES, &mut mc_rng)).abs();
        worst = (worst.0.max(bev), worst.1.max(vol));
    }
    println!("max |iou - monte carlo|: bev {:.4}, 3d {:.4}", worst.0, worst.1);
    assert!(worst.0 <= 0.01 && worst.1 <= 0.01);
}
