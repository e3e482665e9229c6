//! Independent reference computations. Nothing here calls the routine it
//! is used to check.

use std::f64::consts::PI;

use boxadapt::geometry::{OrientedBox3D, Vec3};
use boxadapt::seeding::Rng;
use rand::Rng as _;

pub fn random_box(rng: &mut Rng) -> OrientedBox3D {
    OrientedBox3D::new(
        [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0)],
        rng.random_range(0.5..6.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(-PI..PI),
    )
    .unwrap()
}

/// A second box near `a`, so that most pairs overlap partially.
pub fn perturbed_box(a: &OrientedBox3D, rng: &mut Rng) -> OrientedBox3D {
    let yaw = if rng.random_bool(0.5) { a.yaw + rng.random_range(-0.4..0.4) } else { rng.random_range(-PI..PI) };
    OrientedBox3D::new(
        [
            a.cx + rng.random_range(-1.5..1.5),
            a.cy + rng.random_range(-1.5..1.5),
            a.cz + rng.random_range(-0.5..0.5) * a.h,
        ],
        a.l * rng.random_range(0.6..1.4),
        a.w * rng.random_range(0.6..1.4),
        a.h * rng.random_range(0.6..1.4),
        yaw,
    )
    .unwrap()
}

/// Corner `i` from scalar arithmetic: bit 2 → ±l/2, bit 1 → ±w/2, bit 0 → ±h/2.
pub fn scalar_corner(b: &OrientedBox3D, i: usize) -> Vec3 {
    let sl = if i & 4 != 0 { 0.5 } else { -0.5 };
    let sw = if i & 2 != 0 { 0.5 } else { -0.5 };
    let sh = if i & 1 != 0 { 0.5 } else { -0.5 };
    let (x, y, z) = (sl * b.l, sw * b.w, sh * b.h);
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    [b.cx + c * x - s * y, b.cy + s * x + c * y, b.cz + z]
}

fn inside_footprint(b: &OrientedBox3D, x: f64, y: f64) -> bool {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= 0.5 * b.l && v.abs() <= 0.5 * b.w
}

fn inside(b: &OrientedBox3D, p: Vec3) -> bool {
    inside_footprint(b, p[0], p[1]) && (p[2] - b.cz).abs() <= 0.5 * b.h
}

fn bounds(boxes: &[&OrientedBox3D]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for b in boxes {
        for i in 0..8 {
            let p = scalar_corner(b, i);
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    (lo, hi)
}

fn ratio(both: usize, in_a: usize, in_b: usize) -> f64 {
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Footprint IoU from `n` uniform samples over the joint bounding rectangle.
pub fn monte_carlo_iou_bev(a: &OrientedBox3D, b: &OrientedBox3D, n: usize, rng: &mut Rng) -> f64 {
    let (lo, hi) = bounds(&[a, b]);
    let (mut in_a, mut in_b, mut both) = (0, 0, 0);
    for _ in 0..n {
        let x = rng.random_range(lo[0]..hi[0]);
        let y = rng.random_range(lo[1]..hi[1]);
        let (ia, ib) = (inside_footprint(a, x, y), inside_footprint(b, x, y));
        in_a += usize::from(ia);
        in_b += usize::from(ib);
        both += usize::from(ia && ib);
    }
    ratio(both, in_a, in_b)
}

/// Volume IoU from `n` uniform samples over the joint bounding box.
pub fn monte_carlo_iou_3d(a: &OrientedBox3D, b: &OrientedBox3D, n: usize, rng: &mut Rng) -> f64 {
    let (lo, hi) = bounds(&[a, b]);
    let (mut in_a, mut in_b, mut both) = (0, 0, 0);
    for _ in 0..n {
        let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), rng.random_range(lo[2]..hi[2])];
        let (ia, ib) = (inside(a, p), inside(b, p));
        in_a += usize::from(ia);
        in_b += usize::from(ib);
        both += usize::from(ia && ib);
    }
    ratio(both, in_a, in_b)
}

/// One prediction for the brute-force evaluator.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBox {
    pub bbox: OrientedBox3D,
    pub confidence: f64,
}

/// One ground truth for the brute-force evaluator.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBox {
    pub bbox: OrientedBox3D,
    /// False when the box exists but does not count at this level.
    pub counted: bool,
}

/// Per-prediction verdict of the brute-force matcher: Some(true) TP,
/// Some(false) FP, None absorbed by an uncounted ground truth.
pub fn brute_force_verdicts(
    preds: &[ScoredBox],
    gts: &[LabeledBox],
    iou: impl Fn(&OrientedBox3D, &OrientedBox3D) -> f64,
    threshold: f64,
) -> Vec<Option<bool>> {
    // Enumerate every injective partial assignment and keep the one whose
    // per-prediction quality vector is lexicographically largest, in
    // prediction order. Quality: (counted match, IoU) beats (uncounted, IoU)
    // beats no match.
    let n = preds.len();
    let table: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| iou(&p.bbox, &g.bbox)).collect()).collect();
    let quality = |i: usize, choice: Option<usize>| -> (u8, f64) {
        match choice {
            None => (0, 0.0),
            Some(j) => (if gts[j].counted { 2 } else { 1 }, table[i][j]),
        }
    };
    let mut best: Option<(Vec<(u8, f64)>, Vec<Option<usize>>)> = None;
    let mut current = vec![None; n];
    fn recurse(
        i: usize,
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        table: &[Vec<f64>],
        threshold: f64,
        visit: &mut dyn FnMut(&[Option<usize>]),
    ) {
        if i == current.len() {
            visit(current);
            return;
        }
        current[i] = None;
        recurse(i + 1, current, used, table, threshold, visit);
        for j in 0..used.len() {
            if !used[j] && table[i][j] >= threshold {
                used[j] = true;
                current[i] = Some(j);
                recurse(i + 1, current, used, table, threshold, visit);
                used[j] = false;
            }
        }
        current[i] = None;
    }
    let mut used = vec![false; gts.len()];
    recurse(0, &mut current, &mut used, &table, threshold, &mut |assign| {
        let q: Vec<(u8, f64)> = assign.iter().enumerate().map(|(i, c)| quality(i, *c)).collect();
        let better = match &best {
            None => true,
            Some((bq, _)) => q.partial_cmp(bq) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((q, assign.to_vec()));
        }
    });
    let (_, assign) = best.expect("the empty assignment always exists");
    assign
        .iter()
        .map(|c| match c {
            None => Some(false),
            Some(j) if gts[*j].counted => Some(true),
            Some(_) => None,
        })
        .collect()
}

/// Interpolated AP in percent from pooled `(confidence, is_tp)` pairs:
/// precision and recall are recounted from scratch at every distinct
/// confidence threshold, then the envelope is sampled at `k / steps`.
pub fn brute_force_ap(scored: &[(f64, bool)], num_gt: usize, samples: &[usize], steps: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(usize, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count();
            (tp, tp as f64 / kept.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for &k in samples {
        let mut best = 0.0f64;
        for &(tp, p) in &points {
            if tp * steps >= k * num_gt && p > best {
                best = p;
            }
        }
        sum += best;
    }
    100.0 * sum / samples.len() as f64
}

/// Pearson correlation of average ranks, written out longhand.
pub fn spearman_reference(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
