//! Independent brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use modkit::evalkit::{average_precision, match_detections, pixel_metrics, MetricsReport};
use modkit::flowio::Mask;
use modkit::{BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Middlebury wheel built from its hue keyframes: between consecutive
/// primaries one channel ramps linearly (integer floor) while the others hold.
pub fn reference_wheel() -> Vec<[u8; 3]> {
    // (segment length, start color, channel that ramps, ramps up?)
    let keys: [(usize, [i32; 3], usize, bool); 6] = [
        (15, [255, 0, 0], 1, true),
        (6, [255, 255, 0], 0, false),
        (4, [0, 255, 0], 2, true),
        (11, [0, 255, 255], 1, false),
        (13, [0, 0, 255], 0, true),
        (6, [255, 0, 255], 2, false),
    ];
    let mut table = Vec::new();
    for (len, start, ch, up) in keys {
        for i in 0..len {
            let mut c = start;
            let step = (255 * i as i32) / len as i32;
            c[ch] = if up { step } else { 255 - step };
            table.push([c[0] as u8, c[1] as u8, c[2] as u8]);
        }
    }
    table
}

/// Integer-corner box on a small grid.
pub fn grid_box(rng: &mut ChaCha8Rng, size: i32) -> BBox {
    let x0 = rng.random_range(0..size - 1);
    let y0 = rng.random_range(0..size - 1);
    let x1 = rng.random_range(x0 + 1..=size);
    let y1 = rng.random_range(y0 + 1..=size);
    BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

/// IoU by counting unit cells of integer-corner boxes.
pub fn iou_by_cells(a: &BBox, b: &BBox, size: i32) -> f64 {
    let inside = |bx: &BBox, x: i32, y: i32| {
        (x as f64) >= bx.x0() && (x as f64) < bx.x1() && (y as f64) >= bx.y0() && (y as f64) < bx.y1()
    };
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..size {
        for x in 0..size {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP by sweeping every distinct score threshold: each threshold gives one
/// (recall, precision) point; precision at recall r is the best precision of
/// any point with recall >= r.
pub fn ap_threshold_sweep(scored: &[(f64, bool)], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<&(f64, bool)> = scored.iter().filter(|s| s.0 >= t).collect();
            let tp = kept.iter().filter(|s| s.1).count() as f64;
            (tp / npos as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|pt| pt.0 >= r).map(|pt| pt.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Exhaustive best assignment: maximize matched count, then total IoU.
/// Returns (count, total IoU).
pub fn best_assignment(dets: &[BBox], gts: &[BBox], iou_min: f64) -> (usize, f64) {
    fn rec(d: usize, dets: &[BBox], gts: &[BBox], used: &mut Vec<bool>, iou_min: f64) -> (usize, f64) {
        if d == dets.len() {
            return (0, 0.0);
        }
        let mut best = rec(d + 1, dets, gts, used, iou_min);
        for g in 0..gts.len() {
            let o = dets[d].iou(&gts[g]);
            if used[g] || o < iou_min {
                continue;
            }
            used[g] = true;
            let (c, s) = rec(d + 1, dets, gts, used, iou_min);
            used[g] = false;
            let cand = (c + 1, s + o);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 > best.1 + 1e-12) {
                best = cand;
            }
        }
        best
    }
    rec(0, dets, gts, &mut vec![false; gts.len()], iou_min)
}

/// Checks a matching against the greedy definition: walking detections by
/// descending confidence (lower index first on ties), each one holds the
/// highest-IoU ground truth (lowest index on ties) among those not held by an
/// earlier detection, or nothing when none reaches `iou_min`.
pub fn is_greedy_matching(dets: &[Detection], gts: &[BBox], iou_min: f64, got: &[Option<usize>]) -> bool {
    if got.len() != dets.len() {
        return false;
    }
    for d in 0..dets.len() {
        let earlier =
            |e: usize| dets[e].confidence > dets[d].confidence || (dets[e].confidence == dets[d].confidence && e < d);
        let held: Vec<usize> = (0..dets.len()).filter(|&e| earlier(e)).filter_map(|e| got[e]).collect();
        let mut want = None;
        let mut best = f64::NEG_INFINITY;
        for (g, gt) in gts.iter().enumerate() {
            let o = dets[d].bbox.iou(gt);
            if !held.contains(&g) && o >= iou_min && o > best {
                best = o;
                want = Some(g);
            }
        }
        if got[d] != want {
            return false;
        }
    }
    true
}

/// Counts TP/FP/FN/TN directly and applies the metric definitions.
pub fn pixel_oracle(pred: &[u8], gt: &[u8]) -> (f64, f64, f64, f64, f64) {
    let count = |p: u8, g: u8| pred.iter().zip(gt).filter(|(&a, &b)| a == p && b == g).count() as f64;
    let (tp, fp, fn_, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let iou_fg = if tp + fp + fn_ > 0.0 { tp / (tp + fp + fn_) } else { 1.0 };
    let iou_bg = if tn + fp + fn_ > 0.0 { tn / (tn + fp + fn_) } else { 1.0 };
    (
        100.0 * p,
        100.0 * r,
        100.0 * f,
        50.0 * (iou_fg + iou_bg),
        100.0 * iou_fg,
    )
}

/// Outcome of running the four randomized metric-oracle families.
#[derive(Debug, Default)]
pub struct MetricOracleSummary {
    pub iou_cases: usize,
    pub iou_max_err: f64,
    pub ap_cases: usize,
    pub ap_max_err: f64,
    pub pixel_cases: usize,
    pub pixel_max_err: f64,
    pub match_cases: usize,
    pub match_greedy_optimal: usize,
    pub match_failures: usize,
    pub match_oracle_mismatches: usize,
}

fn det_of(b: BBox, conf: f64) -> Detection {
    Detection {
        bbox: b,
        confidence: conf,
        motion_class: None,
        cell: 0,
    }
}

pub fn run_metric_oracles(instances: usize, seed: u64) -> MetricOracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = MetricOracleSummary::default();
    for _ in 0..instances {
        // IoU
        let (a, b) = (grid_box(&mut rng, 8), grid_box(&mut rng, 8));
        s.iou_max_err = s.iou_max_err.max((a.iou(&b) - iou_by_cells(&a, &b, 8)).abs());
        s.iou_cases += 1;

        // AP
        let n = rng.random_range(1..=8);
        let scored: Vec<(f64, bool)> = (0..n).map(|_| (rng.random::<f64>(), rng.random_bool(0.5))).collect();
        let npos = scored.iter().filter(|x| x.1).count() + rng.random_range(0..3);
        let got = average_precision(&scored, npos);
        s.ap_max_err = s.ap_max_err.max((got - ap_threshold_sweep(&scored, npos)).abs());
        s.ap_cases += 1;

        // pixel metrics
        let (w, h) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let pred: Vec<u8> = (0..w * h).map(|_| rng.random_bool(0.4) as u8).collect();
        let gt: Vec<u8> = (0..w * h).map(|_| rng.random_bool(0.4) as u8).collect();
        let m = pixel_metrics(
            &Mask::new(w, h, pred.clone()).unwrap(),
            &Mask::new(w, h, gt.clone()).unwrap(),
        )
        .unwrap();
        let o = pixel_oracle(&pred, &gt);
        for (x, y) in [
            (m.precision, o.0),
            (m.recall, o.1),
            (m.f_score, o.2),
            (m.mean_iou, o.3),
            (m.iou_moving, o.4),
        ] {
            s.pixel_max_err = s.pixel_max_err.max((x - y).abs());
        }
        s.pixel_cases += 1;

        // matching
        let nd = rng.random_range(0..=4);
        let ng = rng.random_range(0..=4);
        let gts: Vec<BBox> = (0..ng).map(|_| grid_box(&mut rng, 8)).collect();
        let dets: Vec<Detection> = (0..nd)
            .map(|i| {
                // perturbations of gts so that matches actually occur
                let b = if ng > 0 && rng.random_bool(0.7) {
                    let g = gts[rng.random_range(0..ng)];
                    BBox::new(
                        g.cx + rng.random_range(-1..=1) as f64 * 0.5,
                        g.cy + rng.random_range(-1..=1) as f64 * 0.5,
                        g.w,
                        g.h,
                    )
                } else {
                    grid_box(&mut rng, 8)
                };
                det_of(b, 1.0 - i as f64 * 0.1)
            })
            .collect();
        let m = match_detections(&dets, &gts, 0.5);
        // validity: distinct gts, IoU over threshold
        let mut used = vec![false; ng];
        let mut valid = true;
        let (mut cnt, mut tot) = (0usize, 0.0);
        for (d, g) in m.iter().enumerate() {
            if let Some(g) = *g {
                let o = dets[d].bbox.iou(&gts[g]);
                valid &= !used[g] && o >= 0.5;
                used[g] = true;
                cnt += 1;
                tot += o;
            }
        }
        // maximality: no unmatched det could still take an unmatched gt
        for (d, g) in m.iter().enumerate() {
            if g.is_none() {
                valid &= !(0..ng).any(|k| !used[k] && dets[d].bbox.iou(&gts[k]) >= 0.5);
            }
        }
        let db: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let best = best_assignment(&db, &gts, 0.5);
        if cnt == best.0 && (tot - best.1).abs() < 1e-9 {
            s.match_greedy_optimal += 1;
        }
        if !valid {
            s.match_failures += 1;
        }
        if !is_greedy_matching(&dets, &gts, 0.5, &m) {
            s.match_oracle_mismatches += 1;
        }
        s.match_cases += 1;
    }
    s
}

/// Renders a report's table for printing.
pub fn table(report: &MetricsReport) -> String {
    report.to_table()
}
