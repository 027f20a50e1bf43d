//! Segmentation and detection metrics.
//!
//! Pixel metrics are reported for the moving class plus the class-mean IoU
//! over {background, moving}. Static/moving AP uses the matched-box protocol:
//! detections are first matched to ground truth ignoring motion class, and
//! only matched detections enter the per-class precision-recall curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::Mask;
use crate::geometry::{BBox, Detection, GtBox, MotionClass};

/// Raw confusion counts for the moving class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::shape(
                "pixel_metrics",
                format!("pred {}x{} vs gt {}x{}", pred.width, pred.height, gt.width, gt.height),
            ));
        }
        let mut c = PixelCounts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &PixelCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn metrics(&self) -> PixelMetrics {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        // A class absent from both masks is perfectly segmented.
        let class_iou = |inter: u64, union: u64| if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let iou_moving = class_iou(self.tp, self.tp + self.fp + self.fn_);
        let iou_background = class_iou(self.tn, self.tn + self.fp + self.fn_);
        PixelMetrics {
            precision: 100.0 * p,
            recall: 100.0 * r,
            f_score: 100.0 * f,
            mean_iou: 50.0 * (iou_moving + iou_background),
            iou_moving: 100.0 * iou_moving,
            iou_background: 100.0 * iou_background,
            counts: *self,
        }
    }
}

/// Pixel-level segmentation quality, all values in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub mean_iou: f64,
    pub iou_moving: f64,
    pub iou_background: f64,
    pub counts: PixelCounts,
}

pub fn pixel_metrics(pred: &Mask, gt: &Mask) -> Result<PixelMetrics> {
    Ok(PixelCounts::from_masks(pred, gt)?.metrics())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Greedy confidence-ordered matching. Returns, per detection, the index of
/// the matched ground truth. Each detection takes the highest-IoU unmatched
/// ground truth with IoU >= `iou_min`; ties go to the lower index.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_min: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = dets[d].bbox.iou(gt);
            if o >= iou_min && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// Area under the all-point interpolated precision-recall curve, in `[0, 1]`.
///
/// `scored` holds `(confidence, is_true_positive)` per prediction; `npos` is
/// the number of positives. Equal scores keep their input order.
pub fn average_precision(scored: &[(f64, bool)], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Static/moving AP in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap_static: f64,
    pub ap_moving: f64,
    pub map: f64,
    pub matched: usize,
    pub counts: BTreeMap<MotionClass, ClassCounts>,
}

/// Accumulates matched-box static/moving results over many frames.
#[derive(Debug, Clone, Default)]
pub struct StaticMovingEval {
    iou_min: f64,
    scored: BTreeMap<MotionClass, Vec<(f64, bool)>>,
    npos: BTreeMap<MotionClass, usize>,
    matched: usize,
}

impl StaticMovingEval {
    pub fn new(iou_min: f64) -> Self {
        StaticMovingEval {
            iou_min,
            ..Default::default()
        }
    }

    /// Adds one frame. Detections without a motion class count as static.
    pub fn add_frame(&mut self, dets: &[Detection], gts: &[GtBox]) {
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let matches = match_detections(dets, &boxes, self.iou_min);
        for (d, m) in dets.iter().zip(matches) {
            let Some(g) = m else { continue };
            self.matched += 1;
            let truth = gts[g].motion;
            let pred = d.motion_class.unwrap_or(MotionClass::Static);
            *self.npos.entry(truth).or_default() += 1;
            self.scored.entry(pred).or_default().push((d.confidence, pred == truth));
        }
    }

    pub fn finish(&self) -> DetectionMetrics {
        let mut counts = BTreeMap::new();
        let mut ap = BTreeMap::new();
        for c in MotionClass::ALL {
            let scored = self.scored.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            let npos = self.npos.get(&c).copied().unwrap_or(0);
            let tp = scored.iter().filter(|s| s.1).count();
            counts.insert(
                c,
                ClassCounts {
                    tp,
                    fp: scored.len() - tp,
                    fn_: npos - tp,
                },
            );
            ap.insert(c, 100.0 * average_precision(scored, npos));
        }
        let (s, m) = (ap[&MotionClass::Static], ap[&MotionClass::Moving]);
        DetectionMetrics {
            ap_static: s,
            ap_moving: m,
            map: 0.5 * (s + m),
            matched: self.matched,
            counts,
        }
    }
}

/// Single-frame convenience wrapper around [`StaticMovingEval`].
pub fn eval_static_moving(dets: &[Detection], gts: &[GtBox], iou_min: f64) -> DetectionMetrics {
    let mut e = StaticMovingEval::new(iou_min);
    e.add_frame(dets, gts);
    e.finish()
}

/// Difficulty buckets with thresholds scaled to a 64-pixel-high image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// `(minimum box height in px, maximum occlusion fraction)`.
    pub fn limits(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (14.0, 0.15),
            Difficulty::Moderate => (8.0, 0.35),
            Difficulty::Hard => (8.0, 0.6),
        }
    }

    pub fn admits(self, gt: &GtBox) -> bool {
        let (min_h, max_occ) = self.limits();
        gt.bbox.h >= min_h && gt.occlusion <= max_occ
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

pub fn difficulty_filter(gts: &[GtBox], level: Difficulty) -> Vec<GtBox> {
    gts.iter().copied().filter(|g| level.admits(g)).collect()
}

/// Class-agnostic vehicle AP at one difficulty level. Detections matched to
/// ground truth outside the level are ignored rather than counted as false.
#[derive(Debug, Clone, Default)]
pub struct VehicleApEval {
    iou_min: f64,
    level: Option<Difficulty>,
    scored: Vec<(f64, bool)>,
    npos: usize,
}

impl VehicleApEval {
    pub fn new(iou_min: f64, level: Difficulty) -> Self {
        VehicleApEval {
            iou_min,
            level: Some(level),
            ..Default::default()
        }
    }

    pub fn add_frame(&mut self, dets: &[Detection], gts: &[GtBox]) {
        let level = self.level.expect("constructed with a level");
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        self.npos += gts.iter().filter(|g| level.admits(g)).count();
        for (d, m) in dets.iter().zip(match_detections(dets, &boxes, self.iou_min)) {
            match m {
                Some(g) if !level.admits(&gts[g]) => {}
                Some(_) => self.scored.push((d.confidence, true)),
                None => self.scored.push((d.confidence, false)),
            }
        }
    }

    /// AP in percent.
    pub fn finish(&self) -> f64 {
        100.0 * average_precision(&self.scored, self.npos)
    }
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel: Option<PixelMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
    /// Vehicle AP (percent) per difficulty level.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub vehicle_ap: BTreeMap<Difficulty, f64>,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.pixel {
            let _ = writeln!(
                s,
                "{:>10} | {:>10} | {:>10} | {:>10} | {:>10}",
                "Precision", "Recall", "F-Score", "IoU", "mIoU"
            );
            let _ = writeln!(
                s,
                "{:>10.2} | {:>10.2} | {:>10.2} | {:>10.2} | {:>10.2}",
                p.precision, p.recall, p.f_score, p.iou_moving, p.mean_iou
            );
        }
        if let Some(d) = &self.detection {
            let _ = writeln!(s, "{:>10} | {:>10} | {:>10}", "AP Static", "AP Moving", "mAP");
            let _ = writeln!(s, "{:>10.2} | {:>10.2} | {:>10.2}", d.ap_static, d.ap_moving, d.map);
        }
        if !self.vehicle_ap.is_empty() {
            let head: Vec<String> = self.vehicle_ap.keys().map(|k| format!("{:>10}", k.as_str())).collect();
            let vals: Vec<String> = self.vehicle_ap.values().map(|v| format!("{v:>10.2}")).collect();
            let _ = writeln!(s, "{}", head.join(" | "));
            let _ = writeln!(s, "{}", vals.join(" | "));
        }
        s
    }
}
