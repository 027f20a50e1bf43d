//! Static/moving vehicle labels from 2D boxes, 3D centroids and odometry.
//!
//! Boxes are associated between consecutive frames by IoU and chained into
//! tracks. Each association yields a world-frame velocity; a track is moving
//! when enough consecutive velocities exceed the speed threshold.

mod io;

pub use io::{annotate_dataset, read_mod_labels, AnnotateSummary, ModLabelBox, ModLabels};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::Mask;
use crate::geometry::{BBox, MotionClass};
use crate::scenegen::EgoState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub iou_min: f64,
    /// Speeds strictly above this are moving (m/s).
    pub speed_thresh: f64,
    /// Consecutive moving verdicts needed for a moving track.
    pub window: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            iou_min: 0.5,
            speed_thresh: 1.0,
            window: 3,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_min)
            || self.speed_thresh.is_nan()
            || self.speed_thresh < 0.0
            || self.window == 0
        {
            return Err(Error::Config(format!("invalid annotator config {self:?}")));
        }
        Ok(())
    }
}

/// One box seen in one frame, with its camera-frame centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Label id, carried along for reporting; association never reads it.
    pub id: u32,
    pub bbox: BBox,
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub ego: EgoState,
    pub boxes: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Static,
    Moving,
    Unknown,
}

/// A chain of associated observations: `(frame, box index)` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub steps: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionLabel {
    pub id: u32,
    pub per_frame: Vec<(usize, Verdict)>,
    pub verdict: MotionClass,
}

/// Greedy association by descending IoU. Pairs below `iou_min` stay
/// unmatched and each box is used at most once. Ties are broken by the
/// unordered index pair, so swapping the arguments swaps the pairs.
pub fn associate(prev: &[BBox], cur: &[BBox], iou_min: f64) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in prev.iter().enumerate() {
        for (j, b) in cur.iter().enumerate() {
            let o = a.iou(b);
            if o >= iou_min && o > 0.0 {
                cand.push((o, i, j));
            }
        }
    }
    cand.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(x.1.min(x.2).cmp(&y.1.min(y.2)))
            .then(x.1.max(x.2).cmp(&y.1.max(y.2)))
            .then(x.1.cmp(&y.1))
    });
    let (mut used_a, mut used_b) = (vec![false; prev.len()], vec![false; cur.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Camera-frame point (x right, y down, z forward) to world axes, up to the
/// constant camera mounting height, which cancels in differences.
fn camera_to_world(ego: &EgoState, c: [f64; 3]) -> [f64; 3] {
    let (s, co) = ego.yaw.sin_cos();
    let (f, l, u) = (c[2], -c[0], -c[1]);
    [ego.x + co * f - s * l, ego.y + s * f + co * l, u]
}

/// World-frame velocity of an object from two camera-frame centroids.
pub fn object_velocity(
    c_prev: [f64; 3],
    c_cur: [f64; 3],
    ego_prev: &EgoState,
    ego_cur: &EgoState,
    dt: f64,
) -> [f64; 3] {
    let a = camera_to_world(ego_prev, c_prev);
    let b = camera_to_world(ego_cur, c_cur);
    [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt, (b[2] - a[2]) / dt]
}

/// Moving iff the speed strictly exceeds the threshold.
pub fn classify(velocity: [f64; 3], speed_thresh: f64) -> Verdict {
    let speed = velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
    if speed > speed_thresh {
        Verdict::Moving
    } else {
        Verdict::Static
    }
}

/// Moving iff some run of consecutive moving verdicts reaches `window`.
pub fn consistent_verdict(per_frame: &[Verdict], window: usize) -> MotionClass {
    let mut run = 0;
    for v in per_frame {
        run = if *v == Verdict::Moving { run + 1 } else { 0 };
        if run >= window {
            return MotionClass::Moving;
        }
    }
    MotionClass::Static
}

/// Chains frame-to-frame associations into tracks.
pub fn build_tracks(frames: &[FrameObservations], iou_min: f64) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    // track index owning each box of the previous frame
    let mut owner: Vec<usize> = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        let mut next_owner = vec![usize::MAX; fr.boxes.len()];
        if f > 0 {
            let prev: Vec<BBox> = frames[f - 1].boxes.iter().map(|o| o.bbox).collect();
            let cur: Vec<BBox> = fr.boxes.iter().map(|o| o.bbox).collect();
            for (i, j) in associate(&prev, &cur, iou_min) {
                let t = owner[i];
                tracks[t].steps.push((f, j));
                next_owner[j] = t;
            }
        }
        for (j, o) in next_owner.iter_mut().enumerate() {
            if *o == usize::MAX {
                *o = tracks.len();
                tracks.push(Track {
                    id: fr.boxes[j].id,
                    steps: vec![(f, j)],
                });
            }
        }
        owner = next_owner;
    }
    tracks
}

/// Box-level motion mask: pixels whose center lies inside any box.
pub fn box_mask(width: usize, height: usize, boxes: &[BBox]) -> Mask {
    let mut m = Mask::zeros(width, height);
    for b in boxes {
        for y in 0..height {
            let yc = y as f64 + 0.5;
            if yc < b.y0() || yc >= b.y1() {
                continue;
            }
            for x in 0..width {
                let xc = x as f64 + 0.5;
                if xc >= b.x0() && xc < b.x1() {
                    m.data[y * width + x] = 1;
                }
            }
        }
    }
    m
}

/// Output of the pipeline on one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceAnnotation {
    pub tracks: Vec<Track>,
    pub labels: Vec<MotionLabel>,
    /// Final verdict per frame per box, aligned with the input boxes.
    pub frame_verdicts: Vec<Vec<MotionClass>>,
}

impl SequenceAnnotation {
    pub fn masks(&self, frames: &[FrameObservations], width: usize, height: usize) -> Vec<Mask> {
        frames
            .iter()
            .zip(&self.frame_verdicts)
            .map(|(fr, v)| {
                let moving: Vec<BBox> = fr
                    .boxes
                    .iter()
                    .zip(v)
                    .filter(|(_, c)| **c == MotionClass::Moving)
                    .map(|(o, _)| o.bbox)
                    .collect();
                box_mask(width, height, &moving)
            })
            .collect()
    }
}

/// Runs association, velocity estimation, classification and the
/// consistency filter over one sequence.
pub fn annotate_sequence(frames: &[FrameObservations], cfg: &AnnotatorConfig) -> Result<SequenceAnnotation> {
    cfg.validate()?;
    for w in frames.windows(2) {
        if w[1].ego.timestamp.partial_cmp(&w[0].ego.timestamp) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Invalid(format!(
                "timestamps must increase, got {} then {}",
                w[0].ego.timestamp, w[1].ego.timestamp
            )));
        }
    }
    let tracks = build_tracks(frames, cfg.iou_min);
    let mut labels = Vec::with_capacity(tracks.len());
    let mut frame_verdicts: Vec<Vec<MotionClass>> = frames
        .iter()
        .map(|f| vec![MotionClass::Static; f.boxes.len()])
        .collect();
    for tr in &tracks {
        let mut per_frame = Vec::with_capacity(tr.steps.len());
        per_frame.push((tr.steps[0].0, Verdict::Unknown));
        for w in tr.steps.windows(2) {
            let ((f0, i0), (f1, i1)) = (w[0], w[1]);
            let (a, b) = (&frames[f0], &frames[f1]);
            let dt = b.ego.timestamp - a.ego.timestamp;
            let v = object_velocity(a.boxes[i0].centroid, b.boxes[i1].centroid, &a.ego, &b.ego, dt);
            per_frame.push((f1, classify(v, cfg.speed_thresh)));
        }
        let verdicts: Vec<Verdict> = per_frame.iter().map(|p| p.1).collect();
        let verdict = consistent_verdict(&verdicts, cfg.window);
        for &(f, i) in &tr.steps {
            frame_verdicts[f][i] = verdict;
        }
        labels.push(MotionLabel {
            id: tr.id,
            per_frame,
            verdict,
        });
    }
    Ok(SequenceAnnotation {
        tracks,
        labels,
        frame_verdicts,
    })
}
