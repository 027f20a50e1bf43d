use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{annotate_sequence, AnnotatorConfig, FrameObservations, Observation};
use crate::error::{Error, Result};
use crate::flowio::write_mask_ppm;
use crate::geometry::{BBox, MotionClass};
use crate::scenegen::{frame_name, read_centroids, read_json, read_labels, read_odometry, DatasetIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModLabelBox {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Index of the annotator track within the sequence.
    pub track: usize,
    pub motion: MotionClass,
}

impl ModLabelBox {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Contents of `mod_labels/NNNNNN.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModLabels {
    pub frame: usize,
    pub sequence: usize,
    pub boxes: Vec<ModLabelBox>,
}

/// Counts from one dataset annotation run. `disagreements` compares the
/// annotator's verdicts with the generator's labels box by box.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub sequences: usize,
    pub frames: usize,
    pub boxes: usize,
    pub tracks: usize,
    pub moving_tracks: usize,
    pub disagreements: usize,
}

impl AnnotateSummary {
    fn add(&mut self, o: &AnnotateSummary) {
        self.sequences += o.sequences;
        self.frames += o.frames;
        self.boxes += o.boxes;
        self.tracks += o.tracks;
        self.moving_tracks += o.moving_tracks;
        self.disagreements += o.disagreements;
    }
}

pub fn read_mod_labels(dir: &Path, frame: usize) -> Result<ModLabels> {
    read_json(&dir.join("mod_labels").join(format!("{}.json", frame_name(frame))))
}

/// Annotates every sequence of an exported dataset, writing `mod_labels/`
/// and `mod_masks/` next to the inputs.
pub fn annotate_dataset(dir: &Path, cfg: &AnnotatorConfig) -> Result<AnnotateSummary> {
    cfg.validate()?;
    let index = DatasetIndex::load(dir)?;
    let odometry = read_odometry(dir)?;
    if odometry.len() != index.frames || odometry.iter().enumerate().any(|(i, o)| o.frame != i) {
        return Err(Error::Invalid(
            "odometry.json does not list every frame in order".into(),
        ));
    }
    let labels_dir = dir.join("mod_labels");
    let masks_dir = dir.join("mod_masks");
    for d in [&labels_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let per_seq: Vec<AnnotateSummary> = index
        .sequences
        .par_iter()
        .map(|seq| -> Result<AnnotateSummary> {
            let mut frames = Vec::with_capacity(seq.frames);
            let mut truth = Vec::with_capacity(seq.frames);
            for g in seq.frame_range() {
                let labels = read_labels(dir, g)?;
                let cents = read_centroids(dir, g)?;
                let mut boxes = Vec::with_capacity(labels.boxes.len());
                for l in &labels.boxes {
                    let c = cents.objects.iter().find(|c| c.id == l.id).ok_or_else(|| {
                        Error::Invalid(format!("frame {}: box {} has no centroid", frame_name(g), l.id))
                    })?;
                    boxes.push(Observation {
                        id: l.id,
                        bbox: BBox::new(l.x, l.y, l.w, l.h),
                        centroid: c.centroid,
                    });
                }
                truth.push(labels.boxes.iter().map(|l| l.motion).collect::<Vec<_>>());
                frames.push(FrameObservations {
                    ego: odometry[g].ego,
                    boxes,
                });
            }
            let ann = annotate_sequence(&frames, cfg)?;
            let masks = ann.masks(&frames, index.camera.width, index.camera.height);
            let mut track_of: Vec<Vec<usize>> = frames.iter().map(|f| vec![0; f.boxes.len()]).collect();
            for (t, tr) in ann.tracks.iter().enumerate() {
                for &(f, i) in &tr.steps {
                    track_of[f][i] = t;
                }
            }
            let mut summary = AnnotateSummary {
                sequences: 1,
                frames: seq.frames,
                tracks: ann.tracks.len(),
                moving_tracks: ann.labels.iter().filter(|l| l.verdict == MotionClass::Moving).count(),
                ..Default::default()
            };
            for (f, g) in seq.frame_range().enumerate() {
                let boxes: Vec<ModLabelBox> = frames[f]
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(i, o)| ModLabelBox {
                        id: o.id,
                        x: o.bbox.cx,
                        y: o.bbox.cy,
                        w: o.bbox.w,
                        h: o.bbox.h,
                        track: track_of[f][i],
                        motion: ann.frame_verdicts[f][i],
                    })
                    .collect();
                summary.boxes += boxes.len();
                summary.disagreements += boxes.iter().zip(&truth[f]).filter(|(b, t)| b.motion != **t).count();
                let out = ModLabels {
                    frame: g,
                    sequence: seq.id,
                    boxes,
                };
                let path = labels_dir.join(format!("{}.json", frame_name(g)));
                fs::write(&path, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&path, e))?;
                write_mask_ppm(&masks_dir.join(format!("{}.ppm", frame_name(g))), &masks[f])?;
            }
            Ok(summary)
        })
        .collect::<Result<_>>()?;
    let mut total = AnnotateSummary::default();
    for s in &per_seq {
        total.add(s);
    }
    Ok(total)
}
