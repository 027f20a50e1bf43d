use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::camera::{CameraModel, EgoState};
use super::render::{render_all, ObjectCentroid};
use super::world::{make_world_with, Scenario, WorldConfig};
use crate::error::{Error, Result};
use crate::flowio::{
    read_flo, read_mask_ppm, read_ppm, write_flo, write_mask_ppm, write_ppm, FlowField, Mask, RgbImage,
};
use crate::geometry::{BBox, GtBox, MotionClass};

/// One labeled box; `x, y` is the box center in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub motion: MotionClass,
    pub occlusion: f64,
}

impl From<&GtBox> for LabelBox {
    fn from(g: &GtBox) -> Self {
        LabelBox {
            id: g.id,
            x: g.bbox.cx,
            y: g.bbox.cy,
            w: g.bbox.w,
            h: g.bbox.h,
            motion: g.motion,
            occlusion: g.occlusion,
        }
    }
}

impl From<&LabelBox> for GtBox {
    fn from(l: &LabelBox) -> Self {
        GtBox {
            id: l.id,
            bbox: BBox::new(l.x, l.y, l.w, l.h),
            motion: l.motion,
            occlusion: l.occlusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame: usize,
    pub sequence: usize,
    pub boxes: Vec<LabelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCentroids {
    pub frame: usize,
    pub sequence: usize,
    pub objects: Vec<ObjectCentroid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryEntry {
    pub frame: usize,
    pub sequence: usize,
    #[serde(flatten)]
    pub ego: EgoState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: usize,
    pub seed: u64,
    pub first_frame: usize,
    pub frames: usize,
}

impl SequenceEntry {
    pub fn frame_range(&self) -> std::ops::Range<usize> {
        self.first_frame..self.first_frame + self.frames
    }
}

/// Contents of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub frames: usize,
    pub dt: f64,
    pub camera: CameraModel,
    pub sequences: Vec<SequenceEntry>,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("index.json"))
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("dataset has no split {name:?}")))
    }

    /// Sequence containing a global frame index.
    pub fn sequence_of(&self, frame: usize) -> Option<&SequenceEntry> {
        self.sequences.iter().find(|s| s.frame_range().contains(&frame))
    }
}

/// How many frames to generate and how to cut them into sequences and splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub frames: usize,
    pub seq_len: usize,
    pub n_objects: usize,
    /// Fraction of sequences held out as the `val` split.
    pub val_fraction: f64,
    pub world: WorldConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            frames: 250,
            seq_len: 10,
            n_objects: 6,
            val_fraction: 0.2,
            world: WorldConfig::default(),
        }
    }
}

pub fn frame_name(frame: usize) -> String {
    format!("{frame:06}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn mkdir(path: PathBuf) -> Result<PathBuf> {
    fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Samples one scenario per sequence.
pub fn generate_scenarios(spec: &DatasetSpec) -> Result<Vec<Scenario>> {
    if spec.frames == 0 || spec.seq_len == 0 {
        return Err(Error::Config("frames and seq_len must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction {} not in [0, 1)",
            spec.val_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut left = spec.frames;
    while left > 0 {
        let n = left.min(spec.seq_len);
        out.push(make_world_with(rng.random(), spec.n_objects, n, &spec.world)?);
        left -= n;
    }
    Ok(out)
}

/// Writes scenarios as consecutive sequences. The last `val_sequences`
/// sequences form the `val` split, the rest `train`.
pub fn export_dataset(scenarios: &[Scenario], val_sequences: usize, dir: &Path) -> Result<DatasetIndex> {
    let first = scenarios
        .first()
        .ok_or_else(|| Error::Invalid("nothing to export".into()))?;
    if scenarios.iter().any(|s| s.camera != first.camera || s.dt != first.dt) {
        return Err(Error::Invalid("all sequences must share camera and dt".into()));
    }
    let frames_dir = mkdir(dir.join("frames"))?;
    let flow_dir = mkdir(dir.join("flow"))?;
    let masks_dir = mkdir(dir.join("masks"))?;
    let labels_dir = mkdir(dir.join("labels"))?;
    let cent_dir = mkdir(dir.join("centroids"))?;

    let mut sequences = Vec::new();
    let mut next = 0;
    for (id, sc) in scenarios.iter().enumerate() {
        sequences.push(SequenceEntry {
            id,
            seed: sc.seed,
            first_frame: next,
            frames: sc.frames,
        });
        next += sc.frames;
    }
    let odometry: Vec<Vec<OdometryEntry>> = scenarios
        .par_iter()
        .zip(&sequences)
        .map(|(sc, seq)| -> Result<Vec<OdometryEntry>> {
            let mut odo = Vec::with_capacity(sc.frames);
            for (t, s) in render_all(sc)?.into_iter().enumerate() {
                let g = seq.first_frame + t;
                let name = frame_name(g);
                write_ppm(&frames_dir.join(format!("{name}.ppm")), &s.rgb)?;
                write_flo(&flow_dir.join(format!("{name}.flo")), &s.flow)?;
                write_mask_ppm(&masks_dir.join(format!("{name}.ppm")), &s.motion_mask)?;
                let labels = FrameLabels {
                    frame: g,
                    sequence: seq.id,
                    boxes: s.boxes.iter().map(LabelBox::from).collect(),
                };
                write_json(&labels_dir.join(format!("{name}.json")), &labels)?;
                let cents = FrameCentroids {
                    frame: g,
                    sequence: seq.id,
                    objects: s.centroids,
                };
                write_json(&cent_dir.join(format!("{name}.json")), &cents)?;
                odo.push(OdometryEntry {
                    frame: g,
                    sequence: seq.id,
                    ego: s.ego,
                });
            }
            Ok(odo)
        })
        .collect::<Result<_>>()?;
    let odometry: Vec<OdometryEntry> = odometry.into_iter().flatten().collect();
    write_json(&dir.join("odometry.json"), &odometry)?;

    let n_val = val_sequences.min(sequences.len().saturating_sub(1));
    let cut = sequences.len() - n_val;
    let mut splits = BTreeMap::new();
    splits.insert(
        "train".to_string(),
        sequences[..cut].iter().flat_map(|s| s.frame_range()).collect(),
    );
    splits.insert(
        "val".to_string(),
        sequences[cut..].iter().flat_map(|s| s.frame_range()).collect(),
    );
    let index = DatasetIndex {
        frames: next,
        dt: first.dt,
        camera: first.camera,
        sequences,
        splits,
    };
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

/// Generates and exports a dataset in one go.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetIndex> {
    let scenarios = generate_scenarios(spec)?;
    let n_val = (spec.val_fraction * scenarios.len() as f64).round() as usize;
    export_dataset(&scenarios, n_val, dir)
}

/// One frame read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFrame {
    pub frame: usize,
    pub rgb: RgbImage,
    pub flow: FlowField,
    pub mask: Mask,
    pub boxes: Vec<GtBox>,
}

pub fn read_labels(dir: &Path, frame: usize) -> Result<FrameLabels> {
    read_json(&dir.join("labels").join(format!("{}.json", frame_name(frame))))
}

pub fn read_centroids(dir: &Path, frame: usize) -> Result<FrameCentroids> {
    read_json(&dir.join("centroids").join(format!("{}.json", frame_name(frame))))
}

pub fn read_odometry(dir: &Path) -> Result<Vec<OdometryEntry>> {
    read_json(&dir.join("odometry.json"))
}

pub fn load_frame(dir: &Path, frame: usize) -> Result<StoredFrame> {
    let name = frame_name(frame);
    let rgb = read_ppm(&dir.join("frames").join(format!("{name}.ppm")))?;
    let flow = read_flo(&dir.join("flow").join(format!("{name}.flo")))?;
    let mask = read_mask_ppm(&dir.join("masks").join(format!("{name}.ppm")))?;
    let labels = read_labels(dir, frame)?;
    if (flow.width, flow.height) != (rgb.width, rgb.height) || (mask.width, mask.height) != (rgb.width, rgb.height) {
        return Err(Error::Invalid(format!(
            "frame {name}: image, flow and mask sizes differ"
        )));
    }
    Ok(StoredFrame {
        frame,
        rgb,
        flow,
        mask,
        boxes: labels.boxes.iter().map(GtBox::from).collect(),
    })
}
