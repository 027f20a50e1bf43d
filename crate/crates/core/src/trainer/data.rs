use std::collections::BTreeMap;
use std::path::Path;

use crate::annotator::read_mod_labels;
use crate::error::{Error, Result};
use crate::flowio::{flow_to_rgb, read_mask_ppm, read_ppm, Mask, RgbImage};
use crate::geometry::GtBox;
use crate::model::{encode_targets, GridTargets, ModelConfig, MotionInput};
use crate::scenegen::{frame_name, load_frame, DatasetIndex};
use crate::tensorcore::Tensor;

use super::config::LabelSource;

/// Flow magnitude (px) that maps to full saturation in the flow image fed
/// to the network. A fixed scale keeps the encoding comparable across frames.
pub const FLOW_RGB_MAX: f32 = 16.0;

/// Maps a byte to the network input range.
pub fn normalize(v: u8) -> f32 {
    (v as f32 - 127.5) / 64.0
}

fn planar(img: &RgbImage, out: &mut Vec<f32>) {
    let plane = img.width * img.height;
    for c in 0..3 {
        out.extend((0..plane).map(|p| normalize(img.data[p * 3 + c])));
    }
}

/// One frame ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: usize,
    /// `[3, h, w]`, normalized.
    pub rgb: Vec<f32>,
    /// `[c, h, w]`, normalized flow image or stacked current/previous frame.
    pub motion: Vec<f32>,
    pub mask: Mask,
    pub boxes: Vec<GtBox>,
    pub targets: GridTargets,
}

/// Network inputs and targets for a list of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rgb: Tensor<f32>,
    pub motion: Tensor<f32>,
    pub labels: Vec<usize>,
    pub targets: Vec<GridTargets>,
}

/// A split held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub motion_input: MotionInput,
    pub labels: LabelSource,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads `split` of the dataset at `dir`, shaped for `cfg`.
    pub fn load(dir: &Path, split: &str, labels: LabelSource, cfg: &ModelConfig) -> Result<Self> {
        let index = DatasetIndex::load(dir)?;
        let frames = index.split(split)?;
        let mut samples = Vec::with_capacity(frames.len());
        for &f in frames {
            samples.push(load_sample(dir, &index, f, labels, cfg)?);
        }
        Ok(Dataset {
            height: cfg.input_h,
            width: cfg.input_w,
            motion_input: cfg.motion_input,
            labels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks samples `idx`. The motion tensor is left empty unless
    /// `with_motion` is set.
    pub fn batch(&self, idx: &[usize], with_motion: bool) -> Result<Batch> {
        let (h, w) = (self.height, self.width);
        let mc = self.motion_input.channels();
        let mut rgb = Vec::with_capacity(idx.len() * 3 * h * w);
        let mut motion = Vec::with_capacity(if with_motion { idx.len() * mc * h * w } else { 0 });
        let mut labels = Vec::with_capacity(idx.len() * h * w);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sample {i} out of range ({})", self.len())))?;
            rgb.extend_from_slice(&s.rgb);
            if with_motion {
                motion.extend_from_slice(&s.motion);
            }
            labels.extend(s.mask.data.iter().map(|&m| m as usize));
            targets.push(s.targets.clone());
        }
        let n = idx.len();
        let motion = if with_motion {
            Tensor::new(vec![n, mc, h, w], motion)?
        } else {
            Tensor::zeros(vec![0])
        };
        Ok(Batch {
            rgb: Tensor::new(vec![n, 3, h, w], rgb)?,
            motion,
            labels,
            targets,
        })
    }
}

fn load_sample(
    dir: &Path,
    index: &DatasetIndex,
    frame: usize,
    labels: LabelSource,
    cfg: &ModelConfig,
) -> Result<Sample> {
    let stored = load_frame(dir, frame)?;
    if (stored.rgb.width, stored.rgb.height) != (cfg.input_w, cfg.input_h) {
        return Err(Error::shape(
            "dataset",
            format!(
                "frame {} is {}x{}, model expects {}x{}",
                frame_name(frame),
                stored.rgb.width,
                stored.rgb.height,
                cfg.input_w,
                cfg.input_h
            ),
        ));
    }
    let (mask, boxes) = match labels {
        LabelSource::Generated => (stored.mask, stored.boxes),
        LabelSource::Annotated => {
            let name = frame_name(frame);
            let mask = read_mask_ppm(&dir.join("mod_masks").join(format!("{name}.ppm")))?;
            let verdicts: BTreeMap<u32, _> = read_mod_labels(dir, frame)?
                .boxes
                .iter()
                .map(|b| (b.id, b.motion))
                .collect();
            let boxes = stored
                .boxes
                .iter()
                .map(|g| GtBox {
                    motion: verdicts.get(&g.id).copied().unwrap_or(g.motion),
                    ..*g
                })
                .collect();
            (mask, boxes)
        }
    };
    let mut rgb = Vec::with_capacity(3 * cfg.input_h * cfg.input_w);
    planar(&stored.rgb, &mut rgb);
    let mut motion = Vec::with_capacity(cfg.motion_input.channels() * cfg.input_h * cfg.input_w);
    match cfg.motion_input {
        MotionInput::OpticalFlowRgb => planar(&flow_to_rgb(&stored.flow, Some(FLOW_RGB_MAX))?, &mut motion),
        MotionInput::ImagePair => {
            motion.extend_from_slice(&rgb);
            let first = index.sequence_of(frame).map_or(frame, |s| s.first_frame);
            if frame > first {
                let prev = read_ppm(&dir.join("frames").join(format!("{}.ppm", frame_name(frame - 1))))?;
                planar(&prev, &mut motion);
            } else {
                motion.extend_from_slice(&rgb);
            }
        }
    }
    let gt: Vec<_> = boxes.iter().map(|g| g.bbox).collect();
    Ok(Sample {
        frame,
        rgb,
        motion,
        mask,
        targets: encode_targets(&gt, cfg),
        boxes,
    })
}
