use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evalkit::{Difficulty, MetricsReport, PixelCounts, StaticMovingEval, VehicleApEval};
use crate::flowio::Mask;
use crate::geometry::Detection;
use crate::model::{classify_static_moving, decode_cells, nms, Heads, Model, Prediction};

use super::data::Dataset;

/// Inference and matching thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Cells below this vehicle probability are not decoded.
    pub min_conf: f64,
    pub nms_iou: f64,
    /// Detection to ground-truth match threshold.
    pub match_iou: f64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            min_conf: 0.1,
            nms_iou: 0.5,
            match_iou: 0.5,
            batch_size: 8,
        }
    }
}

/// Per-frame inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame: usize,
    pub mask: Option<Mask>,
    pub detections: Vec<Detection>,
}

fn check_motion(m: &Model, data: &Dataset) -> Result<()> {
    if m.config.motion_stream && m.config.seg_head && m.config.motion_input != data.motion_input {
        return Err(Error::Config(format!(
            "model wants {} motion input, dataset holds {}",
            m.config.motion_input.as_str(),
            data.motion_input.as_str()
        )));
    }
    if (m.config.input_h, m.config.input_w) != (data.height, data.width) {
        return Err(Error::shape(
            "evaluate",
            format!(
                "model input {}x{}, dataset {}x{}",
                m.config.input_w, m.config.input_h, data.width, data.height
            ),
        ));
    }
    Ok(())
}

/// Runs inference with the first segmentation-capable and the first
/// detection-capable model of `models` (possibly the same one). Detections
/// are thresholded, suppressed and labelled static/moving from the predicted
/// mask (all static when no model segments).
pub fn predict_frames(models: &[&Model], data: &Dataset, opts: &EvalOptions) -> Result<Vec<FramePrediction>> {
    let seg = models.iter().position(|m| m.config.seg_head);
    let det = models.iter().position(|m| m.config.det_head);
    if seg.is_none() && det.is_none() {
        return Err(Error::Invalid("no model to evaluate".into()));
    }
    for m in models {
        check_motion(m, data)?;
    }
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(opts.batch_size.max(1)) {
        let batch = data.batch(chunk, true)?;
        let mut preds: Vec<Prediction> = Vec::new();
        for (i, m) in models.iter().enumerate() {
            let heads = Heads {
                seg: Some(i) == seg,
                det: Some(i) == det,
            };
            if !heads.seg && !heads.det {
                preds.push(Prediction::default());
                continue;
            }
            let motion = (heads.seg && m.config.motion_stream).then_some(&batch.motion);
            preds.push(m.predict(&batch.rgb, motion, heads)?);
        }
        for (b, &si) in chunk.iter().enumerate() {
            let mask = seg.and_then(|i| preds[i].seg.as_ref()).map(|s| s.mask(b));
            let mut detections = Vec::new();
            if let Some(i) = det {
                let grid = preds[i]
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("detection model produced no grid".into()))?;
                let raw = decode_cells(grid, b, &models[i].config, opts.min_conf)?;
                let kept = nms(&raw, opts.nms_iou);
                let empty = Mask::zeros(data.width, data.height);
                detections = classify_static_moving(&kept, mask.as_ref().unwrap_or(&empty));
            }
            out.push(FramePrediction {
                frame: data.samples[si].frame,
                mask,
                detections,
            });
        }
    }
    Ok(out)
}

/// Pixel metrics, static/moving AP on matched boxes and vehicle AP per
/// difficulty over a whole split. Sections for absent heads are omitted.
pub fn evaluate(models: &[&Model], data: &Dataset, opts: &EvalOptions) -> Result<MetricsReport> {
    let preds = predict_frames(models, data, opts)?;
    let has_det = models.iter().any(|m| m.config.det_head);
    let mut pixel: Option<PixelCounts> = None;
    let mut sm = StaticMovingEval::new(opts.match_iou);
    let mut vap: Vec<VehicleApEval> = Difficulty::ALL
        .iter()
        .map(|&d| VehicleApEval::new(opts.match_iou, d))
        .collect();
    for (p, s) in preds.iter().zip(&data.samples) {
        if let Some(mask) = &p.mask {
            let c = PixelCounts::from_masks(mask, &s.mask)?;
            pixel.get_or_insert_with(PixelCounts::default).add(&c);
        }
        if has_det {
            sm.add_frame(&p.detections, &s.boxes);
            for e in &mut vap {
                e.add_frame(&p.detections, &s.boxes);
            }
        }
    }
    let mut config = BTreeMap::new();
    config.insert("frames".into(), data.len().to_string());
    config.insert("labels".into(), data.labels.as_str().into());
    config.insert("min_conf".into(), opts.min_conf.to_string());
    config.insert("nms_iou".into(), opts.nms_iou.to_string());
    config.insert("match_iou".into(), opts.match_iou.to_string());
    Ok(MetricsReport {
        pixel: pixel.map(|c| c.metrics()),
        detection: has_det.then(|| sm.finish()),
        vehicle_ap: if has_det {
            Difficulty::ALL
                .iter()
                .zip(&vap)
                .map(|(&d, e)| (d, e.finish()))
                .collect()
        } else {
            BTreeMap::new()
        },
        config,
    })
}
