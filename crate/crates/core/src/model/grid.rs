use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flowio::Mask;
use crate::geometry::{BBox, Detection, MotionClass};

/// Detection head output, `[n, grid_h, grid_w, channels]` row-major.
///
/// Per cell: background and vehicle logits, center offset from the cell
/// center (px), width and height (px), then optionally the rezoom residuals
/// on those four box values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    pub n: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl GridOutput {
    /// Reorders an `[n, c, gh, gw]` buffer.
    pub fn from_nchw(n: usize, c: usize, gh: usize, gw: usize, nchw: &[f32]) -> Self {
        let mut data = vec![0.0; nchw.len()];
        for b in 0..n {
            for ch in 0..c {
                for cell in 0..gh * gw {
                    data[(b * gh * gw + cell) * c + ch] = nchw[(b * c + ch) * gh * gw + cell];
                }
            }
        }
        GridOutput {
            n,
            grid_h: gh,
            grid_w: gw,
            channels: c,
            data,
        }
    }

    pub fn cell(&self, b: usize, i: usize, j: usize) -> &[f32] {
        let at = ((b * self.grid_h + i) * self.grid_w + j) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn has_rezoom(&self) -> bool {
        self.channels == 10
    }
}

/// Per-cell regression and confidence targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub obj: Vec<bool>,
    /// `(x offset, y offset, w, h)` in pixels for responsible cells.
    pub boxes: Vec<[f64; 4]>,
}

impl GridTargets {
    pub fn positives(&self) -> usize {
        self.obj.iter().filter(|&&o| o).count()
    }
}

/// Assigns each ground-truth box to the cell containing its center. When two
/// centers share a cell the larger box wins (earlier box on equal area).
pub fn encode_targets(gts: &[BBox], cfg: &ModelConfig) -> GridTargets {
    let (gh, gw) = (cfg.grid_h, cfg.grid_w);
    let cell = cfg.cell_size() as f64;
    let mut obj = vec![false; gh * gw];
    let mut boxes = vec![[0.0; 4]; gh * gw];
    let mut area = vec![f64::NEG_INFINITY; gh * gw];
    for b in gts {
        if !(b.cx >= 0.0 && b.cy >= 0.0 && b.cx < cfg.input_w as f64 && b.cy < cfg.input_h as f64) {
            continue;
        }
        let j = ((b.cx / cell) as usize).min(gw - 1);
        let i = ((b.cy / cell) as usize).min(gh - 1);
        let k = i * gw + j;
        if b.area() > area[k] {
            area[k] = b.area();
            obj[k] = true;
            boxes[k] = [b.cx - (j as f64 + 0.5) * cell, b.cy - (i as f64 + 0.5) * cell, b.w, b.h];
        }
    }
    GridTargets {
        grid_h: gh,
        grid_w: gw,
        obj,
        boxes,
    }
}

fn vehicle_prob(l0: f32, l1: f32) -> f64 {
    let (a, b) = (l0 as f64, l1 as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    eb / (ea + eb)
}

/// Decodes image `b` of a grid into detections with confidence >= `min_conf`.
pub fn decode_cells(grid: &GridOutput, b: usize, cfg: &ModelConfig, min_conf: f64) -> Result<Vec<Detection>> {
    if grid.grid_h != cfg.grid_h || grid.grid_w != cfg.grid_w || b >= grid.n {
        return Err(Error::shape(
            "decode_cells",
            format!(
                "grid {}x{}x{} vs config {}x{}, image {b}",
                grid.n, grid.grid_h, grid.grid_w, cfg.grid_h, cfg.grid_w
            ),
        ));
    }
    if grid.channels != 6 && grid.channels != 10 {
        return Err(Error::shape(
            "decode_cells",
            format!("{} channels per cell", grid.channels),
        ));
    }
    let cell = cfg.cell_size() as f64;
    let (w, h) = (cfg.input_w as f64, cfg.input_h as f64);
    let mut out = Vec::new();
    for i in 0..grid.grid_h {
        for j in 0..grid.grid_w {
            let c = grid.cell(b, i, j);
            let conf = vehicle_prob(c[0], c[1]);
            if conf < min_conf {
                continue;
            }
            let mut v = [c[2] as f64, c[3] as f64, c[4] as f64, c[5] as f64];
            if grid.has_rezoom() {
                for k in 0..4 {
                    v[k] += c[6 + k] as f64;
                }
            }
            let cx = (j as f64 + 0.5) * cell + v[0];
            let cy = (i as f64 + 0.5) * cell + v[1];
            let bbox = BBox::new(cx, cy, v[2].max(1.0), v[3].max(1.0)).clip(w, h);
            if bbox.area() <= 0.0 {
                continue;
            }
            out.push(Detection {
                bbox,
                confidence: conf,
                motion_class: None,
                cell: i * grid.grid_w + j,
            });
        }
    }
    Ok(out)
}

/// Greedy non-maximum suppression: keeps boxes by descending confidence
/// (smaller cell index first on ties) and drops any box whose IoU with a
/// kept box exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// Fraction of the pixel centers inside `b` that are marked in `mask`.
pub fn mask_coverage(b: &BBox, mask: &Mask) -> f64 {
    let x0 = (b.x0() - 0.5).ceil().max(0.0) as usize;
    let y0 = (b.y0() - 0.5).ceil().max(0.0) as usize;
    let x1 = ((b.x1() - 0.5).ceil().max(0.0) as usize).min(mask.width);
    let y1 = ((b.y1() - 0.5).ceil().max(0.0) as usize).min(mask.height);
    let (mut hit, mut total) = (0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            total += 1;
            hit += mask.get(x, y) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Labels each detection moving iff more than half of its box is covered by
/// moving pixels.
pub fn classify_static_moving(dets: &[Detection], mask: &Mask) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection {
            motion_class: Some(if mask_coverage(&d.bbox, mask) > 0.5 {
                MotionClass::Moving
            } else {
                MotionClass::Static
            }),
            ..*d
        })
        .collect()
}
