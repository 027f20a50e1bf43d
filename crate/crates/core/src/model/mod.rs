//! Two-stream network: appearance and motion encoders fused by summation,
//! an upsampling segmentation decoder with skips, and a per-cell detection
//! head (with optional rezoom refinement) on appearance features only.

mod check;
mod config;
mod grid;

pub use check::{full_gradcheck_suite, gradcheck_config, joint_gradcheck, JointProblem, JOINT_CHECK_SEEDS};

pub use config::{parse_kv, ModelConfig, MotionInput};
pub use grid::{classify_static_moving, decode_cells, encode_targets, mask_coverage, nms, GridOutput, GridTargets};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowio::Mask;
use crate::tensorcore::checkpoint::{self, NamedArray};
use crate::tensorcore::{bilinear_kernel, he_normal, Bindings, Element, Graph, NormBox, ParamStore, Tensor, Var};

/// Name of the zero-size array that carries the config in checkpoints.
pub const CONFIG_ARRAY_PREFIX: &str = "__config__\n";

/// Arrays under this prefix hold non-weight state (optimizer moments, run
/// bookkeeping) and are skipped when rebuilding a model.
pub const AUX_ARRAY_PREFIX: &str = "aux/";

/// Channels of the first detection pass: two logits and four box values.
pub const DET_CHANNELS: usize = 6;

/// ROI grid used by rezoom.
const REZOOM_POOL: usize = 3;

/// Which heads a forward pass should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub seg: bool,
    pub det: bool,
}

impl Heads {
    pub const SEG: Heads = Heads { seg: true, det: false };
    pub const DET: Heads = Heads { seg: false, det: true };
    pub const BOTH: Heads = Heads { seg: true, det: true };
}

/// Settings for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub heads: Heads,
    /// Enables dropout.
    pub training: bool,
    pub dropout_seed: u64,
    /// Rezoom ROIs to use instead of the ones derived from the first pass,
    /// one per cell in `[n, grid_h, grid_w]` order.
    pub rezoom_rois: Option<&'a [NormBox]>,
}

impl ForwardOptions<'_> {
    pub fn inference(heads: Heads) -> Self {
        ForwardOptions {
            heads,
            training: false,
            dropout_seed: 0,
            rezoom_rois: None,
        }
    }

    pub fn training(heads: Heads, dropout_seed: u64) -> Self {
        ForwardOptions {
            heads,
            training: true,
            dropout_seed,
            rezoom_rois: None,
        }
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardVars {
    /// `[n, 2, input_h, input_w]`.
    pub seg_logits: Option<Var>,
    /// `[n, 2, grid_h, grid_w]`.
    pub det_logits: Option<Var>,
    /// First-pass box values `[n, 4, grid_h, grid_w]` in pixels.
    pub det_box: Option<Var>,
    /// First pass plus rezoom residuals, same layout as `det_box`.
    pub det_refined: Option<Var>,
    /// ROIs the rezoom stage pooled from.
    pub rezoom_rois: Vec<NormBox>,
}

/// Per-pixel segmentation logits, `[n, 2, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f32>,
}

impl SegOutput {
    /// Pixels where the moving logit beats the background logit.
    pub fn mask(&self, b: usize) -> Mask {
        let plane = self.height * self.width;
        let base = b * 2 * plane;
        let data = (0..plane)
            .map(|p| (self.logits[base + plane + p] > self.logits[base + p]) as u8)
            .collect();
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    pub seg: Option<SegOutput>,
    pub grid: Option<GridOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossVars {
    pub total: Var,
    pub seg: Option<Var>,
    pub det: Option<Var>,
}

/// Network weights plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn conv_name(stream: &str, stage: usize, conv: usize) -> String {
    format!("{stream}.s{stage}.c{conv}")
}

impl<T: Element> Model<T> {
    /// Fresh model with He-normal kernels, zero biases and bilinear upsampling.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let conv = |params: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
            params.add(
                format!("{name}.w"),
                he_normal(&[cout, cin, k, k], cin * k * k, rng),
                true,
            )?;
            params.add(format!("{name}.b"), Tensor::zeros(vec![cout]), false)?;
            Ok::<_, Error>(())
        };
        let mut streams = vec![("app", 3)];
        if config.motion_stream && config.seg_head {
            streams.push(("mot", config.motion_input.channels()));
        }
        for (stream, in_ch) in streams {
            let mut cin = in_ch;
            for s in 0..config.stages {
                let cout = config.channels_per_stage[s];
                for c in 0..config.convs_per_stage[s] {
                    conv(&mut params, &conv_name(stream, s + 1, c + 1), cin, cout, 3, &mut rng)?;
                    cin = cout;
                }
            }
        }
        if config.seg_head {
            let deep = config.channels_per_stage[config.stages - 1];
            conv(&mut params, "seg.score", deep, 2, 1, &mut rng)?;
            for s in 1..config.stages {
                conv(
                    &mut params,
                    &format!("seg.skip{s}"),
                    config.channels_per_stage[s - 1],
                    2,
                    1,
                    &mut rng,
                )?;
            }
            for k in 0..config.stages {
                params.add(format!("seg.up{k}.w"), bilinear_kernel(2, 4), true)?;
            }
        }
        if config.det_head {
            let deep = config.channels_per_stage[config.stages - 1];
            conv(&mut params, "det.fc1", deep, deep, 1, &mut rng)?;
            conv(&mut params, "det.fc2", deep, DET_CHANNELS, 1, &mut rng)?;
            if config.rezoom_enabled {
                let roi = config.channels_per_stage[0] * REZOOM_POOL * REZOOM_POOL;
                conv(&mut params, "det.rezoom", roi, 4, 1, &mut rng)?;
            }
        }
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn param(&self, g: &mut Graph<T>, b: &mut Bindings, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("model has no parameter {name}")))?;
        Ok(self.params.bind(g, b, id))
    }

    fn conv(&self, g: &mut Graph<T>, b: &mut Bindings, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.param(g, b, &format!("{name}.w"))?;
        let bias = self.param(g, b, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(bias), 1, pad)
    }

    /// Pooled output of every stage, shallowest first.
    fn encode(&self, g: &mut Graph<T>, b: &mut Bindings, stream: &str, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut pools = Vec::with_capacity(self.config.stages);
        for s in 0..self.config.stages {
            for c in 0..self.config.convs_per_stage[s] {
                h = self.conv(g, b, &conv_name(stream, s + 1, c + 1), h, 1)?;
                h = g.relu(h);
            }
            h = g.maxpool2d(h, 2, 2)?.0;
            pools.push(h);
        }
        Ok(pools)
    }

    fn check_input(&self, g: &Graph<T>, x: Var, channels: usize, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != channels || s[2] != self.config.input_h || s[3] != self.config.input_w {
            return Err(Error::shape(
                "model",
                format!(
                    "{what} input {s:?}, expected [n, {channels}, {}, {}]",
                    self.config.input_h, self.config.input_w
                ),
            ));
        }
        Ok(())
    }

    /// Builds the requested heads. `motion` is required when the segmentation
    /// head runs on a two-stream model and ignored otherwise.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Bindings,
        rgb: Var,
        motion: Option<Var>,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let heads = opts.heads;
        self.check_input(g, rgb, 3, "rgb")?;
        let heads = Heads {
            seg: heads.seg && cfg.seg_head,
            det: heads.det && cfg.det_head,
        };
        let app = self.encode(g, b, "app", rgb)?;
        let mut out = ForwardVars {
            seg_logits: None,
            det_logits: None,
            det_box: None,
            det_refined: None,
            rezoom_rois: Vec::new(),
        };
        if heads.seg {
            let fused = if cfg.motion_stream {
                let m = motion.ok_or_else(|| Error::Invalid("two-stream segmentation needs a motion input".into()))?;
                self.check_input(g, m, cfg.motion_input.channels(), "motion")?;
                if g.shape(m)[0] != g.shape(rgb)[0] {
                    return Err(Error::shape("model", "rgb and motion batch sizes differ"));
                }
                let mot = self.encode(g, b, "mot", m)?;
                app.iter()
                    .zip(&mot)
                    .map(|(&a, &m)| g.sum_junction(a, m))
                    .collect::<Result<Vec<_>>>()?
            } else {
                app.clone()
            };
            out.seg_logits = Some(self.seg_decoder(g, b, &fused)?);
        }
        if heads.det {
            self.det_head(g, b, &app, opts, &mut out)?;
        }
        Ok(out)
    }

    fn seg_decoder(&self, g: &mut Graph<T>, b: &mut Bindings, fused: &[Var]) -> Result<Var> {
        let stages = self.config.stages;
        let mut x = self.conv(g, b, "seg.score", fused[stages - 1], 0)?;
        for k in 0..stages {
            let w = self.param(g, b, &format!("seg.up{k}.w"))?;
            x = g.conv_transpose2d(x, w, 2, 1)?;
            let level = stages - 1 - k;
            if level > 0 {
                let skip = self.conv(g, b, &format!("seg.skip{level}"), fused[level - 1], 0)?;
                x = g.add(x, skip)?;
            }
        }
        Ok(x)
    }

    fn det_head(
        &self,
        g: &mut Graph<T>,
        b: &mut Bindings,
        app: &[Var],
        opts: &ForwardOptions,
        out: &mut ForwardVars,
    ) -> Result<()> {
        let cfg = &self.config;
        let cell = T::from_f64(cfg.cell_size() as f64);
        let h = self.conv(g, b, "det.fc1", app[cfg.stages - 1], 0)?;
        let h = g.relu(h);
        let h = g.dropout(h, cfg.dropout_p, opts.training, opts.dropout_seed)?;
        let raw = self.conv(g, b, "det.fc2", h, 0)?;
        let logits = g.slice_channels(raw, 0, 2)?;
        let boxes = g.slice_channels(raw, 2, 4)?;
        let boxes = g.scale(boxes, cell);
        out.det_logits = Some(logits);
        out.det_box = Some(boxes);
        if cfg.rezoom_enabled {
            let n = g.shape(boxes)[0];
            let rois = match opts.rezoom_rois {
                Some(r) if r.len() == n * cfg.grid_h * cfg.grid_w => r.to_vec(),
                Some(r) => {
                    return Err(Error::shape(
                        "rezoom",
                        format!("{} ROIs for {n}x{}x{} cells", r.len(), cfg.grid_h, cfg.grid_w),
                    ))
                }
                None => self.rezoom_rois(g.value(boxes), n),
            };
            let pooled = g.roi_pool_cells(app[0], &rois, (cfg.grid_h, cfg.grid_w), REZOOM_POOL, REZOOM_POOL)?;
            let resid = self.conv(g, b, "det.rezoom", pooled, 0)?;
            let resid = g.scale(resid, cell);
            out.det_refined = Some(g.add(boxes, resid)?);
            out.rezoom_rois = rois;
        }
        Ok(())
    }

    /// First-pass boxes as normalized ROIs, one per cell. The values are
    /// read off the tape, so no gradient flows through the ROI placement.
    fn rezoom_rois(&self, boxes: &[T], n: usize) -> Vec<NormBox> {
        let cfg = &self.config;
        let (gh, gw) = (cfg.grid_h, cfg.grid_w);
        let cells = gh * gw;
        let cell = cfg.cell_size() as f64;
        let (iw, ih) = (cfg.input_w as f64, cfg.input_h as f64);
        let mut rois = Vec::with_capacity(n * cells);
        for bi in 0..n {
            for i in 0..gh {
                for j in 0..gw {
                    let v = |k: usize| boxes[(bi * 4 + k) * cells + i * gw + j].as_f64();
                    let cx = (j as f64 + 0.5) * cell + v(0);
                    let cy = (i as f64 + 0.5) * cell + v(1);
                    let (w, h) = (v(2).max(1.0), v(3).max(1.0));
                    rois.push(
                        NormBox::new(
                            (cx - 0.5 * w) / iw,
                            (cy - 0.5 * h) / ih,
                            (cx + 0.5 * w) / iw,
                            (cy + 0.5 * h) / ih,
                        )
                        .clamped(),
                    );
                }
            }
        }
        rois
    }

    /// Mean per-pixel cross-entropy; `labels` holds 0/1 per pixel in
    /// `[n, h, w]` order.
    pub fn seg_loss(&self, g: &mut Graph<T>, fwd: &ForwardVars, labels: &[usize]) -> Result<Var> {
        let logits = fwd
            .seg_logits
            .ok_or_else(|| Error::Invalid("forward pass has no segmentation head".into()))?;
        g.softmax_cross_entropy(logits, labels, None)
    }

    /// Mean cell confidence cross-entropy plus masked L1 on the first-pass
    /// and (if present) refined box values, both normalized by cell count.
    pub fn det_loss(&self, g: &mut Graph<T>, fwd: &ForwardVars, targets: &[GridTargets]) -> Result<Var> {
        let (Some(logits), Some(boxes)) = (fwd.det_logits, fwd.det_box) else {
            return Err(Error::Invalid("forward pass has no detection head".into()));
        };
        let n = g.shape(logits)[0];
        let cells = self.config.grid_h * self.config.grid_w;
        if targets.len() != n || targets.iter().any(|t| t.obj.len() != cells) {
            return Err(Error::shape(
                "det_loss",
                format!("{} target grids for a batch of {n}", targets.len()),
            ));
        }
        let conf: Vec<usize> = targets.iter().flat_map(|t| t.obj.iter().map(|&o| o as usize)).collect();
        let mut value = vec![T::zero(); n * 4 * cells];
        let mut mask = vec![T::zero(); n * 4 * cells];
        for (bi, t) in targets.iter().enumerate() {
            for c in 0..cells {
                if t.obj[c] {
                    for k in 0..4 {
                        value[(bi * 4 + k) * cells + c] = T::from_f64(t.boxes[c][k]);
                        mask[(bi * 4 + k) * cells + c] = T::one();
                    }
                }
            }
        }
        let mut loss = g.softmax_cross_entropy(logits, &conf, None)?;
        let l1 = g.l1_masked(boxes, &value, &mask)?;
        loss = g.add(loss, l1)?;
        if let Some(refined) = fwd.det_refined {
            let l1r = g.l1_masked(refined, &value, &mask)?;
            loss = g.add(loss, l1r)?;
        }
        Ok(loss)
    }

    /// `L_total = L_seg + L_det` over whichever heads the pass built.
    pub fn loss_total(
        &self,
        g: &mut Graph<T>,
        fwd: &ForwardVars,
        seg_labels: Option<&[usize]>,
        det_targets: Option<&[GridTargets]>,
    ) -> Result<LossVars> {
        let seg = match (fwd.seg_logits, seg_labels) {
            (Some(_), Some(l)) => Some(self.seg_loss(g, fwd, l)?),
            _ => None,
        };
        let det = match (fwd.det_logits, det_targets) {
            (Some(_), Some(t)) => Some(self.det_loss(g, fwd, t)?),
            _ => None,
        };
        let total = match (seg, det) {
            (Some(s), Some(d)) => g.add(s, d)?,
            (Some(s), None) => s,
            (None, Some(d)) => d,
            (None, None) => return Err(Error::Invalid("no loss terms to combine".into())),
        };
        Ok(LossVars { total, seg, det })
    }

    /// Inference forward pass (dropout off).
    pub fn predict(&self, rgb: &Tensor<T>, motion: Option<&Tensor<T>>, heads: Heads) -> Result<Prediction> {
        let mut g = Graph::new();
        let mut b = Bindings::default();
        let x = g.leaf(rgb);
        let m = motion.map(|m| g.leaf(m));
        let fwd = self.forward(&mut g, &mut b, x, m, &ForwardOptions::inference(heads))?;
        let to_f32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let seg = fwd.seg_logits.map(|v| {
            let s = g.shape(v);
            SegOutput {
                n: s[0],
                height: s[2],
                width: s[3],
                logits: to_f32(g.value(v)),
            }
        });
        let grid = match (fwd.det_logits, fwd.det_box) {
            (Some(l), Some(bx)) => {
                let n = g.shape(l)[0];
                let mut parts = vec![g.value(l), g.value(bx)];
                if let Some(r) = fwd.det_refined {
                    parts.push(g.value(r));
                }
                let (gh, gw) = (self.config.grid_h, self.config.grid_w);
                let cells = gh * gw;
                // Rezoom residuals are stored, not the refined values.
                let c = if parts.len() == 3 { 10 } else { 6 };
                let mut nchw = vec![0.0f32; n * c * cells];
                for bi in 0..n {
                    for cell in 0..cells {
                        for k in 0..2 {
                            nchw[(bi * c + k) * cells + cell] = parts[0][(bi * 2 + k) * cells + cell].as_f64() as f32;
                        }
                        for k in 0..4 {
                            let first = parts[1][(bi * 4 + k) * cells + cell].as_f64();
                            nchw[(bi * c + 2 + k) * cells + cell] = first as f32;
                            if c == 10 {
                                let refined = parts[2][(bi * 4 + k) * cells + cell].as_f64();
                                nchw[(bi * c + 6 + k) * cells + cell] = (refined - first) as f32;
                            }
                        }
                    }
                }
                Some(GridOutput::from_nchw(n, c, gh, gw, &nchw))
            }
            _ => None,
        };
        Ok(Prediction { seg, grid })
    }

    /// Config array followed by every parameter in build order.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = vec![NamedArray {
            name: format!("{CONFIG_ARRAY_PREFIX}{}", self.config.to_kv()),
            dims: vec![0],
            data: Vec::new(),
        }];
        out.extend(self.params.iter().map(|p| NamedArray {
            name: p.name.clone(),
            dims: p.tensor.shape().to_vec(),
            data: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
        }));
        out
    }

    /// Rebuilds a model from [`Model::to_arrays`] output. Every parameter of
    /// the embedded config must be present with matching dims; arrays under
    /// [`AUX_ARRAY_PREFIX`] are ignored.
    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let (head, rest) = arrays
            .split_first()
            .ok_or_else(|| Error::Invalid("checkpoint holds no arrays".into()))?;
        let rest: Vec<&NamedArray> = rest.iter().filter(|a| !a.name.starts_with(AUX_ARRAY_PREFIX)).collect();
        let kv = head
            .name
            .strip_prefix(CONFIG_ARRAY_PREFIX)
            .ok_or_else(|| Error::Invalid("checkpoint does not start with a model config".into()))?;
        let config = ModelConfig::from_kv(kv)?;
        let mut model = Model::build(config, 0)?;
        if rest.len() != model.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} parameters, config needs {}",
                rest.len(),
                model.params.len()
            )));
        }
        for a in rest {
            let id = model
                .params
                .id(&a.name)
                .ok_or_else(|| Error::Invalid(format!("unexpected parameter {}", a.name)))?;
            let p = model.params.get_mut(id);
            if p.tensor.shape() != a.dims.as_slice() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{}: dims {:?}, expected {:?}", a.name, a.dims, p.tensor.shape()),
                ));
            }
            for (dst, &src) in p.tensor.data_mut().iter_mut().zip(&a.data) {
                *dst = T::from_f64(src as f64);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_arrays())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(&checkpoint::load(path)?)
    }
}
