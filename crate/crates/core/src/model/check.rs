use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ForwardOptions, GridTargets, Heads, Model, ModelConfig};
use crate::error::Result;
use crate::tensorcore::{
    finite_diff_check, op_suite, Bindings, GradCheckOptions, GradCheckReport, Graph, NormBox, Tensor, Var,
};

/// Miniature two-stream config used for the joint-graph gradient check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        input_h: 16,
        input_w: 48,
        stages: 3,
        channels_per_stage: vec![3, 4, 5],
        convs_per_stage: vec![1, 2, 1],
        grid_h: 2,
        grid_w: 6,
        ..ModelConfig::default()
    }
}

/// The joint loss `L_seg + L_det` of a random 1x16x48 two-stream problem,
/// as a function of `[rgb, motion, params...]`.
///
/// The loss is only piecewise smooth, so the point is chosen away from the
/// places a perturbation could otherwise straddle: biases are random (zero
/// biases leave dead units exactly on the relu kink), the detection output
/// weights are shrunk so the confidence softmax is not saturated (saturated
/// cells have gradients below the roundoff floor), the rezoom ROIs are held
/// at their unperturbed placement (they carry no gradient), and box targets
/// sit a margin beyond both the first-pass and the refined prediction, on
/// the same side for every cell of a channel, so no L1 term is at its kink
/// and the L1 terms cannot cancel exactly.
pub struct JointProblem {
    pub model: Model<f64>,
    pub inputs: Vec<Tensor<f64>>,
    labels: Vec<usize>,
    targets: Vec<GridTargets>,
    rois: Vec<NormBox>,
    seed: u64,
}

impl JointProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = gradcheck_config();
        let mut model: Model<f64> = Model::build(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        for p in model.params.iter_mut() {
            if !p.decay {
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.2..0.2));
            } else if p.name == "det.fc2.w" {
                p.tensor.data_mut().iter_mut().for_each(|v| *v *= 0.25);
            }
        }
        let (h, w) = (cfg.input_h, cfg.input_w);
        let rgb = Tensor::from_fn(vec![1, 3, h, w], |_| rng.random_range(-1.0..1.0)).with_grad(true);
        let mot = Tensor::from_fn(vec![1, cfg.motion_input.channels(), h, w], |_| {
            rng.random_range(-1.0..1.0)
        })
        .with_grad(true);
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..2)).collect();

        let cells = cfg.grid_h * cfg.grid_w;
        let sign: Vec<f64> = (0..4).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut g = Graph::new();
        let mut b = Bindings::default();
        let (x, m) = (g.leaf(&rgb), g.leaf(&mot));
        let fwd = model.forward(&mut g, &mut b, x, Some(m), &ForwardOptions::training(Heads::BOTH, seed))?;
        let first = g.value(fwd.det_box.expect("det head"));
        let refined = g.value(fwd.det_refined.expect("rezoom"));
        let mut t = GridTargets {
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            obj: vec![false; cells],
            boxes: vec![[0.0; 4]; cells],
        };
        for c in [1, 4, cells - 5, cells - 2] {
            t.obj[c] = true;
            for k in 0..4 {
                let (a, r) = (first[k * cells + c], refined[k * cells + c]);
                t.boxes[c][k] = a + sign[k] * ((r - a).abs() + 1.0);
            }
        }
        let mut inputs = vec![rgb, mot];
        inputs.extend(model.params.iter().map(|p| p.tensor.clone()));
        Ok(JointProblem {
            rois: fwd.rezoom_rois,
            model,
            inputs,
            labels,
            targets: vec![t],
            seed,
        })
    }

    /// Builds the loss on `g` from leaves for `[rgb, motion, params...]`.
    pub fn loss(&self, g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let mut b = Bindings::from_vars(&v[2..]);
        let opts = ForwardOptions {
            rezoom_rois: Some(&self.rois),
            ..ForwardOptions::training(Heads::BOTH, self.seed)
        };
        let fwd = self.model.forward(g, &mut b, v[0], Some(v[1]), &opts)?;
        Ok(self
            .model
            .loss_total(g, &fwd, Some(&self.labels), Some(&self.targets))?
            .total)
    }

    pub fn check(&self, opts: GradCheckOptions) -> Result<GradCheckReport> {
        finite_diff_check(&self.inputs, opts, |g, v| self.loss(g, v))
    }
}

/// Finite-difference check of the joint loss with respect to both inputs
/// and every parameter, in 64-bit, on a 1x16x48 batch.
pub fn joint_gradcheck(seed: u64, coords_per_input: usize, eps: f64) -> Result<GradCheckReport> {
    JointProblem::new(seed)?.check(GradCheckOptions {
        eps,
        coords_per_input,
        seed,
    })
}

/// Seeds of the joint-graph check used by the full suite.
pub const JOINT_CHECK_SEEDS: [u64; 4] = [0, 1, 2, 3];

/// Every differentiable tensorcore op over `op_instances` random instances,
/// then the joint two-stream graph for each of `joint_seeds`. Returns one
/// `(name, report)` per op and per joint seed.
pub fn full_gradcheck_suite(op_instances: usize, joint_seeds: &[u64]) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = op_suite(op_instances, 14)?
        .into_iter()
        .map(|(name, r)| (name.to_string(), r))
        .collect();
    for &s in joint_seeds {
        out.push((format!("joint_graph[seed {s}]"), joint_gradcheck(s, 16, 1e-5)?));
    }
    Ok(out)
}
