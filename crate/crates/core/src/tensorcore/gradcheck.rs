//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::kernels::NormBox;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Analytic / numeric pair at the worst coordinate.
    pub worst: (f64, f64),
    pub coordinates: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per input tensor (all of them if the tensor is smaller).
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_input: 32,
            seed: 0,
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences for every input with `requires_grad` set.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0.0, 0.0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = g
            .grad(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let n = t.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[j], numeric);
            report.coordinates += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (analytic[j], numeric);
            }
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error per op over `instances` random instances of every
/// differentiable op, each reduced to a scalar through a random projection.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let opts = GradCheckOptions {
        eps: 1e-5,
        coords_per_input: 24,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(&'static str, GradCheckReport)> = Vec::new();
    let mut record = |name: &'static str, r: GradCheckReport| match out.iter_mut().find(|e| e.0 == name) {
        Some(e) => {
            e.1.coordinates += r.coordinates;
            if r.max_rel_error >= e.1.max_rel_error {
                e.1.max_rel_error = r.max_rel_error;
                e.1.worst = r.worst;
            }
        }
        None => out.push((name, r)),
    };
    for inst in 0..instances {
        let x = uniform(&mut rng, &[2, 3, 6, 6]).with_grad(true);
        let k = uniform(&mut rng, &[4, 3, 3, 3]).with_grad(true);
        let b = uniform(&mut rng, &[4]).with_grad(true);
        let w = uniform(&mut rng, &[2 * 4 * 6 * 6]);
        record(
            "conv2d",
            finite_diff_check(&[x.clone(), k, b], opts, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                g.dot_const(y, w.data())
            })?,
        );

        let kt = uniform(&mut rng, &[3, 2, 4, 4]).with_grad(true);
        let w = uniform(&mut rng, &[2 * 2 * 12 * 12]);
        record(
            "conv_transpose2d",
            finite_diff_check(&[x.clone(), kt], opts, |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], 2, 1)?;
                g.dot_const(y, w.data())
            })?,
        );

        let w = uniform(&mut rng, &[2 * 3 * 3 * 3]);
        record(
            "relu+maxpool2d",
            finite_diff_check(std::slice::from_ref(&x), opts, |g, v| {
                let r = g.relu(v[0]);
                let (p, _) = g.maxpool2d(r, 2, 2)?;
                g.dot_const(p, w.data())
            })?,
        );

        let y = uniform(&mut rng, &[2, 3, 6, 6]).with_grad(true);
        let w = uniform(&mut rng, &[216]);
        let drop_seed = seed ^ inst as u64;
        record(
            "sum_junction+dropout+mul+scale",
            finite_diff_check(&[x.clone(), y], opts, |g, v| {
                let s = g.sum_junction(v[0], v[1])?;
                let d = g.dropout(s, 0.5, true, drop_seed)?;
                let m = g.mul(d, v[0])?;
                let sc = g.scale(m, 0.5);
                g.dot_const(sc, w.data())
            })?,
        );

        let w = uniform(&mut rng, &[2 * 3 * 9 * 2 * 2]);
        let boxes = vec![NormBox::new(0.1, 0.05, 0.8, 0.7); 8];
        record(
            "roi_pool_cells",
            finite_diff_check(std::slice::from_ref(&x), opts, |g, v| {
                let p = g.roi_pool_cells(v[0], &boxes, (2, 2), 3, 3)?;
                g.dot_const(p, w.data())
            })?,
        );

        let rois = [(0, NormBox::new(0.2, 0.1, 0.9, 0.6)), (1, NormBox::full())];
        let w = uniform(&mut rng, &[2 * 3 * 2 * 2]);
        record(
            "roi_pool",
            finite_diff_check(std::slice::from_ref(&x), opts, |g, v| {
                let p = g.roi_pool(v[0], &rois, 2, 2)?;
                g.dot_const(p, w.data())
            })?,
        );

        let targets: Vec<usize> = (0..72).map(|_| rng.random_range(0..3)).collect();
        let ignore: Vec<bool> = (0..72).map(|_| rng.random_bool(0.2)).collect();
        record(
            "softmax_cross_entropy",
            finite_diff_check(std::slice::from_ref(&x), opts, |g, v| {
                g.softmax_cross_entropy(v[0], &targets, Some(&ignore))
            })?,
        );

        let tgt = uniform(&mut rng, &[216]);
        let mask: Vec<f64> = (0..216).map(|_| f64::from(rng.random_bool(0.5))).collect();
        record(
            "slice+concat+l1_masked",
            finite_diff_check(std::slice::from_ref(&x), opts, |g, v| {
                let s = g.slice_channels(v[0], 1, 2)?;
                let c = g.concat_channels(&[v[0], s])?;
                let t = g.slice_channels(c, 0, 3)?;
                g.l1_masked(t, tgt.data(), &mask)
            })?,
        );

        record(
            "add+sum",
            finite_diff_check(std::slice::from_ref(&x), opts, |g, v| {
                let r = g.relu(v[0]);
                let a = g.add(r, v[0])?;
                Ok(g.sum(a))
            })?,
        );
    }
    Ok(out)
}
