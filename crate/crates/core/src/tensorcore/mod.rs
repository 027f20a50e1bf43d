//! Small reverse-mode differentiable tensor library: exactly the operations
//! the network needs, plus Adam, a finite-difference checker and the `MODW`
//! parameter file format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, op_suite, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::NormBox;
pub use params::{Bindings, Param, ParamId, ParamStore};
pub use tensor::{Element, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Bilinear-upsampling kernel of size `k x k` (the standard FCN filter).
pub fn bilinear_filter(k: usize) -> Vec<f64> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let mut out = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let fy = 1.0 - (y as f64 - center).abs() / factor;
            let fx = 1.0 - (x as f64 - center).abs() / factor;
            out.push(fy * fx);
        }
    }
    out
}

/// Transposed-conv kernel `[c, c, k, k]` that upsamples each channel
/// independently with [`bilinear_filter`].
pub fn bilinear_kernel<T: Element>(channels: usize, k: usize) -> Tensor<T> {
    let filt = bilinear_filter(k);
    let mut data = vec![T::zero(); channels * channels * k * k];
    for c in 0..channels {
        let base = (c * channels + c) * k * k;
        for (i, &v) in filt.iter().enumerate() {
            data[base + i] = T::from_f64(v);
        }
    }
    Tensor::new(vec![channels, channels, k, k], data).expect("consistent shape")
}

/// He-normal initialised tensor for a layer with the given fan-in.
pub fn he_normal<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(dist.sample(rng)))
}
