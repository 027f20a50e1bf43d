//! Define-by-run reverse-mode autodiff tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and produces gradients for every node that depends on a
//! leaf marked `requires_grad`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom, NormBox};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Gather {
        input: Var,
        // Source index per output element; `usize::MAX` means "no source".
        index: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        keep: Vec<bool>,
        k: usize,
        inner: usize,
        count: usize,
    },
    L1Masked {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        denom: usize,
    },
    Sum {
        input: Var,
    },
    Dot {
        input: Var,
        other: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. One graph per forward pass.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Adds a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Adds a constant leaf that never receives gradients.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Gradient computed by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        match self.shape(v)[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::shape(op, format!("expected rank-4 input, got {s:?}"))),
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("conv2d", input)?;
        let kdims = match self.shape(kernel)[..] {
            [f, kc, kh, kw] => (f, kc, kh, kw),
            ref s => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {s:?}"))),
        };
        let geom = ConvGeom::conv("conv2d", (c, h, w), kdims, stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.f] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.f),
                ));
            }
        }
        let y = kernels::conv2d_forward(
            &geom,
            n,
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        );
        let needs = self.node(input).needs_grad
            || self.node(kernel).needs_grad
            || bias.is_some_and(|b| self.node(b).needs_grad);
        Ok(self.push(
            vec![n, geom.f, geom.oh, geom.ow],
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Transposed convolution with kernel `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("conv_transpose2d", input)?;
        let (kc, f, kh, kw) = match self.shape(kernel)[..] {
            [kc, f, kh, kw] => (kc, f, kh, kw),
            ref s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("kernel must be rank 4, got {s:?}"),
                ))
            }
        };
        if kc != c {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input channels {c} != kernel input channels {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::geometry("conv_transpose2d", "stride must be >= 1"));
        }
        let oh = (stride * (h - 1) + kh) as isize - 2 * pad as isize;
        let ow = (stride * (w - 1) + kw) as isize - 2 * pad as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::geometry(
                "conv_transpose2d",
                format!("output size {oh}x{ow} is empty"),
            ));
        }
        let (oh, ow) = (oh as usize, ow as usize);
        let geom = ConvGeom::conv("conv_transpose2d", (f, oh, ow), (c, f, kh, kw), stride, pad)?;
        if geom.oh != h || geom.ow != w {
            return Err(Error::geometry(
                "conv_transpose2d",
                format!("{h}x{w} is not reachable from {oh}x{ow} with stride {stride}"),
            ));
        }
        let y = kernels::conv_transpose2d_forward(&geom, n, self.value(input), self.value(kernel));
        let needs = self.node(input).needs_grad || self.node(kernel).needs_grad;
        Ok(self.push(
            vec![n, f, oh, ow],
            y,
            Op::ConvTranspose2d { input, kernel, geom },
            needs,
        ))
    }

    /// Max pooling; returns the pooled node and the flat argmax indices.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<(Var, Vec<usize>)> {
        let (n, c, h, w) = self.dims4("maxpool2d", input)?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} / stride {stride} invalid for {h}x{w}"),
            ));
        }
        let (y, arg, oh, ow) = kernels::maxpool2d_forward((n, c, h, w), window, stride, self.value(input));
        let needs = self.node(input).needs_grad;
        let v = self.push(
            vec![n, c, oh, ow],
            y,
            Op::Gather {
                input,
                index: arg.clone(),
            },
            needs,
        );
        Ok((v, arg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self
            .value(input)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let needs = self.node(input).needs_grad;
        self.push(self.shape(input).to_vec(), y, Op::Relu { input }, needs)
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), y, Op::Add { a, b }, needs))
    }

    /// Fusion of two feature maps by elementwise summation.
    pub fn sum_junction(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add(a, b).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("sum_junction", detail),
            e => e,
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), y, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let y = self.value(input).iter().map(|&v| v * factor).collect();
        let needs = self.node(input).needs_grad;
        self.push(self.shape(input).to_vec(), y, Op::Scale { input, factor }, needs)
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, input: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} not in [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let y = self.value(input).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = self.node(input).needs_grad;
        Ok(self.push(self.shape(input).to_vec(), y, Op::Dropout { input, mask }, needs))
    }

    /// Selects channels `start..start+len` of a rank-4 node.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("slice_channels", input)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} out of {c}", start + len),
            ));
        }
        let plane = h * w;
        let mut index = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            for ch in start..start + len {
                let base = (b * c + ch) * plane;
                index.extend(base..base + plane);
            }
        }
        Ok(self.gather(input, vec![n, len, h, w], index))
    }

    /// Concatenates rank-4 nodes along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims4("concat_channels", p)?);
        }
        let (n, _, h, w) = *dims
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        if dims.iter().any(|&(pn, _, ph, pw)| (pn, ph, pw) != (n, h, w)) {
            return Err(Error::shape("concat_channels", format!("mismatched inputs {dims:?}")));
        }
        // Build as a chain of adds over zero-padded gathers so each part keeps its own edge.
        let total: usize = dims.iter().map(|d| d.1).sum();
        let plane = h * w;
        let mut acc: Option<Var> = None;
        let mut offset = 0;
        for (&p, &(_, c, _, _)) in parts.iter().zip(&dims) {
            let mut index = vec![usize::MAX; n * total * plane];
            for b in 0..n {
                for ch in 0..c {
                    let dst = (b * total + offset + ch) * plane;
                    let src = (b * c + ch) * plane;
                    for i in 0..plane {
                        index[dst + i] = src + i;
                    }
                }
            }
            let g = self.gather(p, vec![n, total, h, w], index);
            acc = Some(match acc {
                None => g,
                Some(a) => self.add(a, g)?,
            });
            offset += c;
        }
        Ok(acc.expect("at least one part"))
    }

    fn gather(&mut self, input: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let src = self.value(input);
        let y = index
            .iter()
            .map(|&i| if i == usize::MAX { T::zero() } else { src[i] })
            .collect();
        let needs = self.node(input).needs_grad;
        self.push(shape, y, Op::Gather { input, index }, needs)
    }

    /// ROI max pooling of one box per entry of `rois` (`(batch index, box)`).
    /// Output is `[rois.len(), c, out_h, out_w]`.
    pub fn roi_pool(&mut self, features: Var, rois: &[(usize, NormBox)], out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4("roi_pool", features)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("roi_pool", "output size must be positive"));
        }
        let per = c * out_h * out_w;
        let mut index = vec![0usize; rois.len() * per];
        let mut values = vec![T::zero(); per];
        for (r, &(b, roi)) in rois.iter().enumerate() {
            if b >= n {
                return Err(Error::shape("roi_pool", format!("batch index {b} >= {n}")));
            }
            let base = b * c * h * w;
            let plane = &self.value(features)[base..base + c * h * w];
            let arg = &mut index[r * per..(r + 1) * per];
            kernels::roi_pool_plane((c, h, w), plane, roi, out_h, out_w, &mut values, arg);
            arg.iter_mut().for_each(|i| *i += base);
        }
        Ok(self.gather(features, vec![rois.len(), c, out_h, out_w], index))
    }

    /// Per-cell ROI pooling laid out as a grid: for each cell `(i, j)` of an
    /// `n x gh x gw` grid, pools `boxes[(b*gh + i)*gw + j]` into `out_h x out_w`
    /// and stores the `c*out_h*out_w` values as the channels of that cell.
    pub fn roi_pool_cells(
        &mut self,
        features: Var,
        boxes: &[NormBox],
        grid: (usize, usize),
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.dims4("roi_pool_cells", features)?;
        let (gh, gw) = grid;
        if boxes.len() != n * gh * gw {
            return Err(Error::shape(
                "roi_pool_cells",
                format!("{} boxes for a {n}x{gh}x{gw} grid", boxes.len()),
            ));
        }
        let per = c * out_h * out_w;
        let cells = gh * gw;
        let mut index = vec![0usize; n * per * cells];
        let mut values = vec![T::zero(); per];
        let mut arg = vec![0usize; per];
        for b in 0..n {
            let base = b * c * h * w;
            let plane = &self.value(features)[base..base + c * h * w];
            for cell in 0..cells {
                let roi = boxes[b * cells + cell];
                kernels::roi_pool_plane((c, h, w), plane, roi, out_h, out_w, &mut values, &mut arg);
                for (ch, &src) in arg.iter().enumerate() {
                    index[(b * per + ch) * cells + cell] = base + src;
                }
            }
        }
        Ok(self.gather(features, vec![n, per, gh, gw], index))
    }

    /// Mean softmax cross-entropy over axis 1 of `logits` (`[n, k, ...]`).
    ///
    /// `targets` holds one class index per `(n, ...)` position. Positions with
    /// `ignore[i] == true` do not contribute; the mean runs over the rest.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits rank < 2: {shape:?}"),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if targets.len() != n * inner {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for {} positions", targets.len(), n * inner),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("target class {bad} >= {k}"),
            ));
        }
        let keep: Vec<bool> = match ignore {
            Some(m) if m.len() != targets.len() => {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("ignore mask has {} entries for {}", m.len(), targets.len()),
                ))
            }
            Some(m) => m.iter().map(|&i| !i).collect(),
            None => vec![true; targets.len()],
        };
        let x = self.value(logits);
        let probs = kernels::softmax_axis1(n, k, inner, x);
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..n {
            for p in 0..inner {
                let pos = b * inner + p;
                if !keep[pos] {
                    continue;
                }
                let at = |c: usize| b * k * inner + c * inner + p;
                let mut m = x[at(0)];
                for c in 1..k {
                    m = m.max(x[at(c)]);
                }
                let lse = (0..k).map(|c| (x[at(c)] - m).exp()).sum::<T>().ln() + m;
                total = total + (lse - x[at(targets[pos])]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        };
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                keep,
                k,
                inner,
                count,
            },
            needs,
        ))
    }

    /// `(1/|S|) * sum(mask * |pred - target|)` where `|S|` is the number of
    /// cells, i.e. `numel / shape[1]` for a `[n, channels, ...]` prediction.
    pub fn l1_masked(&mut self, pred: Var, target: &[T], mask: &[T]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        let numel = self.value(pred).len();
        if target.len() != numel || mask.len() != numel {
            return Err(Error::shape(
                "l1_masked",
                format!("pred has {numel} values, target {}, mask {}", target.len(), mask.len()),
            ));
        }
        let denom = if shape.len() >= 2 { numel / shape[1] } else { numel };
        let total: T = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((&p, &t), &m)| m * (p - t).abs())
            .sum();
        let loss = total / T::from_f64(denom.max(1) as f64);
        let needs = self.node(pred).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::L1Masked {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                denom: denom.max(1),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().copied().sum();
        let needs = self.node(input).needs_grad;
        self.push(vec![1], vec![s], Op::Sum { input }, needs)
    }

    /// Inner product with a constant of the same shape.
    pub fn dot_const(&mut self, input: Var, other: &[T]) -> Result<Var> {
        if other.len() != self.value(input).len() {
            return Err(Error::shape(
                "dot_const",
                format!("{} vs {} values", self.value(input).len(), other.len()),
            ));
        }
        let s = self.value(input).iter().zip(other).map(|(&a, &b)| a * b).sum();
        let needs = self.node(input).needs_grad;
        Ok(self.push(
            vec![1],
            vec![s],
            Op::Dot {
                input,
                other: other.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar node. Replaces gradients from any prior call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::NotScalar(self.node(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                // Only leaves keep their gradient; interior buffers are dropped.
                grads[idx] = Some(gy);
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            let send = |grads: &mut Vec<Option<Vec<T>>>, v: Var, g: Vec<T>| match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let n = node.shape[0];
                    let (dx, dk, db) = kernels::conv2d_backward(
                        geom,
                        n,
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &gy,
                        needs(*input),
                        needs(*kernel),
                        bias.is_some_and(needs),
                    );
                    if let Some(dx) = dx {
                        send(&mut grads, *input, dx);
                    }
                    if let Some(dk) = dk {
                        send(&mut grads, *kernel, dk);
                    }
                    if let (Some(db), Some(b)) = (db, bias) {
                        send(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose2d { input, kernel, geom } => {
                    let n = node.shape[0];
                    let (dx, dk) = kernels::conv_transpose2d_backward(
                        geom,
                        n,
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &gy,
                        needs(*input),
                        needs(*kernel),
                    );
                    if let Some(dx) = dx {
                        send(&mut grads, *input, dx);
                    }
                    if let Some(dk) = dk {
                        send(&mut grads, *kernel, dk);
                    }
                }
                Op::Gather { input, index } => {
                    let mut dx = vec![T::zero(); self.nodes[input.0].value.len()];
                    for (&i, &g) in index.iter().zip(&gy) {
                        if i != usize::MAX {
                            dx[i] = dx[i] + g;
                        }
                    }
                    send(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[input.0].value;
                    let dx = x
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    send(&mut grads, *input, dx);
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        send(&mut grads, *a, gy.clone());
                    }
                    if needs(*b) {
                        send(&mut grads, *b, gy);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if needs(*a) {
                        let da = gy.iter().zip(vb).map(|(&g, &v)| g * v).collect();
                        send(&mut grads, *a, da);
                    }
                    if needs(*b) {
                        let db = gy.iter().zip(va).map(|(&g, &v)| g * v).collect();
                        send(&mut grads, *b, db);
                    }
                }
                Op::Scale { input, factor } => {
                    let dx = gy.iter().map(|&g| g * *factor).collect();
                    send(&mut grads, *input, dx);
                }
                Op::Dropout { input, mask } => {
                    let dx = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    send(&mut grads, *input, dx);
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                    keep,
                    k,
                    inner,
                    count,
                } => {
                    let mut dx = vec![T::zero(); probs.len()];
                    if *count > 0 {
                        let scale = gy[0] / T::from_f64(*count as f64);
                        let n = probs.len() / (k * inner);
                        for b in 0..n {
                            for p in 0..*inner {
                                let pos = b * inner + p;
                                if !keep[pos] {
                                    continue;
                                }
                                for c in 0..*k {
                                    let at = b * k * inner + c * inner + p;
                                    let onehot = if c == targets[pos] { T::one() } else { T::zero() };
                                    dx[at] = (probs[at] - onehot) * scale;
                                }
                            }
                        }
                    }
                    send(&mut grads, *logits, dx);
                }
                Op::L1Masked {
                    pred,
                    target,
                    mask,
                    denom,
                } => {
                    let scale = gy[0] / T::from_f64(*denom as f64);
                    let p = &self.nodes[pred.0].value;
                    let dx = p
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&p, &t), &m)| {
                            let d = p - t;
                            let s = if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            m * s * scale
                        })
                        .collect();
                    send(&mut grads, *pred, dx);
                }
                Op::Sum { input } => {
                    let dx = vec![gy[0]; self.nodes[input.0].value.len()];
                    send(&mut grads, *input, dx);
                }
                Op::Dot { input, other } => {
                    let dx = other.iter().map(|&o| o * gy[0]).collect();
                    send(&mut grads, *input, dx);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
