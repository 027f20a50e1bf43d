//! Forward and backward kernels on raw buffers. The autodiff graph calls
//! into these; they know nothing about nodes or gradients bookkeeping.

use rayon::prelude::*;

use super::tensor::Element;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution mapping `c x h x w` to `f x oh x ow`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution of an `h x w` input.
    pub fn conv(
        op: &'static str,
        (c, h, w): (usize, usize, usize),
        (f, kc, kh, kw): (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kc != c {
            return Err(Error::shape(op, format!("input channels {c} != kernel channels {kc}")));
        }
        if stride == 0 {
            return Err(Error::geometry(op, "stride must be >= 1"));
        }
        if kh > h + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel height {kh} exceeds padded height {}", h + 2 * pad),
            ));
        }
        if kw > w + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel width {kw} exceeds padded width {}", w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = K * im2col(x[n]) + b` for every batch item.
pub fn conv2d_forward<T: Element>(g: &ConvGeom, n: usize, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * g.out_plane();
    let mut y = vec![T::zero(); n * out_len];
    y.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(yn, xn)| {
            let plane = g.out_plane();
            if let Some(b) = bias {
                for f in 0..g.f {
                    yn[f * plane..(f + 1) * plane].fill(b[f]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if g.is_pointwise() {
                T::gemm(g.f, g.c, plane, k, false, xn, false, yn, beta);
            } else {
                let mut col = vec![T::zero(); g.col_rows() * plane];
                im2col(g, xn, &mut col);
                T::gemm(g.f, g.col_rows(), plane, k, false, &col, false, yn, beta);
            }
        });
    y
}

/// Optional gradient buffer; `None` when the caller did not ask for it.
pub type Grad<T> = Option<Vec<T>>;

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    k: &[T],
    dy: &[T],
    need_dx: bool,
    need_dk: bool,
    need_db: bool,
) -> (Grad<T>, Grad<T>, Grad<T>) {
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * g.out_plane();
    let plane = g.out_plane();
    let krows = g.col_rows();

    let per_item: Vec<(Grad<T>, Grad<T>)> = x
        .par_chunks(in_len)
        .zip(dy.par_chunks(out_len))
        .map(|(xn, dyn_)| {
            let col = if need_dk && !g.is_pointwise() {
                let mut col = vec![T::zero(); krows * plane];
                im2col(g, xn, &mut col);
                Some(col)
            } else {
                None
            };
            let dk = need_dk.then(|| {
                let mut dk = vec![T::zero(); g.f * krows];
                let src = col.as_deref().unwrap_or(xn);
                T::gemm(g.f, plane, krows, dyn_, false, src, true, &mut dk, T::zero());
                dk
            });
            let dx = need_dx.then(|| {
                if g.is_pointwise() {
                    let mut dx = vec![T::zero(); in_len];
                    T::gemm(g.c, g.f, plane, k, true, dyn_, false, &mut dx, T::zero());
                    dx
                } else {
                    let mut dcol = vec![T::zero(); krows * plane];
                    T::gemm(krows, g.f, plane, k, true, dyn_, false, &mut dcol, T::zero());
                    let mut dx = vec![T::zero(); in_len];
                    col2im(g, &dcol, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut out = Vec::with_capacity(n * in_len);
        for (dx, _) in &per_item {
            out.extend_from_slice(dx.as_ref().expect("dx computed"));
        }
        out
    });
    let dk = need_dk.then(|| {
        let mut acc = vec![T::zero(); g.f * krows];
        for (_, dk) in &per_item {
            for (a, &b) in acc.iter_mut().zip(dk.as_ref().expect("dk computed")) {
                *a = *a + b;
            }
        }
        acc
    });
    let db = need_db.then(|| {
        let mut acc = vec![T::zero(); g.f];
        for dyn_ in dy.chunks(out_len) {
            for (f, a) in acc.iter_mut().enumerate() {
                *a = *a + dyn_[f * plane..(f + 1) * plane].iter().copied().sum::<T>();
            }
        }
        acc
    });
    (dx, dk, db)
}

/// Transposed convolution, the adjoint of [`conv2d_forward`] w.r.t. its input.
///
/// `g` describes the forward convolution that maps the transposed op's
/// *output* (`g.c x g.h x g.w`) down to its *input* (`g.f x g.oh x g.ow`).
pub fn conv_transpose2d_forward<T: Element>(g: &ConvGeom, n: usize, x: &[T], k: &[T]) -> Vec<T> {
    let in_len = g.f * g.out_plane();
    let out_len = g.c * g.h * g.w;
    let plane = g.out_plane();
    let krows = g.col_rows();
    let mut y = vec![T::zero(); n * out_len];
    y.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(yn, xn)| {
            let mut col = vec![T::zero(); krows * plane];
            T::gemm(krows, g.f, plane, k, true, xn, false, &mut col, T::zero());
            col2im(g, &col, yn);
        });
    y
}

pub fn conv_transpose2d_backward<T: Element>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    k: &[T],
    dy: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Grad<T>, Grad<T>) {
    let in_len = g.f * g.out_plane();
    let out_len = g.c * g.h * g.w;
    let plane = g.out_plane();
    let krows = g.col_rows();
    let per_item: Vec<(Grad<T>, Grad<T>)> = x
        .par_chunks(in_len)
        .zip(dy.par_chunks(out_len))
        .map(|(xn, dyn_)| {
            let mut col = vec![T::zero(); krows * plane];
            im2col(g, dyn_, &mut col);
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); in_len];
                T::gemm(g.f, krows, plane, k, false, &col, false, &mut dx, T::zero());
                dx
            });
            let dk = need_dk.then(|| {
                let mut dk = vec![T::zero(); g.f * krows];
                T::gemm(g.f, plane, krows, xn, false, &col, true, &mut dk, T::zero());
                dk
            });
            (dx, dk)
        })
        .collect();
    let dx = need_dx.then(|| {
        let mut out = Vec::with_capacity(n * in_len);
        for (dx, _) in &per_item {
            out.extend_from_slice(dx.as_ref().expect("dx computed"));
        }
        out
    });
    let dk = need_dk.then(|| {
        let mut acc = vec![T::zero(); g.f * krows];
        for (_, dk) in &per_item {
            for (a, &b) in acc.iter_mut().zip(dk.as_ref().expect("dk computed")) {
                *a = *a + b;
            }
        }
        acc
    });
    (dx, dk)
}

/// Max pooling over `window x window` patches. Returns the pooled values and,
/// per output element, the flat input index that produced it. Ties resolve to
/// the first maximum in row-major window order.
pub fn maxpool2d_forward<T: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    window: usize,
    stride: usize,
    x: &[T],
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                y.push(best_v);
                arg.push(best);
            }
        }
    }
    (y, arg, oh, ow)
}

/// Axis-aligned box in normalized `[0,1]` feature-map coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        NormBox { x0, y0, x1, y1 }
    }

    pub fn full() -> Self {
        NormBox::new(0.0, 0.0, 1.0, 1.0)
    }

    /// Clamps to the unit square and orders the corners.
    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let (x0, x1) = (c(self.x0.min(self.x1)), c(self.x0.max(self.x1)));
        let (y0, y1) = (c(self.y0.min(self.y1)), c(self.y0.max(self.y1)));
        NormBox { x0, y0, x1, y1 }
    }
}

/// Half-open index ranges of each ROI bin along one axis.
pub fn roi_bins(lo: f64, hi: f64, size: usize, bins: usize) -> Vec<(usize, usize)> {
    let lo = lo * size as f64;
    let hi = hi * size as f64;
    let step = (hi - lo) / bins as f64;
    (0..bins)
        .map(|i| {
            let a = lo + i as f64 * step;
            let b = lo + (i + 1) as f64 * step;
            let start = (a.floor().max(0.0) as usize).min(size - 1);
            let end = (b.ceil().max(0.0) as usize).min(size).max(start + 1);
            (start, end)
        })
        .collect()
}

/// Max-pools one channel-plane stack `[c, h, w]` over an `out_h x out_w`
/// partition of `roi`. Writes values and source indices (relative to `x`).
pub fn roi_pool_plane<T: Element>(
    (c, h, w): (usize, usize, usize),
    x: &[T],
    roi: NormBox,
    out_h: usize,
    out_w: usize,
    values: &mut [T],
    argmax: &mut [usize],
) {
    let roi = roi.clamped();
    let rows = roi_bins(roi.y0, roi.y1, h, out_h);
    let cols = roi_bins(roi.x0, roi.x1, w, out_w);
    for ch in 0..c {
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let mut best = (ch * h + r0) * w + c0;
                for y in r0..r1 {
                    for x_ in c0..c1 {
                        let idx = (ch * h + y) * w + x_;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = (ch * out_h + i) * out_w + j;
                values[o] = x[best];
                argmax[o] = best;
            }
        }
    }
}

/// Numerically stable softmax over axis 1 of a `[n, k, inner]` layout.
pub fn softmax_axis1<T: Element>(n: usize, k: usize, inner: usize, logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for b in 0..n {
        for p in 0..inner {
            let at = |c: usize| b * k * inner + c * inner + p;
            let mut m = logits[at(0)];
            for c in 1..k {
                m = m.max(logits[at(c)]);
            }
            let mut s = T::zero();
            for c in 0..k {
                let e = (logits[at(c)] - m).exp();
                out[at(c)] = e;
                s = s + e;
            }
            for c in 0..k {
                out[at(c)] = out[at(c)] / s;
            }
        }
    }
    out
}
