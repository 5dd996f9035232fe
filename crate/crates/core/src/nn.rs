//! Forward and backward passes for every layer the model zoo composes.
//!
//! All tensors are channels-first (`[channels, height, width]`) and every
//! function is pure. Convolution is cross-correlation: kernels are not
//! flipped.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Strided, Tensor};

/// Parameter gradients keyed by local parameter name, plus the gradient with
/// respect to the layer input.
#[derive(Clone, Debug)]
pub struct LayerGrad<T: Real> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Real> LayerGrad<T> {
    fn input_only(input: Tensor<T>) -> Self {
        Self {
            params: BTreeMap::new(),
            input,
        }
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 {
            return None;
        }
        let padded = input + 2 * self.padding;
        if kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    let (&[in_ch, h, w], &[out_ch, k_in, kh, kw]) = (input.shape(), kernels.shape()) else {
        return Err(Error::config(format!(
            "conv2d expects input [n,H,W] and kernels [m,n,s1,s2], got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    };
    if in_ch != k_in {
        return Err(Error::config(format!(
            "conv2d: input has {in_ch} channels but kernels expect {k_in}"
        )));
    }
    let (Some(oh), Some(ow)) = (geom.output_extent(h, kh), geom.output_extent(w, kw)) else {
        return Err(Error::config(format!(
            "conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with {geom:?}"
        )));
    };
    Ok(ConvDims {
        in_ch,
        h,
        w,
        out_ch,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Unfolds the input into a `[in_ch*kh*kw, oh*ow]` patch matrix. Entries that
/// fall in the padding are zero.
fn im2col<T: Real>(input: &[T], d: &ConvDims, geom: ConvGeometry) -> Vec<T> {
    let p = d.oh * d.ow;
    let mut cols = vec![T::zero(); d.in_ch * d.kh * d.kw * p];
    let (s, pad) = (geom.stride, geom.padding);
    for c in 0..d.in_ch {
        let plane = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                // output columns whose source column lies inside the image
                let lo = (pad.saturating_sub(kx)).div_ceil(s);
                let hi = (d.w + pad).saturating_sub(kx).div_ceil(s).min(d.ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.oh {
                    let iy = oy * s + ky;
                    if iy < pad || iy - pad >= d.h {
                        continue;
                    }
                    let src = &plane[(iy - pad) * d.w..(iy - pad + 1) * d.w];
                    let out = &mut dst[oy * d.ow + lo..oy * d.ow + hi];
                    let first = lo * s + kx - pad;
                    if s == 1 {
                        out.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, v) in out.iter_mut().zip(src[first..].iter().step_by(s)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, geom: ConvGeometry) -> Vec<T> {
    let p = d.oh * d.ow;
    let mut out = vec![T::zero(); d.in_ch * d.h * d.w];
    let pad = geom.padding as isize;
    for c in 0..d.in_ch {
        let plane = &mut out[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] =
                                plane[iy as usize * d.w + ix as usize] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results are deterministic.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `F_j[y,x] = bias_j + sum_i sum_{l,h} D_i[y*stride+l-pad, x*stride+h-pad] * W_ji[l,h]`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels, geom)?;
    bias.expect_shape(&[d.out_ch], "conv2d bias")?;
    let p = d.oh * d.ow;
    let k = d.in_ch * d.kh * d.kw;
    let cols = im2col(input.data(), &d, geom);
    let mut out = Vec::with_capacity(d.out_ch * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    // out[out_ch, p] += W[out_ch, k] * cols[k, p]
    T::gemm(
        d.out_ch,
        k,
        p,
        Strided::row_major(kernels.data(), k),
        Strided::row_major(&cols, p),
        T::one(),
        &mut out,
    );
    Tensor::new(vec![d.out_ch, d.oh, d.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to `weight`, `bias` and the input.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    conv2d_backward_impl(input, kernels, geom, upstream, true)
}

/// Skips the input gradient when `want_input` is false (first layer); the
/// returned `input` field is then all zeros.
pub(crate) fn conv2d_backward_impl<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<LayerGrad<T>> {
    let d = conv_dims(input, kernels, geom)?;
    upstream.expect_shape(&[d.out_ch, d.oh, d.ow], "conv2d upstream gradient")?;
    let p = d.oh * d.ow;
    let k = d.in_ch * d.kh * d.kw;
    let cols = im2col(input.data(), &d, geom);
    let up = upstream.data();

    let d_bias: Vec<T> = up.chunks_exact(p).map(|g| g.iter().copied().sum()).collect();
    // dW[out_ch, k] = G[out_ch, p] * cols^T[p, k]
    let mut d_kernels = vec![T::zero(); d.out_ch * k];
    T::gemm(
        d.out_ch,
        p,
        k,
        Strided::row_major(up, p),
        Strided::transposed(&cols, p),
        T::zero(),
        &mut d_kernels,
    );
    let d_input = if want_input {
        // dcols[k, p] = W^T[k, out_ch] * G[out_ch, p]
        let mut d_cols = vec![T::zero(); k * p];
        T::gemm(
            k,
            d.out_ch,
            p,
            Strided::transposed(kernels.data(), k),
            Strided::row_major(up, p),
            T::zero(),
            &mut d_cols,
        );
        col2im(&d_cols, &d, geom)
    } else {
        vec![T::zero(); input.len()]
    };

    let mut params = BTreeMap::new();
    params.insert("weight".to_string(), Tensor::new(kernels.shape().to_vec(), d_kernels)?);
    params.insert("bias".to_string(), Tensor::new(vec![d.out_ch], d_bias)?);
    Ok(LayerGrad {
        params,
        input: Tensor::new(input.shape().to_vec(), d_input)?,
    })
}

/// `y = W x + b` for a flat input vector, `W` of shape `[out, in]`.
pub fn dense_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::config(format!("dense weight must be 2-D, got {:?}", weight.shape())));
    };
    if input.len() != inp {
        return Err(Error::config(format!(
            "dense expects {inp} inputs, got {}",
            input.len()
        )));
    }
    bias.expect_shape(&[out], "dense bias")?;
    let x = input.data();
    let y = (0..out)
        .map(|o| bias.data()[o] + dot(&weight.data()[o * inp..(o + 1) * inp], x))
        .collect();
    Tensor::new(vec![out], y)
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::config(format!("dense weight must be 2-D, got {:?}", weight.shape())));
    };
    if input.len() != inp {
        return Err(Error::config(format!(
            "dense expects {inp} inputs, got {}",
            input.len()
        )));
    }
    upstream.expect_shape(&[out], "dense upstream gradient")?;
    let x = input.data();
    let g = upstream.data();
    let mut d_w = Vec::with_capacity(out * inp);
    let mut d_x = vec![T::zero(); inp];
    for o in 0..out {
        d_w.extend(x.iter().map(|&xi| g[o] * xi));
        axpy(&mut d_x, g[o], &weight.data()[o * inp..(o + 1) * inp]);
    }
    let mut params = BTreeMap::new();
    params.insert("weight".to_string(), Tensor::new(vec![out, inp], d_w)?);
    params.insert("bias".to_string(), upstream.clone());
    Ok(LayerGrad {
        params,
        input: Tensor::new(input.shape().to_vec(), d_x)?,
    })
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the input is strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrad<T>> {
    let g = input.zip_map(upstream, |x, g| if x > T::zero() { g } else { T::zero() })?;
    Ok(LayerGrad::input_only(g))
}

fn pool_dims<T: Real>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [c, h, w] if h >= 2 && w >= 2 => Ok((c, h, w)),
        _ => Err(Error::config(format!(
            "maxpool2x2 expects [c,H,W] with H,W >= 2, got {:?}",
            input.shape()
        ))),
    }
}

/// Flat input index of the maximum of each 2x2 window (first maximum wins).
pub(crate) fn pool_argmax<T: Real>(input: &Tensor<T>, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped.
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = pool_dims(input)?;
    let idx = pool_argmax(input, c, h, w);
    let data = idx.iter().map(|&i| input.data()[i]).collect();
    Tensor::new(vec![c, h / 2, w / 2], data)
}

/// Routes each upstream entry to the position that won its window.
pub fn maxpool2x2_backward<T: Real>(
    input: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (c, h, w) = pool_dims(input)?;
    upstream.expect_shape(&[c, h / 2, w / 2], "maxpool upstream gradient")?;
    let mut g = vec![T::zero(); input.len()];
    for (&i, &u) in pool_argmax(input, c, h, w).iter().zip(upstream.data()) {
        g[i] = g[i] + u;
    }
    Ok(LayerGrad::input_only(Tensor::new(input.shape().to_vec(), g)?))
}

pub fn flatten<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input
        .clone()
        .reshape(&[input.len()])
        .expect("flatten preserves element count")
}

/// `[c,H,W] -> [c]` channel means.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::config(format!(
            "global_avg_pool expects [c,H,W], got {:?}",
            input.shape()
        )));
    };
    let n = T::from_usize(h * w).unwrap();
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward<T: Real>(
    input: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::config(format!(
            "global_avg_pool expects [c,H,W], got {:?}",
            input.shape()
        )));
    };
    upstream.expect_shape(&[c], "global_avg_pool upstream gradient")?;
    let n = T::from_usize(h * w).unwrap();
    let g = Tensor::from_fn(&[c, h, w], |i| upstream.data()[i / (h * w)] / n);
    Ok(LayerGrad::input_only(g))
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
