//! Layer kernels. The slice-level functions operate on one sample and are
//! shared by the graph executor; the tensor-level wrappers validate shapes.

use crate::engine::scalar::{gemm, Layout};
use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Spatial geometry of a valid, stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.filters * self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(input: &[T], d: &ConvDims, col: &mut Vec<T>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hw = oh * ow;
    // Every entry is overwritten below.
    col.resize(d.patch_len() * hw, T::zero());
    let mut row = 0;
    for c in 0..d.channels {
        let plane = &input[c * d.height * d.width..(c + 1) * d.height * d.width];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..oh {
                    let src = &plane[(y + i) * d.width + j..(y + i) * d.width + j + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], d: &ConvDims, dinput: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hw = oh * ow;
    let mut row = 0;
    for c in 0..d.channels {
        let plane = &mut dinput[c * d.height * d.width..(c + 1) * d.height * d.width];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..oh {
                    let dst = &mut plane[(y + i) * d.width + j..(y + i) * d.width + j + ow];
                    for (o, s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *o = *o + *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Outputs at least this wide use the direct kernels; narrower ones go
/// through im2col and GEMM.
const DIRECT_MIN_WIDTH: usize = 24;
const _: () = assert!(DIRECT_MIN_WIDTH >= LANES);

/// Output columns computed together by the direct kernels.
const LANES: usize = 16;

#[inline(always)]
fn lanes<T: Copy>(s: &[T], at: usize) -> &[T; LANES] {
    s[at..at + LANES].try_into().expect("lane slice")
}

#[inline(always)]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o = *o + a * *s;
    }
}

/// Input offset of every kernel tap relative to the output pixel.
fn tap_offsets(d: &ConvDims) -> Vec<usize> {
    let mut taps = Vec::with_capacity(d.patch_len());
    for c in 0..d.channels {
        for i in 0..d.kh {
            for j in 0..d.kw {
                taps.push((c * d.height + i) * d.width + j);
            }
        }
    }
    taps
}

/// Filters whose kernel gradients are accumulated together: each loaded
/// input lane feeds this many accumulators.
const FILTER_BLOCK: usize = 4;

/// Kernel taps of filters `f0..f0 + N`, interleaved by tap.
fn block_kernels<T: Scalar, const N: usize>(kernels: &[T], plen: usize, f0: usize) -> Vec<[T; N]> {
    (0..plen)
        .map(|t| std::array::from_fn(|n| kernels[(f0 + n) * plen + t]))
        .collect()
}

#[inline(always)]
fn forward_block<T: Scalar, const N: usize>(
    input: &[T],
    d: &ConvDims,
    taps: &[usize],
    kernels: &[T],
    bias: &[T],
    f0: usize,
    out: &mut [T],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hw = oh * ow;
    let kb = block_kernels::<T, N>(kernels, d.patch_len(), f0);
    for y in 0..oh {
        // The last chunk is aligned to the row end and may overlap the
        // previous one; overlapping columns are recomputed identically.
        for x0 in (0..ow).step_by(LANES).map(|x| x.min(ow - LANES)) {
            let base = y * d.width + x0;
            let mut acc: [[T; LANES]; N] = std::array::from_fn(|n| [bias[f0 + n]; LANES]);
            for (&off, k) in taps.iter().zip(&kb) {
                let src = lanes(input, base + off);
                for n in 0..N {
                    for t in 0..LANES {
                        acc[n][t] = acc[n][t] + k[n] * src[t];
                    }
                }
            }
            for (n, a) in acc.iter().enumerate() {
                let at = (f0 + n) * hw + y * ow + x0;
                out[at..at + LANES].copy_from_slice(a);
            }
        }
    }
}

#[inline(always)]
fn direct_forward<T: Scalar>(input: &[T], d: &ConvDims, kernels: &[T], bias: &[T], out: &mut [T]) {
    let taps = tap_offsets(d);
    for f in 0..d.filters {
        forward_block::<T, 1>(input, d, &taps, kernels, bias, f, out);
    }
}

/// Kernel gradients of filters `f0..f0 + N`, accumulated into `dk`.
#[inline(always)]
fn kernel_grad_block<T: Scalar, const N: usize>(
    input: &[T],
    d: &ConvDims,
    taps: &[usize],
    dout: &[T],
    f0: usize,
    dk: &mut [T],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hw = oh * ow;
    let (full, rem) = (ow / LANES, ow % LANES);
    // A short final chunk is read row-end aligned with the columns already
    // covered masked out.
    let mask: [bool; LANES] = std::array::from_fn(|t| t >= LANES - rem);
    for (ti, &off) in taps.iter().enumerate() {
        let mut acc = [[T::zero(); LANES]; N];
        let mut last = [[T::zero(); LANES]; N];
        for y in 0..oh {
            let src = &input[y * d.width + off..];
            let row = y * ow;
            for c in 0..full {
                let a = lanes(src, c * LANES);
                for n in 0..N {
                    let g = lanes(dout, (f0 + n) * hw + row + c * LANES);
                    for t in 0..LANES {
                        acc[n][t] = acc[n][t] + a[t] * g[t];
                    }
                }
            }
            if rem > 0 {
                let a = lanes(src, ow - LANES);
                for n in 0..N {
                    let g = lanes(dout, (f0 + n) * hw + row + ow - LANES);
                    for t in 0..LANES {
                        let p = a[t] * g[t];
                        last[n][t] = last[n][t] + if mask[t] { p } else { T::zero() };
                    }
                }
            }
        }
        for n in 0..N {
            let slot = &mut dk[(f0 + n) * d.patch_len() + ti];
            *slot = acc[n].iter().chain(&last[n]).fold(*slot, |s, v| s + *v);
        }
    }
}

#[inline(always)]
fn direct_backward<T: Scalar>(
    input: &[T],
    d: &ConvDims,
    kernels: &[T],
    dout: &[T],
    dk: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let taps = tap_offsets(d);
    let mut f0 = 0;
    while f0 + FILTER_BLOCK <= d.filters {
        kernel_grad_block::<T, FILTER_BLOCK>(input, d, &taps, dout, f0, dk);
        f0 += FILTER_BLOCK;
    }
    for f in f0..d.filters {
        kernel_grad_block::<T, 1>(input, d, &taps, dout, f, dk);
    }
    if let Some(dinput) = dinput {
        dinput.iter_mut().for_each(|v| *v = T::zero());
        for (f, g) in dout.chunks_exact(oh * ow).enumerate() {
            let kf = &kernels[f * d.patch_len()..(f + 1) * d.patch_len()];
            for (&off, &k) in taps.iter().zip(kf) {
                for y in 0..oh {
                    let at = y * d.width + off;
                    axpy(&mut dinput[at..at + ow], k, &g[y * ow..(y + 1) * ow]);
                }
            }
        }
    }
}

/// The direct kernels compiled with AVX2/FMA so their lane loops vectorize
/// wider. Float operations are never contracted, so both builds of a kernel
/// produce identical results.
#[cfg(target_arch = "x86_64")]
mod wide {
    use super::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn forward<T: Scalar>(input: &[T], d: &ConvDims, kernels: &[T], bias: &[T], out: &mut [T]) {
        direct_forward(input, d, kernels, bias, out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn backward<T: Scalar>(
        input: &[T],
        d: &ConvDims,
        kernels: &[T],
        dout: &[T],
        dk: &mut [T],
        dinput: Option<&mut [T]>,
    ) {
        direct_backward(input, d, kernels, dout, dk, dinput)
    }

    pub(super) fn available() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
}

fn run_direct_forward<T: Scalar>(input: &[T], d: &ConvDims, kernels: &[T], bias: &[T], out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        // SAFETY: the required CPU features were just detected.
        return unsafe { wide::forward(input, d, kernels, bias, out) };
    }
    direct_forward(input, d, kernels, bias, out)
}

fn run_direct_backward<T: Scalar>(
    input: &[T],
    d: &ConvDims,
    kernels: &[T],
    dout: &[T],
    dk: &mut [T],
    dinput: Option<&mut [T]>,
) {
    #[cfg(target_arch = "x86_64")]
    if wide::available() {
        // SAFETY: the required CPU features were just detected.
        return unsafe { wide::backward(input, d, kernels, dout, dk, dinput) };
    }
    direct_backward(input, d, kernels, dout, dk, dinput)
}

pub(crate) fn conv_forward_sample<T: Scalar>(
    input: &[T],
    d: &ConvDims,
    kernels: &[T],
    bias: &[T],
    out: &mut [T],
    col: &mut Vec<T>,
) {
    if d.out_w() >= DIRECT_MIN_WIDTH {
        return run_direct_forward(input, d, kernels, bias, out);
    }
    let hw = d.out_h() * d.out_w();
    im2col(input, d, col);
    for (f, b) in bias.iter().enumerate() {
        out[f * hw..(f + 1) * hw].iter_mut().for_each(|v| *v = *b);
    }
    gemm(
        d.filters,
        d.patch_len(),
        hw,
        T::one(),
        kernels,
        Layout::Normal,
        col,
        Layout::Normal,
        T::one(),
        out,
    );
}

/// Accumulates kernel and bias gradients of one sample into `dk`/`db`, and
/// writes (overwrites) the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_sample<T: Scalar>(
    input: &[T],
    d: &ConvDims,
    kernels: &[T],
    dout: &[T],
    dk: &mut [T],
    db: &mut [T],
    dinput: Option<&mut [T]>,
    col: &mut Vec<T>,
) {
    let hw = d.out_h() * d.out_w();
    for (f, g) in db.iter_mut().enumerate() {
        *g = *g + dout[f * hw..(f + 1) * hw].iter().copied().sum::<T>();
    }
    if d.out_w() >= DIRECT_MIN_WIDTH {
        return run_direct_backward(input, d, kernels, dout, dk, dinput);
    }
    im2col(input, d, col);
    gemm(
        d.filters,
        hw,
        d.patch_len(),
        T::one(),
        dout,
        Layout::Normal,
        col,
        Layout::Transposed,
        T::one(),
        dk,
    );
    if let Some(dinput) = dinput {
        gemm(
            d.patch_len(),
            d.filters,
            hw,
            T::one(),
            kernels,
            Layout::Transposed,
            dout,
            Layout::Normal,
            T::zero(),
            col,
        );
        dinput.iter_mut().for_each(|v| *v = T::zero());
        col2im_add(col, d, dinput);
    }
}

/// Geometry of non-overlapping `size x size` max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
}

impl PoolDims {
    pub fn out_h(&self) -> usize {
        self.height / self.size
    }

    pub fn out_w(&self) -> usize {
        self.width / self.size
    }
}

pub(crate) fn pool_forward_sample<T: Scalar>(input: &[T], d: &PoolDims, out: &mut [T], argmax: &mut [u32]) {
    let (oh, ow, p) = (d.out_h(), d.out_w(), d.size);
    // Maxima first, whole output rows at a time; then each window's argmax
    // is the first pixel (row-major) equal to its maximum.
    for c in 0..d.channels {
        let base = c * d.height * d.width;
        for oy in 0..oh {
            let o = (c * oh + oy) * ow;
            let best = &mut out[o..o + ow];
            let top = base + oy * p * d.width;
            for (ox, b) in best.iter_mut().enumerate() {
                *b = input[top + ox * p];
            }
            for i in 0..p {
                let at = top + i * d.width;
                for (b, win) in best.iter_mut().zip(input[at..at + ow * p].chunks_exact(p)) {
                    for &v in win {
                        *b = if v > *b { v } else { *b };
                    }
                }
            }
            for (ox, (b, a)) in best.iter().zip(&mut argmax[o..o + ow]).enumerate() {
                let first = top + ox * p;
                *a = first as u32;
                'scan: for i in 0..p {
                    let at = first + i * d.width;
                    for (j, &v) in input[at..at + p].iter().enumerate() {
                        if v == *b {
                            *a = (at + j) as u32;
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
}

/// Routes `dout` to the argmax positions, accumulating into `dinput`, which
/// must be zeroed by the caller.
pub(crate) fn pool_backward_sample<T: Scalar>(dout: &[T], argmax: &[u32], dinput: &mut [T]) {
    for (g, &a) in dout.iter().zip(argmax) {
        dinput[a as usize] = dinput[a as usize] + *g;
    }
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(op, format!("{what} rank"), rank, t.rank()));
    }
    Ok(())
}

fn conv_dims<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    expect_rank(OP, input, 3, "input")?;
    expect_rank(OP, kernels, 4, "kernels")?;
    expect_rank(OP, bias, 1, "bias")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, kc, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c {
        return Err(Error::shape(OP, "channel axis", c, kc));
    }
    if bias.shape()[0] != f {
        return Err(Error::shape(OP, "bias/filter axis", f, bias.shape()[0]));
    }
    if kh > h {
        return Err(Error::invalid(OP, format!("height axis: kernel {kh} exceeds input {h}")));
    }
    if kw > w {
        return Err(Error::invalid(OP, format!("width axis: kernel {kw} exceeds input {w}")));
    }
    Ok(ConvDims {
        channels: c,
        height: h,
        width: w,
        filters: f,
        kh,
        kw,
    })
}

/// Valid (unpadded), stride-1 cross-correlation of a `[C,H,W]` input with
/// `[F,C,kh,kw]` kernels.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels, bias)?;
    let mut out = vec![T::zero(); d.out_len()];
    let mut col = Vec::new();
    conv_forward_sample(input.data(), &d, kernels.data(), bias.data(), &mut out, &mut col);
    Tensor::new(&[d.filters, d.out_h(), d.out_w()], out)
}

/// Gradients of a conv2d output w.r.t. (input, kernels, bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input, kernels, bias)?;
    if dout.shape() != [d.filters, d.out_h(), d.out_w()] {
        return Err(Error::invalid("conv2d_backward", format!("gradient shape {:?}", dout.shape())));
    }
    let mut dk = Tensor::zeros(kernels.shape());
    let mut db = Tensor::zeros(bias.shape());
    let mut dx = Tensor::zeros(input.shape());
    let mut col = Vec::new();
    conv_backward_sample(
        input.data(),
        &d,
        kernels.data(),
        dout.data(),
        dk.data_mut(),
        db.data_mut(),
        Some(dx.data_mut()),
        &mut col,
    );
    Ok((dx, dk, db))
}

fn pool_dims<T: Scalar>(input: &Tensor<T>, size: usize) -> Result<PoolDims> {
    const OP: &str = "maxpool2d";
    expect_rank(OP, input, 3, "input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if size == 0 {
        return Err(Error::invalid(OP, "pooling size must be at least 1"));
    }
    if size > h || size > w {
        return Err(Error::invalid(OP, format!("pooling size {size} exceeds spatial extent {h}x{w}")));
    }
    Ok(PoolDims {
        channels: c,
        height: h,
        width: w,
        size,
    })
}

/// Non-overlapping max pooling over `[C,H,W]`; trailing rows/columns that do
/// not fill a window are dropped. Returns the flat input index of each
/// window's maximum.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let d = pool_dims(input, size)?;
    let n = d.channels * d.out_h() * d.out_w();
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0u32; n];
    pool_forward_sample(input.data(), &d, &mut out, &mut arg);
    Ok((
        Tensor::new(&[d.channels, d.out_h(), d.out_w()], out)?,
        arg.into_iter().map(|a| a as usize).collect(),
    ))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], dout: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != dout.len() {
        return Err(Error::shape("maxpool2d_backward", "window count", argmax.len(), dout.len()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let arg: Vec<u32> = argmax.iter().map(|&a| a as u32).collect();
    pool_backward_sample(dout.data(), &arg, dx.data_mut());
    Ok(dx)
}

fn fc_check<T: Scalar>(input: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    const OP: &str = "fully_connected";
    expect_rank(OP, w, 2, "weight")?;
    expect_rank(OP, b, 1, "bias")?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if input.len() != n {
        return Err(Error::shape(OP, "input axis", n, input.len()));
    }
    if b.len() != m {
        return Err(Error::shape(OP, "output axis", m, b.len()));
    }
    Ok((m, n))
}

/// `W * input + b`; the input is flattened.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = fc_check(input, w, b)?;
    let mut out = b.data().to_vec();
    gemm(m, n, 1, T::one(), w.data(), Layout::Normal, input.data(), Layout::Normal, T::one(), &mut out);
    Tensor::new(&[m], out)
}

/// Gradients of a fully connected output w.r.t. (input, weight, bias).
pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = fc_check(input, w, b)?;
    if dout.len() != m {
        return Err(Error::shape("fully_connected_backward", "output axis", m, dout.len()));
    }
    let mut dw = Tensor::zeros(&[m, n]);
    gemm(m, 1, n, T::one(), dout.data(), Layout::Normal, input.data(), Layout::Normal, T::zero(), dw.data_mut());
    let mut dx = vec![T::zero(); n];
    gemm(1, m, n, T::one(), dout.data(), Layout::Normal, w.data(), Layout::Normal, T::zero(), &mut dx);
    Ok((Tensor::new(input.shape(), dx)?, dw, dout.clone().reshape(&[m])?))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Routes `dout` through ReLU; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("relu_backward: shapes")
}
