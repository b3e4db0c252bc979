//! Forward kernels and their hand-written adjoints.
//!
//! Every public forward op validates shapes and rejects non-finite output.
//! The `*_backward` functions are crate-private; [`super::tape::Tape`] is the
//! only caller.

use rayon::prelude::*;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to every variance before normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Lower clamp for probabilities inside `log`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Samples per partial weight-gradient accumulator in conv backward. Fixed so
/// the reduction order never depends on the thread count.
const WGRAD_CHUNK: usize = 8;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(OP, format!("input {x:?}, weight {w:?}: need NCHW and OIHW")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, i, kh, kw) = (w[0], w[1], w[2], w[3]);
        if c != i {
            return Err(Error::shape(OP, format!("input has {c} channels, weight expects {i}")));
        }
        if kh == 0 || kw == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                OP,
                format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.o * self.positions()
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an NCHW input with an OIHW kernel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", b.shape(), g.o)));
        }
    }
    let (ck, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.n * g.out_len()];
    let wd = weight.data();
    out.par_chunks_mut(g.out_len().max(1))
        .zip(x.data().par_chunks(g.in_len().max(1)))
        .for_each_init(
            || vec![T::zero(); ck * p],
            |cols, (dst, src)| {
                im2col(src, &g, cols);
                T::gemm(g.o, ck, p, T::one(), wd, (ck as isize, 1), cols, (p as isize, 1), T::zero(), dst, (p as isize, 1));
                if let Some(b) = bias {
                    for (row, &bv) in dst.chunks_mut(p).zip(b.data()) {
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            },
        );
    Tensor::new(g.out_shape(), out)?.ensure_finite("conv2d")
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if dy.shape() != g.out_shape().as_slice() {
        return Err(Error::shape("conv2d_backward", format!("dy {:?}", dy.shape())));
    }
    let (ck, p) = (g.patch(), g.positions());
    let (need_x, need_w, need_b) = need;

    let db = need_b.then(|| {
        let mut acc = vec![0.0f64; g.o];
        for sample in dy.data().chunks(g.out_len().max(1)) {
            for (o, row) in sample.chunks(p.max(1)).enumerate() {
                acc[o] += row.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        acc.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>()
    });

    let dw = need_w.then(|| {
        let chunks: Vec<usize> = (0..g.n).step_by(WGRAD_CHUNK).collect();
        let partials: Vec<Vec<T>> = chunks
            .par_iter()
            .map(|&start| {
                let end = (start + WGRAD_CHUNK).min(g.n);
                let mut acc = vec![T::zero(); g.o * ck];
                let mut cols = vec![T::zero(); ck * p];
                for s in start..end {
                    im2col(&x.data()[s * g.in_len()..][..g.in_len()], &g, &mut cols);
                    let dys = &dy.data()[s * g.out_len()..][..g.out_len()];
                    T::gemm(g.o, p, ck, T::one(), dys, (p as isize, 1), &cols, (1, p as isize), T::one(), &mut acc, (ck as isize, 1));
                }
                acc
            })
            .collect();
        let mut total = vec![T::zero(); g.o * ck];
        for part in partials {
            total.iter_mut().zip(part).for_each(|(t, v)| *t += v);
        }
        total
    });

    let dx = need_x.then(|| {
        let mut dx = vec![T::zero(); g.n * g.in_len()];
        let wd = weight.data();
        dx.par_chunks_mut(g.in_len().max(1))
            .zip(dy.data().par_chunks(g.out_len().max(1)))
            .for_each_init(
                || vec![T::zero(); ck * p],
                |dcols, (dst, dys)| {
                    T::gemm(ck, g.o, p, T::one(), wd, (1, ck as isize), dys, (p as isize, 1), T::zero(), dcols, (p as isize, 1));
                    col2im_add(dcols, &g, dst);
                },
            );
        dx
    });

    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        db: db.map(|d| Tensor::new(vec![g.o], d)).transpose()?,
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel mean and (population) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("norm_stats", format!("{} means, {} variances", mean.len(), var.len())));
        }
        if let Some(v) = var.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance {v} is negative or non-finite")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite { op: "norm_stats" });
        }
        Ok(Self { mean, var })
    }

    /// Mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> NormStats<U> {
        NormStats {
            mean: self.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Which statistics a normalization layer divides by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch over N x spatial.
    UseBatch,
    /// The layer's stored statistics.
    UseStored,
}

/// Stored statistics plus the learned per-channel affine of one norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    stats: NormStats<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(stats: NormStats<T>, scale: Vec<T>, shift: Vec<T>, eps: f64) -> Result<Self> {
        let c = stats.channels();
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("batch_norm_state", format!("{c} channels, scale {}, shift {}", scale.len(), shift.len())));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { stats, scale, shift, eps })
    }

    /// Fresh layer: identity statistics, unit scale, zero shift.
    pub fn fresh(channels: usize) -> Self {
        Self {
            stats: NormStats::identity(channels),
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            eps: NORM_EPS,
        }
    }

    pub fn stats(&self) -> &NormStats<T> {
        &self.stats
    }

    /// Swaps in a new (mean, variance) pair as a unit.
    pub fn replace_stats(&mut self, stats: NormStats<T>) -> Result<NormStats<T>> {
        if stats.channels() != self.stats.channels() {
            return Err(Error::shape("batch_norm_state", format!("{} != {}", stats.channels(), self.stats.channels())));
        }
        Ok(std::mem::replace(&mut self.stats, stats))
    }
}

/// (channels, positions-per-channel-per-sample) of a rank >= 2 tensor.
fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("{shape:?}: need at least N x C")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel sums and sums of squares, in f64.
pub(crate) fn channel_sums<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, c, s) = channel_layout(x.shape(), "channel_sums")?;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for sample in x.data().chunks(c * s).take(n) {
        for (ch, plane) in sample.chunks(s.max(1)).enumerate() {
            for v in plane {
                let v = v.as_f64();
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    Ok((sum, sq, n * s))
}

/// Exact per-channel mean and population variance.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, s) = channel_layout(x.shape(), "channel_moments")?;
    if n * s == 0 {
        return Err(Error::EmptyBatch { op: "channel_moments" });
    }
    let (sum, _, count) = channel_sums(x)?;
    let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
    // Two-pass variance: the sum-of-squares shortcut loses digits on
    // activations with large means.
    let mut var = vec![0.0f64; c];
    for sample in x.data().chunks(c * s) {
        for (ch, plane) in sample.chunks(s).enumerate() {
            for v in plane {
                let d = v.as_f64() - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok((mean, var))
}

fn check_channels(op: &'static str, c: usize, lens: &[usize]) -> Result<()> {
    if lens.iter().any(|&l| l != c) {
        return Err(Error::shape(op, format!("input has {c} channels, parameters have {lens:?}")));
    }
    Ok(())
}

/// `y = scale * (x - mean) * inv_std + shift`, per channel.
fn normalize_affine<T: Scalar>(x: &Tensor<T>, mean: &[f64], inv_std: &[f64], scale: &[T], shift: &[T]) -> Vec<T> {
    let (_, c, s) = channel_layout(x.shape(), "normalize").expect("validated by caller");
    let mut out = Vec::with_capacity(x.len());
    for sample in x.data().chunks(c * s) {
        for (ch, plane) in sample.chunks(s).enumerate() {
            let a = scale[ch].as_f64() * inv_std[ch];
            let b = shift[ch].as_f64() - a * mean[ch];
            out.extend(plane.iter().map(|v| T::from_f64_lossy(a * v.as_f64() + b)));
        }
    }
    out
}

/// Batch-statistics normalization. Returns output, batch statistics and
/// per-channel `1/sqrt(var + eps)`.
pub(crate) fn bn_forward_batch<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>, Vec<f64>)> {
    let (_, c, _) = channel_layout(x.shape(), "batch_norm")?;
    check_channels("batch_norm", c, &[scale.len(), shift.len()])?;
    if x.is_empty() {
        return Err(Error::EmptyBatch { op: "batch_norm" });
    }
    let (mean, var) = channel_moments(x)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let out = normalize_affine(x, &mean, &inv_std, scale, shift);
    let stats = NormStats {
        mean: mean.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        var: var.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?.ensure_finite("batch_norm")?, stats, inv_std))
}

pub(crate) fn bn_forward_stored<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    stats: &NormStats<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, _) = channel_layout(x.shape(), "batch_norm")?;
    check_channels("batch_norm", c, &[scale.len(), shift.len(), stats.channels()])?;
    let mean: Vec<f64> = stats.mean.iter().map(|v| v.as_f64()).collect();
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
    let out = normalize_affine(x, &mean, &inv_std, scale, shift);
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("batch_norm")
}

/// Normalizes `x` with `state` in the requested mode.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, state: &BatchNormState<T>, mode: NormMode) -> Result<Tensor<T>> {
    match mode {
        NormMode::UseBatch => bn_forward_batch(x, &state.scale, &state.shift, state.eps).map(|r| r.0),
        NormMode::UseStored => bn_forward_stored(x, &state.scale, &state.shift, &state.stats, state.eps),
    }
}

/// Adjoint of normalization. `batch_mode` selects whether gradients flow
/// through the batch statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    mean: &[f64],
    inv_std: &[f64],
    dy: &Tensor<T>,
    batch_mode: bool,
    need_x: bool,
    need_affine: bool,
) -> Result<(Option<Tensor<T>>, Option<(Vec<T>, Vec<T>)>)> {
    let (_, c, s) = channel_layout(x.shape(), "batch_norm_backward")?;
    let count = (x.len() / c.max(1)) as f64;
    // sum(dy) and sum(dy * xhat) per channel
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (xs, ds) in x.data().chunks(c * s).zip(dy.data().chunks(c * s)) {
        for ch in 0..c {
            let (xp, dp) = (&xs[ch * s..][..s], &ds[ch * s..][..s]);
            for (xv, dv) in xp.iter().zip(dp) {
                let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                sum_dy[ch] += dv.as_f64();
                sum_dy_xhat[ch] += dv.as_f64() * xhat;
            }
        }
    }
    let affine = need_affine.then(|| {
        (
            sum_dy_xhat.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            sum_dy.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    });
    let dx = need_x.then(|| {
        let mut out = Vec::with_capacity(x.len());
        for (xs, ds) in x.data().chunks(c * s).zip(dy.data().chunks(c * s)) {
            for ch in 0..c {
                let g = scale[ch].as_f64() * inv_std[ch];
                let (xp, dp) = (&xs[ch * s..][..s], &ds[ch * s..][..s]);
                if batch_mode {
                    let m1 = sum_dy[ch] / count;
                    let m2 = sum_dy_xhat[ch] / count;
                    out.extend(xp.iter().zip(dp).map(|(xv, dv)| {
                        let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                        T::from_f64_lossy(g * (dv.as_f64() - m1 - xhat * m2))
                    }));
                } else {
                    out.extend(dp.iter().map(|dv| T::from_f64_lossy(g * dv.as_f64())));
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    });
    Ok((dx.transpose()?, affine))
}

// ---------------------------------------------------------------------------
// Channel-wise modulation
// ---------------------------------------------------------------------------

/// `out[n, c, ...] = gamma[c] * x[n, c, ...] + beta[c]`.
///
/// Channels at exactly (1, 0) pass through untouched, so an identity
/// modulation is bit-identical to its input (including signed zeros).
pub fn affine_modulate<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, s) = channel_layout(x.shape(), "affine_modulate")?;
    check_channels("affine_modulate", c, &[gamma.len(), beta.len()])?;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.clone();
    if c * s > 0 {
        for sample in out.data_mut().chunks_mut(c * s) {
            for (ch, plane) in sample.chunks_mut(s.max(1)).enumerate() {
                if g[ch] == T::one() && b[ch] == T::zero() {
                    continue;
                }
                plane.iter_mut().for_each(|v| *v = g[ch] * *v + b[ch]);
            }
        }
    }
    out.ensure_finite("affine_modulate")
}

pub(crate) fn affine_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    need_x: bool,
    need_params: bool,
) -> Result<(Option<Tensor<T>>, Option<(Tensor<T>, Tensor<T>)>)> {
    let (_, c, s) = channel_layout(x.shape(), "affine_backward")?;
    let params = if need_params {
        let mut dg = vec![0.0f64; c];
        let mut db = vec![0.0f64; c];
        for (xs, ds) in x.data().chunks(c * s).zip(dy.data().chunks(c * s)) {
            for ch in 0..c {
                for (xv, dv) in xs[ch * s..][..s].iter().zip(&ds[ch * s..][..s]) {
                    dg[ch] += xv.as_f64() * dv.as_f64();
                    db[ch] += dv.as_f64();
                }
            }
        }
        let conv = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(T::from_f64_lossy).collect());
        Some((conv(dg)?, conv(db)?))
    } else {
        None
    };
    let dx = if need_x {
        let g = gamma.data();
        let mut out = dy.clone();
        if c * s > 0 {
            for sample in out.data_mut().chunks_mut(c * s) {
                for (ch, plane) in sample.chunks_mut(s.max(1)).enumerate() {
                    plane.iter_mut().for_each(|v| *v *= g[ch]);
                }
            }
        }
        Some(out)
    } else {
        None
    };
    Ok((dx, params))
}

// ---------------------------------------------------------------------------
// Pointwise, pooling, dense
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| if v > T::zero() { v } else { T::zero() }).ensure_finite("relu")
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &dv)| if xv > T::zero() { dv } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)?.ensure_finite("add")
}

/// Non-overlapping `k x k` mean pooling; trailing rows/columns that do not
/// fill a window are dropped.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_geom(x.shape(), k)?;
    let norm = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for i in 0..k {
                    let row = &plane[(oy * k + i) * w + ox * k..][..k];
                    acc += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                out.push(T::from_f64_lossy(acc * norm));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)?.ensure_finite("avg_pool")
}

fn pool_geom(shape: &[usize], k: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape("avg_pool", format!("{shape:?}: need NCHW")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k == 0 || h < k || w < k {
        return Err(Error::shape("avg_pool", format!("window {k} on {h}x{w}")));
    }
    Ok((n, c, h, w, h / k, w / k))
}

pub(crate) fn avg_pool_backward<T: Scalar>(x_shape: &[usize], k: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = pool_geom(x_shape, k)?;
    let norm = T::from_f64_lossy(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox] * norm;
                for i in 0..k {
                    plane[(oy * k + i) * w + ox * k..][..k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Collapses every axis after the first.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 1 {
        return Err(Error::shape("flatten", "scalar input"));
    }
    let n = x.batch();
    let rest: usize = x.shape()[1..].iter().product();
    x.clone().reshape(vec![n, rest])
}

/// `x W^T + b` for `x: N x F`, `W: O x F`, `b: O`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, o) = linear_geom(x.shape(), weight.shape(), bias.shape())?;
    let mut out = vec![T::zero(); n * o];
    T::gemm(n, f, o, T::one(), x.data(), (f as isize, 1), weight.data(), (1, f as isize), T::zero(), &mut out, (o as isize, 1));
    if o > 0 {
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bias.data()).for_each(|(v, &b)| *v += b);
        }
    }
    Tensor::new(vec![n, o], out)?.ensure_finite("linear")
}

fn linear_geom(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() != 2 || w.len() != 2 || b.len() != 1 || x[1] != w[1] || b[0] != w[0] {
        return Err(Error::shape("linear", format!("x {x:?}, W {w:?}, b {b:?}")));
    }
    Ok((x[0], x[1], w[0]))
}

#[allow(clippy::type_complexity)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = weight.shape()[0];
    let dx = need.0.then(|| {
        let mut d = vec![T::zero(); n * f];
        T::gemm(n, o, f, T::one(), dy.data(), (o as isize, 1), weight.data(), (f as isize, 1), T::zero(), &mut d, (f as isize, 1));
        Tensor::new(vec![n, f], d)
    });
    let dw = need.1.then(|| {
        let mut d = vec![T::zero(); o * f];
        T::gemm(o, n, f, T::one(), dy.data(), (1, o as isize), x.data(), (f as isize, 1), T::zero(), &mut d, (f as isize, 1));
        Tensor::new(vec![o, f], d)
    });
    let db = need.2.then(|| {
        let mut acc = vec![0.0f64; o];
        if o > 0 {
            for row in dy.data().chunks(o) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
            }
        }
        Tensor::new(vec![o], acc.into_iter().map(T::from_f64_lossy).collect())
    });
    Ok((dx.transpose()?, dw.transpose()?, db.transpose()?))
}

// ---------------------------------------------------------------------------
// Probabilities and losses
// ---------------------------------------------------------------------------

fn logits_geom<T: Scalar>(logits: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::shape(op, format!("{:?}: need N x C", logits.shape())));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if c < 2 {
        return Err(Error::shape(op, format!("{c} classes; need at least 2")));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok((n, c))
}

/// Row-wise softmax with max-shift.
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits_geom(logits, "softmax")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64_lossy(e / z)));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Shannon entropy (nats) of each row of a probability matrix.
pub fn row_entropies<T: Scalar>(probs: &Tensor<T>) -> Vec<f64> {
    let c = probs.shape().get(1).copied().unwrap_or(1).max(1);
    probs
        .data()
        .chunks(c)
        .map(|row| {
            -row.iter()
                .map(|p| {
                    let p = p.as_f64();
                    if p > 0.0 {
                        p * p.max(PROB_FLOOR).ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

/// Mean prediction entropy over the batch, plus the softmax it was computed from.
pub fn entropy_loss_with_probs<T: Scalar>(logits: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (n, _) = logits_geom(logits, "entropy_loss")?;
    if n == 0 {
        return Err(Error::EmptyBatch { op: "entropy_loss" });
    }
    let probs = softmax_probs(logits)?;
    let loss = row_entropies(&probs).iter().sum::<f64>() / n as f64;
    Ok((loss, probs))
}

pub fn entropy_loss<T: Scalar>(logits: &Tensor<T>) -> Result<f64> {
    entropy_loss_with_probs(logits).map(|r| r.0)
}

/// d(mean entropy)/d(logits) = -p_j (ln p_j + H) / N per row.
pub(crate) fn entropy_backward<T: Scalar>(probs: &Tensor<T>, upstream: f64) -> Tensor<T> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let ents = row_entropies(probs);
    let scale = upstream / n as f64;
    let mut out = Vec::with_capacity(probs.len());
    for (row, h) in probs.data().chunks(c).zip(ents) {
        out.extend(row.iter().map(|p| {
            let p = p.as_f64();
            T::from_f64_lossy(-scale * p * (p.max(PROB_FLOOR).ln() + h))
        }));
    }
    Tensor::new(probs.shape().to_vec(), out).expect("same shape")
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` over the rows selected by `mask`
/// (all rows when `None`). Returns the loss, the softmax, and the number of
/// selected rows.
pub fn cross_entropy_masked<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<(f64, Tensor<T>, usize)> {
    let (n, c) = logits_geom(logits, "cross_entropy")?;
    check_labels(labels, n, c)?;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape("cross_entropy", format!("mask of {} for {n} rows", m.len())));
        }
    }
    let probs = softmax_probs(logits)?;
    let mut total = 0.0;
    let mut count = 0;
    for (i, row) in probs.data().chunks(c).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            total -= row[labels[i]].as_f64().max(PROB_FLOOR).ln();
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, probs, count))
}

pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (loss, _, count) = cross_entropy_masked(logits, labels, None)?;
    if count == 0 {
        return Err(Error::EmptyBatch { op: "cross_entropy" });
    }
    Ok(loss)
}

/// (p - onehot) / count on selected rows, zero elsewhere.
pub(crate) fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    mask: Option<&[bool]>,
    count: usize,
    upstream: f64,
) -> Tensor<T> {
    let c = probs.shape()[1];
    let scale = if count == 0 { 0.0 } else { upstream / count as f64 };
    let mut out = Vec::with_capacity(probs.len());
    for (i, row) in probs.data().chunks(c).enumerate() {
        let selected = mask.map_or(true, |m| m[i]);
        out.extend(row.iter().enumerate().map(|(j, p)| {
            if !selected {
                return T::zero();
            }
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            T::from_f64_lossy(scale * (p.as_f64() - target))
        }));
    }
    Tensor::new(probs.shape().to_vec(), out).expect("same shape")
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let c = m.shape().get(1).copied().unwrap_or(1).max(1);
    m.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = t(&[1, 1, 1, 1], &[1.]);
        let b = t(&[1], &[0.]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_constant_image_all_ones_kernel() {
        let c = 0.37f32;
        let x = Tensor::full(vec![1, 1, 5, 5], c);
        let w = Tensor::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // hand sum: nine taps of c
        let expected = c + c + c + c + c + c + c + c + c;
        for v in y.data() {
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        let w = t(&[1, 1, 2, 2], &[0.3, -1.0, 2.0, 0.5]);
        let b = t(&[1], &[0.25]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv_output_extent_and_stride() {
        let x = Tensor::<f32>::zeros(vec![2, 3, 9, 7]);
        let w = Tensor::<f32>::zeros(vec![4, 3, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(vec![1, 3, 1, 1]), None, 1, 0),
            Err(Error::Shape { .. })
        ));
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 5, 5]), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(vec![1, 2, 5, 5]), None, 1, 1).is_ok());
    }

    #[test]
    fn conv_non_finite_is_an_error() {
        let x = t(&[1, 1, 1, 1], &[f32::MAX]);
        let w = t(&[1, 1, 1, 1], &[f32::MAX]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn batch_norm_three_values() {
        let x = t(&[3, 1], &[1., 2., 3.]);
        let state = BatchNormState::new(NormStats::identity(1), vec![1.0], vec![0.0], 1e-12).unwrap();
        let y = batch_norm(&x, &state, NormMode::UseBatch).unwrap();
        // mean 2, population variance 2/3, so the outer values sit at -+sqrt(3/2)
        let e = (1.5f32).sqrt();
        assert_abs_diff_eq!(y.data()[0], -e, epsilon = 1e-4);
        assert_abs_diff_eq!(y.data()[1], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[2], e, epsilon = 1e-4);
        assert_abs_diff_eq!(e, 1.2247, epsilon = 1e-4);
    }

    #[test]
    fn batch_norm_stored_identity_stats() {
        let x = t(&[2, 2, 1, 2], &[0.5, -1.0, 3.0, 2.0, 0.0, 7.5, -2.0, 1.0]);
        let state = BatchNormState::new(NormStats::identity(2), vec![1.0; 2], vec![0.0; 2], 1e-10).unwrap();
        let y = batch_norm(&x, &state, NormMode::UseStored).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let x = Tensor::<f32>::full(vec![4, 1, 2, 2], 3.25);
        let y = batch_norm(&x, &BatchNormState::fresh(1), NormMode::UseBatch).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_errors() {
        let empty = Tensor::<f32>::zeros(vec![0, 2, 3, 3]);
        assert!(matches!(
            batch_norm(&empty, &BatchNormState::fresh(2), NormMode::UseBatch),
            Err(Error::EmptyBatch { .. })
        ));
        let x = Tensor::<f32>::zeros(vec![1, 3, 2, 2]);
        assert!(batch_norm(&x, &BatchNormState::fresh(2), NormMode::UseStored).is_err());
    }

    #[test]
    fn state_rejects_bad_variance_and_eps() {
        assert!(NormStats::<f32>::new(vec![0.0], vec![-0.1]).is_err());
        assert!(BatchNormState::<f32>::new(NormStats::identity(1), vec![1.0], vec![0.0], 0.0).is_err());
        let mut s = BatchNormState::<f32>::fresh(2);
        assert!(s.replace_stats(NormStats::identity(3)).is_err());
        let old = s.replace_stats(NormStats::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(old, NormStats::identity(2));
        assert_eq!(s.stats().var, vec![3.0, 4.0]);
    }

    #[test]
    fn affine_cases() {
        let x = t(&[1, 1], &[0.5]);
        let y = affine_modulate(&x, &t(&[1], &[2.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[2.0]);
        let x = t(&[2, 1, 2], &[0.1, -4.0, 9.0, 0.0]);
        let y = affine_modulate(&x, &t(&[1], &[0.0]), &t(&[1], &[1.5])).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        assert!(affine_modulate(&x, &t(&[2], &[1.0, 1.0]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn affine_identity_preserves_negative_zero() {
        let x = t(&[1, 2, 2], &[-0.0, 1.0, -3.5, 0.0]);
        let y = affine_modulate(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2])).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn pointwise_pool_dense() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).unwrap().data(), &[0., 0., 2.]);
        let pooled = avg_pool(&Tensor::<f32>::full(vec![1, 2, 4, 6], 0.75), 2).unwrap();
        assert_eq!(pooled.shape(), &[1, 2, 2, 3]);
        assert!(pooled.data().iter().all(|&v| v == 0.75));
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(vec![3])).unwrap(), x);
        assert!(linear(&x, &Tensor::zeros(vec![2, 2]), &Tensor::zeros(vec![2])).is_err());
        assert_eq!(flatten(&Tensor::<f32>::zeros(vec![2, 3, 4, 5])).unwrap().shape(), &[2, 60]);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_probs(&Tensor::<f32>::full(vec![1, 10], 3.0)).unwrap();
        p.data().iter().for_each(|&v| assert_abs_diff_eq!(v, 0.1, epsilon = 1e-7));
        let p = softmax_probs(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        assert_abs_diff_eq!(p.data()[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(p.data()[1], 0.0, epsilon = 1e-7);
        // exp(ln 3) / (exp(ln 3) + 1) = 3/4
        let p = softmax_probs(&t(&[1, 2], &[3f32.ln(), 0.0])).unwrap();
        assert_abs_diff_eq!(p.data()[0], 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(p.data()[1], 0.25, epsilon = 1e-6);
        assert!(softmax_probs(&t(&[1, 2], &[f32::NAN, 0.0])).is_err());
        assert!(softmax_probs(&t(&[1, 1], &[0.0])).is_err());
    }

    #[test]
    fn entropy_cases() {
        let h = entropy_loss(&Tensor::<f32>::zeros(vec![4, 10])).unwrap();
        assert_abs_diff_eq!(h, 10f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(h, 2.302585, epsilon = 1e-6);
        let h = entropy_loss(&t(&[1, 3], &[200.0, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-9);
        let h = entropy_loss(&t(&[1, 2], &[0.3, 0.3])).unwrap();
        assert_abs_diff_eq!(h, 0.693147, epsilon = 1e-6);
        assert!(entropy_loss(&t(&[1, 2], &[f32::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy_loss(&t(&[1, 3], &[0.0, 300.0, 0.0]), &[1]).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-9);
        let l = cross_entropy_loss(&Tensor::<f32>::zeros(vec![5, 10]), &[0, 1, 2, 3, 9]).unwrap();
        assert_abs_diff_eq!(l, 10f64.ln(), epsilon = 1e-6);
        // four equal logits: p(true) = 1/4, loss = ln 4
        let l = cross_entropy_loss(&Tensor::<f32>::zeros(vec![1, 4]), &[2]).unwrap();
        assert_abs_diff_eq!(l, 1.386294, epsilon = 1e-6);
        assert!(matches!(
            cross_entropy_loss(&Tensor::<f32>::zeros(vec![1, 4]), &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let m = t(&[2, 3], &[1.0, 5.0, 5.0, 2.0, 2.0, 2.0]);
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }
}
