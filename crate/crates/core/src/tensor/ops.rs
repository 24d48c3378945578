//! Forward and backward kernels for the fixed layer set: 2D convolution,
//! depthwise convolution, batch normalization, ReLU, global average pooling,
//! an affine classifier and softmax cross-entropy.
//!
//! All kernels are pure functions: forward passes return fresh tensors,
//! backward passes return gradient tensors for every differentiable operand.
//! Reductions always run in a fixed order so results are bit-identical
//! regardless of the rayon thread count.

use rayon::prelude::*;

use super::{nhwc, Scalar, Tensor};
use crate::error::{KwsError, Result};

/// Stride and symmetric zero-padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvSpec { stride, padding }
    }

    pub fn unit() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> KwsError {
    KwsError::Shape { op, detail }
}

fn dims4<E: Scalar>(t: &Tensor<E>, op: &'static str, role: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(shape_err(
            op,
            format!("{role} must have 4 dimensions, got {other:?}"),
        )),
    }
}

fn dims2<E: Scalar>(t: &Tensor<E>, op: &'static str, role: &str) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        other => Err(shape_err(
            op,
            format!("{role} must have 2 dimensions, got {other:?}"),
        )),
    }
}

/// `floor((extent + 2*pad - kernel) / stride) + 1`, rejecting empty outputs.
pub fn conv_out_extent(
    op: &'static str,
    axis: &str,
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err(op, format!("stride along {axis} must be >= 1")));
    }
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(shape_err(
            op,
            format!("kernel extent {kernel} exceeds padded input extent {padded} along {axis}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2D convolution. `input` is NHWC, `kernel` is [kh, kw, c_in, c_out],
/// `bias` is [c_out].
pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let [n, h, w, ci] = dims4(input, "conv2d", "input")?;
    let [kh, kw, kci, co] = dims4(kernel, "conv2d", "kernel")?;
    if kci != ci {
        return Err(shape_err(
            "conv2d",
            format!("kernel input-channel extent {kci} does not match input channel extent {ci}"),
        ));
    }
    if bias.numel() != co {
        return Err(shape_err(
            "conv2d",
            format!(
                "bias extent {} does not match kernel output-channel extent {co}",
                bias.numel()
            ),
        ));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oh = conv_out_extent("conv2d", "height", h, kh, sh, ph)?;
    let ow = conv_out_extent("conv2d", "width", w, kw, sw, pw)?;

    let mut out = Tensor::zeros(&[n, oh, ow, co]);
    let in_shape = [n, h, w, ci];
    let xs = input.data();
    let ks = kernel.data();
    let bs = bias.data();
    let sample_len = oh * ow * co;

    out.data_mut()
        .par_chunks_mut(sample_len)
        .enumerate()
        .for_each(|(ni, out_n)| {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = &mut out_n[(ohi * ow + owi) * co..(ohi * ow + owi + 1) * co];
                    row.copy_from_slice(bs);
                    for khi in 0..kh {
                        let ih = (ohi * sh + khi) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * sw + kwi) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let in_base = nhwc(&in_shape, ni, ih as usize, iw as usize, 0);
                            for cii in 0..ci {
                                let x = xs[in_base + cii];
                                let krow = &ks[((khi * kw + kwi) * ci + cii) * co..][..co];
                                for (o, k) in row.iter_mut().zip(krow) {
                                    *o = *o + x * *k;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    spec: &ConvSpec,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [n, h, w, ci] = dims4(input, "conv2d_backward", "input")?;
    let [kh, kw, _, co] = dims4(kernel, "conv2d_backward", "kernel")?;
    let [gn, oh, ow, gco] = dims4(grad_out, "conv2d_backward", "grad_out")?;
    if gn != n || gco != co {
        return Err(shape_err(
            "conv2d_backward",
            format!("grad_out shape {:?} inconsistent with operands", grad_out.shape()),
        ));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;

    let xs = input.data();
    let ks = kernel.data();
    let gs = grad_out.data();
    let in_shape = [n, h, w, ci];
    let out_shape = [n, oh, ow, co];

    // grad wrt input: gather over kernel positions, parallel across samples.
    let mut grad_in = Tensor::zeros(&[n, h, w, ci]);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w * ci)
        .enumerate()
        .for_each(|(ni, gx_n)| {
            for ihi in 0..h {
                for iwi in 0..w {
                    let row = &mut gx_n[(ihi * w + iwi) * ci..(ihi * w + iwi + 1) * ci];
                    for khi in 0..kh {
                        let num_h = ihi + ph;
                        if num_h < khi || (num_h - khi) % sh != 0 {
                            continue;
                        }
                        let ohi = (num_h - khi) / sh;
                        if ohi >= oh {
                            continue;
                        }
                        for kwi in 0..kw {
                            let num_w = iwi + pw;
                            if num_w < kwi || (num_w - kwi) % sw != 0 {
                                continue;
                            }
                            let owi = (num_w - kwi) / sw;
                            if owi >= ow {
                                continue;
                            }
                            let g_base = nhwc(&out_shape, ni, ohi, owi, 0);
                            let grow = &gs[g_base..g_base + co];
                            for (cii, r) in row.iter_mut().enumerate() {
                                let krow = &ks[((khi * kw + kwi) * ci + cii) * co..][..co];
                                let mut acc = E::zero();
                                for (g, k) in grow.iter().zip(krow) {
                                    acc = acc + *g * *k;
                                }
                                *r = *r + acc;
                            }
                        }
                    }
                }
            }
        });

    // grad wrt kernel and bias: per-sample partials, reduced in sample order.
    let partials: Vec<(Vec<E>, Vec<E>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dk = vec![E::zero(); kh * kw * ci * co];
            let mut db = vec![E::zero(); co];
            for ohi in 0..oh {
                for owi in 0..ow {
                    let g_base = nhwc(&out_shape, ni, ohi, owi, 0);
                    let grow = &gs[g_base..g_base + co];
                    for (b, g) in db.iter_mut().zip(grow) {
                        *b = *b + *g;
                    }
                    for khi in 0..kh {
                        let ih = (ohi * sh + khi) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * sw + kwi) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let in_base = nhwc(&in_shape, ni, ih as usize, iw as usize, 0);
                            for cii in 0..ci {
                                let x = xs[in_base + cii];
                                let dkrow =
                                    &mut dk[((khi * kw + kwi) * ci + cii) * co..][..co];
                                for (d, g) in dkrow.iter_mut().zip(grow) {
                                    *d = *d + x * *g;
                                }
                            }
                        }
                    }
                }
            }
            (dk, db)
        })
        .collect();

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = Tensor::zeros(&[co]);
    for (dk, db) in partials {
        for (a, b) in grad_kernel.data_mut().iter_mut().zip(&dk) {
            *a = *a + *b;
        }
        for (a, b) in grad_bias.data_mut().iter_mut().zip(&db) {
            *a = *a + *b;
        }
    }
    Ok((grad_in, grad_kernel, grad_bias))
}

// ---------------------------------------------------------------------------
// depthwise conv2d
// ---------------------------------------------------------------------------

/// Depthwise 2D convolution; channel `c` of the output depends only on
/// channel `c` of the input. `kernel` is [kh, kw, c], `bias` is [c].
pub fn depthwise_conv2d<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let [n, h, w, c] = dims4(input, "depthwise_conv2d", "input")?;
    let kshape = kernel.shape();
    let (kh, kw, kc) = match kshape {
        [a, b, cc] => (*a, *b, *cc),
        other => {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("kernel must have 3 dimensions, got {other:?}"),
            ))
        }
    };
    if kc != c {
        return Err(shape_err(
            "depthwise_conv2d",
            format!("kernel channel extent {kc} does not match input channel extent {c}"),
        ));
    }
    if bias.numel() != c {
        return Err(shape_err(
            "depthwise_conv2d",
            format!("bias extent {} does not match channel extent {c}", bias.numel()),
        ));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oh = conv_out_extent("depthwise_conv2d", "height", h, kh, sh, ph)?;
    let ow = conv_out_extent("depthwise_conv2d", "width", w, kw, sw, pw)?;

    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let xs = input.data();
    let ks = kernel.data();
    let bs = bias.data();
    let in_shape = [n, h, w, c];

    out.data_mut()
        .par_chunks_mut(oh * ow * c)
        .enumerate()
        .for_each(|(ni, out_n)| {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = &mut out_n[(ohi * ow + owi) * c..(ohi * ow + owi + 1) * c];
                    row.copy_from_slice(bs);
                    for khi in 0..kh {
                        let ih = (ohi * sh + khi) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * sw + kwi) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let in_base = nhwc(&in_shape, ni, ih as usize, iw as usize, 0);
                            let xrow = &xs[in_base..in_base + c];
                            let krow = &ks[(khi * kw + kwi) * c..][..c];
                            for ((o, x), k) in row.iter_mut().zip(xrow).zip(krow) {
                                *o = *o + *x * *k;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`] with respect to input, kernel and bias.
pub fn depthwise_conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    spec: &ConvSpec,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [n, h, w, c] = dims4(input, "depthwise_conv2d_backward", "input")?;
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let [gn, oh, ow, gc] = dims4(grad_out, "depthwise_conv2d_backward", "grad_out")?;
    if gn != n || gc != c {
        return Err(shape_err(
            "depthwise_conv2d_backward",
            format!("grad_out shape {:?} inconsistent with operands", grad_out.shape()),
        ));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let xs = input.data();
    let ks = kernel.data();
    let gs = grad_out.data();
    let in_shape = [n, h, w, c];
    let out_shape = [n, oh, ow, c];

    let mut grad_in = Tensor::zeros(&[n, h, w, c]);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w * c)
        .enumerate()
        .for_each(|(ni, gx_n)| {
            for ihi in 0..h {
                for iwi in 0..w {
                    let row = &mut gx_n[(ihi * w + iwi) * c..(ihi * w + iwi + 1) * c];
                    for khi in 0..kh {
                        let num_h = ihi + ph;
                        if num_h < khi || (num_h - khi) % sh != 0 {
                            continue;
                        }
                        let ohi = (num_h - khi) / sh;
                        if ohi >= oh {
                            continue;
                        }
                        for kwi in 0..kw {
                            let num_w = iwi + pw;
                            if num_w < kwi || (num_w - kwi) % sw != 0 {
                                continue;
                            }
                            let owi = (num_w - kwi) / sw;
                            if owi >= ow {
                                continue;
                            }
                            let g_base = nhwc(&out_shape, ni, ohi, owi, 0);
                            let grow = &gs[g_base..g_base + c];
                            let krow = &ks[(khi * kw + kwi) * c..][..c];
                            for ((r, g), k) in row.iter_mut().zip(grow).zip(krow) {
                                *r = *r + *g * *k;
                            }
                        }
                    }
                }
            }
        });

    let partials: Vec<(Vec<E>, Vec<E>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dk = vec![E::zero(); kh * kw * c];
            let mut db = vec![E::zero(); c];
            for ohi in 0..oh {
                for owi in 0..ow {
                    let g_base = nhwc(&out_shape, ni, ohi, owi, 0);
                    let grow = &gs[g_base..g_base + c];
                    for (b, g) in db.iter_mut().zip(grow) {
                        *b = *b + *g;
                    }
                    for khi in 0..kh {
                        let ih = (ohi * sh + khi) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * sw + kwi) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let in_base = nhwc(&in_shape, ni, ih as usize, iw as usize, 0);
                            let xrow = &xs[in_base..in_base + c];
                            let dkrow = &mut dk[(khi * kw + kwi) * c..][..c];
                            for ((d, x), g) in dkrow.iter_mut().zip(xrow).zip(grow) {
                                *d = *d + *x * *g;
                            }
                        }
                    }
                }
            }
            (dk, db)
        })
        .collect();

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = Tensor::zeros(&[c]);
    for (dk, db) in partials {
        for (a, b) in grad_kernel.data_mut().iter_mut().zip(&dk) {
            *a = *a + *b;
        }
        for (a, b) in grad_bias.data_mut().iter_mut().zip(&db) {
            *a = *a + *b;
        }
    }
    Ok((grad_in, grad_kernel, grad_bias))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Exponential-moving-average statistics used by inference-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<E = f32> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

impl<E: Scalar> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], E::one()),
        }
    }

    /// `stat <- (1 - momentum) * stat + momentum * batch_stat`
    pub fn update(&mut self, batch_mean: &Tensor<E>, batch_var: &Tensor<E>, momentum: E) {
        let keep = E::one() - momentum;
        for (r, b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = keep * *r + momentum * *b;
        }
    }
}

/// Values saved by the training-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<E = f32> {
    pub normalized: Tensor<E>,
    pub inv_std: Tensor<E>,
    pub batch_mean: Tensor<E>,
    pub batch_var: Tensor<E>,
    count: usize,
}

/// Training-mode batchnorm: normalizes over N, H, W per channel with the
/// biased variance estimator. Running statistics are updated separately via
/// [`RunningStats::update`] so gradient checks can evaluate without side
/// effects.
pub fn batchnorm_train<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    epsilon: E,
) -> Result<(Tensor<E>, BatchNormCache<E>)> {
    let [n, h, w, c] = dims4(input, "batchnorm", "input")?;
    check_bn_affine(gamma, beta, c)?;
    let count = n * h * w;
    if count < 2 {
        return Err(shape_err(
            "batchnorm",
            format!("training mode requires batch*spatial count >= 2, got {count}"),
        ));
    }

    let xs = input.data();
    let inv_count = E::one() / E::from_f64_lossy(count as f64);
    let mut mean = vec![E::zero(); c];
    for row in xs.chunks_exact(c) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m = *m + *x;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_count);

    let mut var = vec![E::zero(); c];
    for row in xs.chunks_exact(c) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = *x - *m;
            *v = *v + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v * inv_count);

    let inv_std: Vec<E> = var.iter().map(|v| E::one() / (*v + epsilon).sqrt()).collect();

    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let gs = gamma.data();
    let bs = beta.data();
    for ((xrow, nrow), orow) in xs
        .chunks_exact(c)
        .zip(normalized.data_mut().chunks_exact_mut(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for i in 0..c {
            let xhat = (xrow[i] - mean[i]) * inv_std[i];
            nrow[i] = xhat;
            orow[i] = gs[i] * xhat + bs[i];
        }
    }

    let cache = BatchNormCache {
        normalized,
        inv_std: Tensor::from_vec(&[c], inv_std)?,
        batch_mean: Tensor::from_vec(&[c], mean)?,
        batch_var: Tensor::from_vec(&[c], var)?,
        count,
    };
    Ok((out, cache))
}

/// Inference-mode batchnorm using running statistics only.
pub fn batchnorm_infer<E: Scalar>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running: &RunningStats<E>,
    epsilon: E,
) -> Result<Tensor<E>> {
    let [_, h, w, c] = dims4(input, "batchnorm", "input")?;
    check_bn_affine(gamma, beta, c)?;
    if h * w == 0 {
        return Err(shape_err("batchnorm", "zero spatial extent".into()));
    }
    let scale: Vec<E> = gamma
        .data()
        .iter()
        .zip(running.var.data())
        .map(|(g, v)| *g / (*v + epsilon).sqrt())
        .collect();
    let shift: Vec<E> = beta
        .data()
        .iter()
        .zip(running.mean.data())
        .zip(&scale)
        .map(|((b, m), s)| *b - *m * *s)
        .collect();

    let mut out = Tensor::zeros(input.shape());
    for (xrow, orow) in input
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for i in 0..c {
            orow[i] = xrow[i] * scale[i] + shift[i];
        }
    }
    Ok(out)
}

fn check_bn_affine<E: Scalar>(gamma: &Tensor<E>, beta: &Tensor<E>, c: usize) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err(
            "batchnorm",
            format!(
                "gamma/beta extents {}/{} do not match channel extent {c}",
                gamma.numel(),
                beta.numel()
            ),
        ));
    }
    Ok(())
}

/// Training-mode backward pass; returns gradients for input, gamma and beta.
pub fn batchnorm_backward<E: Scalar>(
    cache: &BatchNormCache<E>,
    gamma: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let c = gamma.numel();
    let count = E::from_f64_lossy(cache.count as f64);
    let gs = grad_out.data();
    let xhat = cache.normalized.data();

    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for (grow, xrow) in gs.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for i in 0..c {
            dgamma[i] = dgamma[i] + grow[i] * xrow[i];
            dbeta[i] = dbeta[i] + grow[i];
        }
    }

    // dx = gamma * inv_std / count * (count * dout - dbeta - xhat * dgamma)
    let coeff: Vec<E> = gamma
        .data()
        .iter()
        .zip(cache.inv_std.data())
        .map(|(g, s)| *g * *s / count)
        .collect();
    let mut grad_in = Tensor::zeros(grad_out.shape());
    for ((grow, xrow), drow) in gs
        .chunks_exact(c)
        .zip(xhat.chunks_exact(c))
        .zip(grad_in.data_mut().chunks_exact_mut(c))
    {
        for i in 0..c {
            drow[i] = coeff[i] * (count * grow[i] - dbeta[i] - xrow[i] * dgamma[i]);
        }
    }
    (
        grad_in,
        Tensor::from_vec(&[c], dgamma).expect("shape"),
        Tensor::from_vec(&[c], dbeta).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// relu / global average pool / linear
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`.
pub fn relu<E: Scalar>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < E::zero() {
            *v = E::zero();
        }
    });
    out
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<E: Scalar>(input: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut grad_in = grad_out.clone();
    for (g, x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if *x <= E::zero() {
            *g = E::zero();
        }
    }
    grad_in
}

/// Per-channel spatial mean: NHWC -> N x C.
pub fn avgpool_global<E: Scalar>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, h, w, c] = dims4(input, "avgpool_global", "input")?;
    if h * w == 0 {
        return Err(shape_err("avgpool_global", "zero spatial extent".into()));
    }
    let inv = E::one() / E::from_f64_lossy((h * w) as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        let acc = &mut out.data_mut()[ni * c..(ni + 1) * c];
        let base = ni * h * w * c;
        for row in input.data()[base..base + h * w * c].chunks_exact(c) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a = *a + *x;
            }
        }
        acc.iter_mut().for_each(|a| *a = *a * inv);
    }
    Ok(out)
}

pub fn avgpool_global_backward<E: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<E>,
) -> Tensor<E> {
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let inv = E::one() / E::from_f64_lossy((h * w) as f64);
    let mut grad_in = Tensor::zeros(input_shape);
    for (ni, grow) in grad_out.data().chunks_exact(c).enumerate() {
        let base = ni * h * w * c;
        for row in grad_in.data_mut()[base..base + h * w * c].chunks_exact_mut(c) {
            for (d, g) in row.iter_mut().zip(grow) {
                *d = *g * inv;
            }
        }
    }
    grad_in
}

/// Affine map: input [n, f] x weight [f, k] + bias [k] -> [n, k].
pub fn linear<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let [n, f] = dims2(input, "linear", "input")?;
    let [wf, k] = dims2(weight, "linear", "weight")?;
    if wf != f {
        return Err(shape_err(
            "linear",
            format!("weight input extent {wf} does not match input feature extent {f}"),
        ));
    }
    if bias.numel() != k {
        return Err(shape_err(
            "linear",
            format!("bias extent {} does not match output extent {k}", bias.numel()),
        ));
    }
    let mut out = Tensor::zeros(&[n, k]);
    let ws = weight.data();
    for (xrow, orow) in input
        .data()
        .chunks_exact(f)
        .zip(out.data_mut().chunks_exact_mut(k))
    {
        orow.copy_from_slice(bias.data());
        for (fi, x) in xrow.iter().enumerate() {
            let wrow = &ws[fi * k..(fi + 1) * k];
            for (o, w) in orow.iter_mut().zip(wrow) {
                *o = *o + *x * *w;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`linear`] with respect to input, weight and bias.
pub fn linear_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[1];
    let ws = weight.data();
    let mut grad_in = Tensor::zeros(&[n, f]);
    let mut grad_w = Tensor::zeros(&[f, k]);
    let mut grad_b = Tensor::zeros(&[k]);
    for ni in 0..n {
        let grow = &grad_out.data()[ni * k..(ni + 1) * k];
        let xrow = &input.data()[ni * f..(ni + 1) * f];
        for (gb, g) in grad_b.data_mut().iter_mut().zip(grow) {
            *gb = *gb + *g;
        }
        let gxrow = &mut grad_in.data_mut()[ni * f..(ni + 1) * f];
        for fi in 0..f {
            let wrow = &ws[fi * k..(fi + 1) * k];
            let mut acc = E::zero();
            for (g, w) in grow.iter().zip(wrow) {
                acc = acc + *g * *w;
            }
            gxrow[fi] = gxrow[fi] + acc;
            let dwrow = &mut grad_w.data_mut()[fi * k..(fi + 1) * k];
            let x = xrow[fi];
            for (dw, g) in dwrow.iter_mut().zip(grow) {
                *dw = *dw + x * *g;
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

/// Softmax probabilities saved for the backward pass.
#[derive(Debug, Clone)]
pub struct CrossEntropyCache<E = f32> {
    pub probs: Tensor<E>,
    labels: Vec<usize>,
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// max-subtraction.
pub fn softmax_cross_entropy<E: Scalar>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(E, CrossEntropyCache<E>)> {
    let [n, k] = dims2(logits, "softmax_cross_entropy", "logits")?;
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} labels for batch extent {n}", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(KwsError::Train(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut total = E::zero();
    for (ni, (row, prow)) in logits
        .data()
        .chunks_exact(k)
        .zip(probs.data_mut().chunks_exact_mut(k))
        .enumerate()
    {
        let max = row.iter().fold(E::neg_infinity(), |a, b| a.max(*b));
        let mut sum = E::zero();
        for (p, x) in prow.iter_mut().zip(row) {
            let e = (*x - max).exp();
            *p = e;
            sum = sum + e;
        }
        let inv = E::one() / sum;
        prow.iter_mut().for_each(|p| *p = *p * inv);
        // loss_i = log(sum) + max - logit[label]
        total = total + sum.ln() + max - row[labels[ni]];
    }
    let loss = total / E::from_f64_lossy(n as f64);
    if !loss.is_finite() {
        return Err(KwsError::NonFinite("softmax_cross_entropy loss".into()));
    }
    Ok((
        loss,
        CrossEntropyCache {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

/// `(softmax - onehot) / n`
pub fn softmax_cross_entropy_backward<E: Scalar>(cache: &CrossEntropyCache<E>) -> Tensor<E> {
    let (n, k) = (cache.probs.shape()[0], cache.probs.shape()[1]);
    let inv = E::one() / E::from_f64_lossy(n as f64);
    let mut grad = cache.probs.clone();
    for (ni, row) in grad.data_mut().chunks_exact_mut(k).enumerate() {
        row[cache.labels[ni]] = row[cache.labels[ni]] - E::one();
        row.iter_mut().for_each(|g| *g = *g * inv);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    /// Quadruple-loop direct convolution in f64, independent of the kernel
    /// implementation above.
    fn conv2d_oracle(
        input: &Tensor<f32>,
        kernel: &Tensor<f32>,
        bias: &Tensor<f32>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor<f64> {
        let (n, h, w, ci) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (kh, kw, co) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
        let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
        let mut out = Tensor::<f64>::zeros(&[n, oh, ow, co]);
        for ni in 0..n {
            for ohi in 0..oh {
                for owi in 0..ow {
                    for coi in 0..co {
                        let mut acc = bias.data()[coi] as f64;
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                for cii in 0..ci {
                                    let ih = (ohi * stride.0 + khi) as isize - padding.0 as isize;
                                    let iw = (owi * stride.1 + kwi) as isize - padding.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let x = input.data()
                                        [nhwc(input.shape(), ni, ih as usize, iw as usize, cii)]
                                        as f64;
                                    let k = kernel.data()
                                        [((khi * kw + kwi) * ci + cii) * co + coi]
                                        as f64;
                                    acc += x * k;
                                }
                            }
                        }
                        out.data_mut()[nhwc(&[n, oh, ow, co], ni, ohi, owi, coi)] = acc;
                    }
                }
            }
        }
        out
    }

    fn assert_close(got: &[f32], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!(
                (*g as f64 - *w).abs() <= tol,
                "element {i}: got {g}, want {w}"
            );
        }
    }

    #[test]
    fn conv2d_scalar_product() {
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &kernel, &bias, &ConvSpec::unit()).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let input = randn(&[1, 6, 7, 3], 1);
        // 3x3 kernel, center one per matching channel pair, zero elsewhere.
        let mut kernel = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            kernel.data_mut()[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0;
        }
        let bias = Tensor::zeros(&[3]);
        let out = conv2d(
            &input,
            &kernel,
            &bias,
            &ConvSpec::new((1, 1), (1, 1)),
        )
        .unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let input = randn(&[1, 5, 5, 2], 7);
        let kernel = randn(&[3, 3, 2, 4], 8);
        let bias = randn(&[4], 9);
        let spec = ConvSpec::new((1, 1), (0, 0));
        let out = conv2d(&input, &kernel, &bias, &spec).unwrap();
        let want = conv2d_oracle(&input, &kernel, &bias, spec.stride, spec.padding);
        assert_eq!(out.shape(), want.shape());
        assert_close(out.data(), want.data(), 1e-5);
    }

    #[test]
    fn conv2d_exhaustive_small_shapes_match_oracle() {
        let mut case = 0u64;
        for &(h, w) in &[(1usize, 1usize), (2, 3), (4, 2), (5, 5), (8, 8)] {
            for &(kh, kw) in &[(1usize, 1usize), (2, 2), (3, 3), (3, 1)] {
                for &ci in &[1usize, 2, 4] {
                    for &co in &[1usize, 3, 4] {
                        for &stride in &[(1usize, 1usize), (2, 2)] {
                            for &pad in &[(0usize, 0usize), (1, 1)] {
                                if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
                                    continue;
                                }
                                case += 1;
                                let input = randn(&[2, h, w, ci], case);
                                let kernel = randn(&[kh, kw, ci, co], case + 1000);
                                let bias = randn(&[co], case + 2000);
                                let spec = ConvSpec::new(stride, pad);
                                let out = conv2d(&input, &kernel, &bias, &spec).unwrap();
                                let want =
                                    conv2d_oracle(&input, &kernel, &bias, stride, pad);
                                assert_eq!(out.shape(), want.shape(), "case {case}");
                                assert_close(out.data(), want.data(), 1e-4);
                            }
                        }
                    }
                }
            }
        }
        assert!(case > 500);
    }

    #[test]
    fn conv2d_shape_errors_name_dimension() {
        let input = Tensor::<f32>::zeros(&[1, 4, 4, 3]);
        let kernel = Tensor::<f32>::zeros(&[3, 3, 2, 4]);
        let bias = Tensor::<f32>::zeros(&[4]);
        let err = conv2d(&input, &kernel, &bias, &ConvSpec::unit()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "got: {msg}");
    }

    #[test]
    fn depthwise_single_channel_equals_conv2d() {
        let input = randn(&[2, 5, 4, 1], 3);
        let dw_kernel = randn(&[3, 3, 1], 4);
        let bias = randn(&[1], 5);
        let full_kernel = Tensor::from_vec(&[3, 3, 1, 1], dw_kernel.data().to_vec()).unwrap();
        let spec = ConvSpec::new((1, 1), (1, 1));
        let a = depthwise_conv2d(&input, &dw_kernel, &bias, &spec).unwrap();
        let b = conv2d(&input, &full_kernel, &bias, &spec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn depthwise_constant_field_interior() {
        let c = 0.75f32;
        let input = Tensor::filled(&[1, 5, 5, 2], c);
        let kernel = Tensor::filled(&[3, 3, 2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let out = depthwise_conv2d(&input, &kernel, &bias, &ConvSpec::new((1, 1), (1, 1))).unwrap();
        // interior pixel (2,2): all nine taps in range.
        let v = out.data()[nhwc(out.shape(), 0, 2, 2, 0)];
        assert!((v - 9.0 * c).abs() < 1e-6);
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let input = randn(&[2, 6, 5, 3], 11);
        let kernel = randn(&[3, 3, 3], 12);
        let bias = randn(&[3], 13);
        let spec = ConvSpec::new((1, 1), (1, 1));
        let out = depthwise_conv2d(&input, &kernel, &bias, &spec).unwrap();
        // per-channel naive loop in f64
        let (h, w, c) = (6, 5, 3);
        for ni in 0..2 {
            for ohi in 0..h {
                for owi in 0..w {
                    for cc in 0..c {
                        let mut acc = bias.data()[cc] as f64;
                        for khi in 0..3usize {
                            for kwi in 0..3usize {
                                let ih = (ohi + khi) as isize - 1;
                                let iw = (owi + kwi) as isize - 1;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += input.data()
                                    [nhwc(input.shape(), ni, ih as usize, iw as usize, cc)]
                                    as f64
                                    * kernel.data()[(khi * 3 + kwi) * c + cc] as f64;
                            }
                        }
                        let got = out.data()[nhwc(out.shape(), ni, ohi, owi, cc)] as f64;
                        assert!((got - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_channel_mismatch_errors() {
        let input = Tensor::<f32>::zeros(&[1, 4, 4, 3]);
        let kernel = Tensor::<f32>::zeros(&[3, 3, 2]);
        let bias = Tensor::<f32>::zeros(&[2]);
        assert!(depthwise_conv2d(&input, &kernel, &bias, &ConvSpec::unit()).is_err());
    }

    #[test]
    fn batchnorm_zero_variance_returns_beta() {
        let input = Tensor::<f32>::filled(&[2, 3, 3, 2], 5.0);
        let gamma = Tensor::filled(&[2], 2.5);
        let beta = Tensor::from_vec(&[2], vec![-1.0, 4.0]).unwrap();
        let (out, _) = batchnorm_train(&input, &gamma, &beta, 1e-5).unwrap();
        for row in out.data().chunks_exact(2) {
            assert!((row[0] - -1.0).abs() < 1e-5);
            assert!((row[1] - 4.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_infer_identity_stats() {
        let input = randn(&[2, 2, 2, 3], 21);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let running = RunningStats::new(3);
        let eps = 1e-5f32;
        let out = batchnorm_infer(&input, &gamma, &beta, &running, eps).unwrap();
        let scale = 1.0 / (1.0f32 + eps).sqrt();
        for (o, x) in out.data().iter().zip(input.data()) {
            assert!((o - x * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_output_moments() {
        let input = randn(&[4, 5, 3, 6], 22);
        let gamma = Tensor::filled(&[6], 1.0);
        let beta = Tensor::zeros(&[6]);
        let (out, _) = batchnorm_train(&input, &gamma, &beta, 1e-8).unwrap();
        let c = 6;
        let count = (4 * 5 * 3) as f64;
        for cc in 0..c {
            let vals: Vec<f64> = out
                .data()
                .chunks_exact(c)
                .map(|row| row[cc] as f64)
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / count;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-5, "channel {cc} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {cc} var {var}");
        }
    }

    #[test]
    fn batchnorm_rejects_single_element_batch() {
        let input = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        assert!(batchnorm_train(&input, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn relu_values_and_subgradient() {
        let input = Tensor::from_vec(&[1, 4], vec![-1.0, 2.0, 0.0, -0.5]).unwrap();
        let out = relu(&input);
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 0.0]);
        let grad_out = Tensor::filled(&[1, 4], 1.0);
        let grad_in = relu_backward(&input, &grad_out);
        assert_eq!(grad_in.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_constant_map() {
        let input = Tensor::<f32>::filled(&[2, 4, 3, 5], 3.25);
        let out = avgpool_global(&input).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        for v in out.data() {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_identity_and_oracle() {
        // identity weight, zero bias
        let input = randn(&[3, 4], 31);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let bias = Tensor::zeros(&[4]);
        let out = linear(&input, &eye, &bias).unwrap();
        assert_eq!(out.data(), input.data());

        // random case vs direct dot-product oracle
        let weight = randn(&[4, 6], 32);
        let bias = randn(&[6], 33);
        let out = linear(&input, &weight, &bias).unwrap();
        for ni in 0..3 {
            for ki in 0..6 {
                let mut acc = bias.data()[ki] as f64;
                for fi in 0..4 {
                    acc += input.data()[ni * 4 + fi] as f64 * weight.data()[fi * 6 + ki] as f64;
                }
                assert!((out.data()[ni * 6 + ki] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f32>::zeros(&[4, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss - (10.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_saturated_margin() {
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[2] = 1e4;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let logits = randn(&[5, 7], 41);
        let labels = [0usize, 6, 3, 2, 5];
        let (loss, cache) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut want = 0.0f64;
        for (ni, row) in logits.data().chunks_exact(7).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
            let sum: f64 = row.iter().map(|x| ((*x as f64) - max).exp()).sum();
            want += max + sum.ln() - row[labels[ni]] as f64;
        }
        want /= 5.0;
        assert!((loss as f64 - want).abs() < 1e-6);

        // backward: (softmax - onehot)/n against the same reference
        let grad = softmax_cross_entropy_backward(&cache);
        for (ni, row) in logits.data().chunks_exact(7).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
            let exps: Vec<f64> = row.iter().map(|x| ((*x as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for ki in 0..7 {
                let mut p = exps[ki] / sum;
                if ki == labels[ni] {
                    p -= 1.0;
                }
                p /= 5.0;
                assert!((grad.data()[ni * 7 + ki] as f64 - p).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::<f32>::zeros(&[2, 4]);
        assert!(softmax_cross_entropy(&logits, &[1, 4]).is_err());
    }

    #[test]
    fn forward_is_deterministic_under_parallelism() {
        let input = randn(&[8, 12, 10, 4], 51);
        let kernel = randn(&[3, 3, 4, 8], 52);
        let bias = randn(&[8], 53);
        let spec = ConvSpec::new((1, 1), (1, 1));
        let a = conv2d(&input, &kernel, &bias, &spec).unwrap();
        let b = conv2d(&input, &kernel, &bias, &spec).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
