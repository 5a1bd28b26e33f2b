//! Neural-network operators: ordinary/partial/gated convolution, batch
//! normalization with a freezable mode, nearest-neighbor upsampling, pooling
//! and activations. Every operator has a registered backward rule.
//!
//! Convolution uses the cross-correlation convention (the kernel is not
//! flipped) and zero padding. For partial convolution, padded positions count
//! as holes in `sum(M)` while the window-size numerator `sum(S)` counts the
//! full window.

use alloc::boxed::Box;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};
use crate::{kernels, Error, Result};

/// Convolution filter bank: weight `(out_ch, in_ch, kh, kw)`, optional bias
/// `(out_ch)`, stride and zero padding.
#[derive(Clone)]
pub struct ConvParams<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (oc, _ic, kh, kw) = weight.dims4()?;
        if kh == 0 || kw == 0 {
            return Err(Error::InvalidConfig("kernel extent must be >= 1".into()));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [oc] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?}, expected [{oc}]",
                    b.shape()
                )));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "padded extent {padded} smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn resolve<S: Scalar>(input: &Tensor<S>, p: &ConvParams<S>) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (oc, ic, kh, kw) = p.weight.dims4()?;
        if ic != c {
            return Err(Error::ChannelMismatch(format!(
                "input has {c} channels, weight expects {ic}"
            )));
        }
        let oh = conv_output_extent(h, kh, p.stride, p.padding)?;
        let ow = conv_output_extent(w, kw, p.stride, p.padding)?;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            oh,
            ow,
            stride: p.stride,
            padding: p.padding,
        })
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Lower the input into a `(C·KH·KW) x (N·OH·OW)` patch matrix.
fn im2col<S: Scalar>(input: &[S], g: &ConvGeom) -> Vec<S> {
    let ncols = g.cols();
    let mut col = vec![S::zero(); g.rows() * ncols];
    let plane = g.h * g.w;
    for ck in 0..g.rows() {
        let c = ck / (g.kh * g.kw);
        let rest = ck % (g.kh * g.kw);
        let ki = rest / g.kw;
        let kj = rest % g.kw;
        let row = &mut col[ck * ncols..(ck + 1) * ncols];
        for n in 0..g.n {
            let src = &input[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                let dst = &mut row[(n * g.oh + oy) * g.ow..(n * g.oh + oy + 1) * g.ow];
                if g.stride == 1 {
                    // ix = ox + kj - padding stays in range for one contiguous span.
                    let lo = g.padding.saturating_sub(kj);
                    let hi = (g.w + g.padding - kj).min(g.ow);
                    if lo < hi {
                        let src_lo = lo + kj - g.padding;
                        dst[lo..hi].copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                    }
                } else {
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the patch-matrix gradient back onto the input layout.
fn col2im_acc<S: Scalar>(dcol: &[S], g: &ConvGeom, dinput: &mut [S]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    for ck in 0..g.rows() {
        let c = ck / (g.kh * g.kw);
        let rest = ck % (g.kh * g.kw);
        let ki = rest / g.kw;
        let kj = rest % g.kw;
        let row = &dcol[ck * ncols..(ck + 1) * ncols];
        for n in 0..g.n {
            let dst = &mut dinput[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                let src = &row[(n * g.oh + oy) * g.ow..(n * g.oh + oy + 1) * g.ow];
                for (ox, &v) in src.iter().enumerate() {
                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                    if ix >= 0 && ix < g.w as isize {
                        dst_row[ix as usize] += v;
                    }
                }
            }
        }
    }
}

/// `(OC x N·plane)` matrix view of a `(N,OC,plane)` activation buffer.
fn nchw_to_matrix<S: Scalar>(x: &[S], n: usize, oc: usize, plane: usize) -> Vec<S> {
    let cols = n * plane;
    let mut m = vec![S::zero(); oc * cols];
    for b in 0..n {
        for c in 0..oc {
            let src = &x[(b * oc + c) * plane..(b * oc + c + 1) * plane];
            m[c * cols + b * plane..c * cols + (b + 1) * plane].copy_from_slice(src);
        }
    }
    m
}

fn matrix_to_nchw<S: Scalar>(m: &[S], n: usize, oc: usize, plane: usize) -> Vec<S> {
    let cols = n * plane;
    let mut x = vec![S::zero(); n * oc * plane];
    for b in 0..n {
        for c in 0..oc {
            let src = &m[c * cols + b * plane..c * cols + (b + 1) * plane];
            x[(b * oc + c) * plane..(b * oc + c + 1) * plane].copy_from_slice(src);
        }
    }
    x
}

/// Ordinary 2-D convolution (cross-correlation), zero padded.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, p: &ConvParams<S>) -> Result<Tensor<S>> {
    let geom = ConvGeom::resolve(input, p)?;
    let col = im2col(input.data(), &geom);
    let mut out_mat = kernels::matmul_nn(p.weight.data(), &col, geom.oc, geom.rows(), geom.cols());
    if let Some(bias) = &p.bias {
        let cols = geom.cols();
        for (c, &b) in bias.data().iter().enumerate() {
            for v in &mut out_mat[c * cols..(c + 1) * cols] {
                *v += b;
            }
        }
    }
    let out = matrix_to_nchw(&out_mat, geom.n, geom.oc, geom.oh * geom.ow);

    let input_t = input.clone();
    let weight_t = p.weight.clone();
    let bias_t = p.bias.clone();
    let input_data = Arc::new(input.data().to_vec());
    let weight_data = Arc::new(p.weight.data().to_vec());
    let mut parents = vec![input.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let shape = vec![geom.n, geom.oc, geom.oh, geom.ow];
    Ok(Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |grad, sink| {
            let plane = geom.oh * geom.ow;
            let gmat = nchw_to_matrix(grad, geom.n, geom.oc, plane);
            if let Some(dw) = sink.entry(&weight_t) {
                let col = im2col(&input_data, &geom);
                kernels::matmul_nt_acc(&gmat, &col, dw, geom.oc, geom.cols(), geom.rows());
            }
            if let Some(db) = bias_t.as_ref().and_then(|b| sink.entry(b)) {
                let cols = geom.cols();
                for (c, d) in db.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for &v in &gmat[c * cols..(c + 1) * cols] {
                        acc += v;
                    }
                    *d += acc;
                }
            }
            if let Some(dx) = sink.entry(&input_t) {
                let mut dcol = vec![S::zero(); geom.rows() * geom.cols()];
                kernels::matmul_tn_acc(
                    &weight_data,
                    &gmat,
                    &mut dcol,
                    geom.rows(),
                    geom.oc,
                    geom.cols(),
                );
                col2im_acc(&dcol, &geom, dx);
            }
        }),
    ))
}

fn check_binary_mask<S: Scalar>(mask: &Tensor<S>) -> Result<()> {
    if mask
        .data()
        .iter()
        .all(|&v| v == S::zero() || v == S::one())
    {
        Ok(())
    } else {
        Err(Error::NonBinaryMask)
    }
}

/// Partial convolution: the kernel sees only valid pixels, the response is
/// renormalized by `sum(S)/sum(M)` over each window, and a position whose
/// window holds no valid pixel outputs exactly 0. Returns the output and the
/// updated mask (1 where the window held at least one valid pixel).
///
/// The mask is single-channel, shared across the input channels of one image,
/// and treated as a non-differentiable constant.
pub fn pconv2d<S: Scalar>(
    input: &Tensor<S>,
    mask: &Tensor<S>,
    p: &ConvParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let geom = ConvGeom::resolve(input, p)?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    if (mn, mc, mh, mw) != (geom.n, 1, geom.h, geom.w) {
        return Err(Error::ShapeMismatch(format!(
            "pconv mask shape {:?}, expected [{},1,{},{}]",
            mask.shape(),
            geom.n,
            geom.h,
            geom.w
        )));
    }
    check_binary_mask(mask)?;

    // Valid-pixel count per output window, from the mask alone.
    let out_plane = geom.oh * geom.ow;
    let mgeom = ConvGeom {
        c: 1,
        oc: 1,
        ..ConvGeom::resolve(input, p)?
    };
    let mcol = im2col(mask.data(), &mgeom);
    let cols = geom.cols();
    let mut valid_count = vec![S::zero(); cols];
    for r in 0..mgeom.rows() {
        let row = &mcol[r * cols..(r + 1) * cols];
        for (vc, &v) in valid_count.iter_mut().zip(row) {
            *vc += v;
        }
    }
    let window = S::from_usize(geom.kh * geom.kw);
    let ratio: Vec<S> = valid_count
        .iter()
        .map(|&vc| if vc > S::zero() { window / vc } else { S::zero() })
        .collect();
    let updated: Vec<S> = valid_count
        .iter()
        .map(|&vc| if vc > S::zero() { S::one() } else { S::zero() })
        .collect();

    // Masked input, then a plain convolution core.
    let plane = geom.h * geom.w;
    let mut masked = vec![S::zero(); input.numel()];
    for n in 0..geom.n {
        let m = &mask.data()[n * plane..(n + 1) * plane];
        for c in 0..geom.c {
            let src = &input.data()[(n * geom.c + c) * plane..(n * geom.c + c + 1) * plane];
            let dst = &mut masked[(n * geom.c + c) * plane..(n * geom.c + c + 1) * plane];
            for ((d, &x), &mv) in dst.iter_mut().zip(src).zip(m) {
                *d = x * mv;
            }
        }
    }
    let col = im2col(&masked, &geom);
    let core = kernels::matmul_nn(p.weight.data(), &col, geom.oc, geom.rows(), cols);

    // ratio/updated are indexed as (n, oh, ow) flattened = column index.
    let mut out = vec![S::zero(); geom.n * geom.oc * out_plane];
    for n in 0..geom.n {
        for c in 0..geom.oc {
            let dst = &mut out[(n * geom.oc + c) * out_plane..(n * geom.oc + c + 1) * out_plane];
            let src = &core[c * cols + n * out_plane..c * cols + (n + 1) * out_plane];
            let r = &ratio[n * out_plane..(n + 1) * out_plane];
            let u = &updated[n * out_plane..(n + 1) * out_plane];
            let b = p.bias.as_ref().map(|b| b.data()[c]).unwrap_or(S::zero());
            for i in 0..out_plane {
                dst[i] = src[i] * r[i] + b * u[i];
            }
        }
    }

    let input_t = input.clone();
    let weight_t = p.weight.clone();
    let bias_t = p.bias.clone();
    let weight_data = Arc::new(p.weight.data().to_vec());
    let masked_data = Arc::new(masked);
    let mask_data = Arc::new(mask.data().to_vec());
    let ratio = Arc::new(ratio);
    let updated_b = Arc::new(updated.clone());
    let mut parents = vec![input.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let shape = vec![geom.n, geom.oc, geom.oh, geom.ow];
    let out_t = Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |grad, sink| {
            let cols = geom.cols();
            // Fold the per-position ratio into the output gradient once.
            let mut gmat = vec![S::zero(); geom.oc * cols];
            for n in 0..geom.n {
                let r = &ratio[n * out_plane..(n + 1) * out_plane];
                for c in 0..geom.oc {
                    let src =
                        &grad[(n * geom.oc + c) * out_plane..(n * geom.oc + c + 1) * out_plane];
                    let dst = &mut gmat[c * cols + n * out_plane..c * cols + (n + 1) * out_plane];
                    for i in 0..out_plane {
                        dst[i] = src[i] * r[i];
                    }
                }
            }
            if let Some(dw) = sink.entry(&weight_t) {
                let col = im2col(&masked_data, &geom);
                kernels::matmul_nt_acc(&gmat, &col, dw, geom.oc, cols, geom.rows());
            }
            if let Some(db) = bias_t.as_ref().and_then(|b| sink.entry(b)) {
                for (c, d) in db.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for n in 0..geom.n {
                        let src = &grad
                            [(n * geom.oc + c) * out_plane..(n * geom.oc + c + 1) * out_plane];
                        let u = &updated_b[n * out_plane..(n + 1) * out_plane];
                        for i in 0..out_plane {
                            acc += src[i] * u[i];
                        }
                    }
                    *d += acc;
                }
            }
            if let Some(dx) = sink.entry(&input_t) {
                let mut dcol = vec![S::zero(); geom.rows() * cols];
                kernels::matmul_tn_acc(&weight_data, &gmat, &mut dcol, geom.rows(), geom.oc, cols);
                let mut dmasked = vec![S::zero(); dx.len()];
                col2im_acc(&dcol, &geom, &mut dmasked);
                for n in 0..geom.n {
                    let m = &mask_data[n * plane..(n + 1) * plane];
                    for c in 0..geom.c {
                        let o = (n * geom.c + c) * plane;
                        for i in 0..plane {
                            dx[o + i] += dmasked[o + i] * m[i];
                        }
                    }
                }
            }
        }),
    );
    let oh = out_t.shape()[2];
    let ow = out_t.shape()[3];
    let updated_t = Tensor::from_vec(&[mn, 1, oh, ow], updated)?;
    Ok((out_t, updated_t))
}

/// Elementwise activations used across the model.
#[derive(Clone, Copy, Debug)]
pub enum Activation<S: Scalar> {
    Relu,
    LeakyRelu(S),
    Sigmoid,
    Identity,
}

impl<S: Scalar> Activation<S> {
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match *self {
            Activation::Relu => Ok(x.relu()),
            Activation::LeakyRelu(a) => {
                if a <= S::zero() || a >= S::one() {
                    return Err(Error::InvalidConfig(format!(
                        "leaky ReLU slope {a} outside (0,1)"
                    )));
                }
                Ok(x.leaky_relu(a))
            }
            Activation::Sigmoid => Ok(x.sigmoid()),
            Activation::Identity => Ok(x.scale(S::one())),
        }
    }
}

/// Convenience wrapper matching the operator table.
pub fn activation<S: Scalar>(x: &Tensor<S>, kind: Activation<S>) -> Result<Tensor<S>> {
    kind.apply(x)
}

/// Gated convolution: `O = φ(feature(x)) ⊙ σ(gating(x))`.
pub fn gconv2d<S: Scalar>(
    input: &Tensor<S>,
    feature: &ConvParams<S>,
    gating: &ConvParams<S>,
    phi: Activation<S>,
) -> Result<Tensor<S>> {
    let f = conv2d(input, feature)?;
    let g = conv2d(input, gating)?;
    if f.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gconv branches disagree: {:?} vs {:?}",
            f.shape(),
            g.shape()
        )));
    }
    phi.apply(&f)?.mul(&g.sigmoid())
}

/// Batch-normalization mode: collect batch statistics or reuse stored ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Frozen,
}

/// Per-channel running statistics for one BN layer. The learned scale and
/// shift live in the parameter set; in frozen mode the running statistics
/// never change while scale/shift remain trainable.
#[derive(Clone, Debug)]
pub struct BnState<S: Scalar> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub epsilon: S,
    pub mode: BnMode,
}

impl<S: Scalar> BnState<S> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: S::from_f64(0.1),
            epsilon: S::from_f64(1e-5),
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch normalization over `(N,H,W)` per channel.
///
/// Train mode normalizes by batch statistics (population variance) and folds
/// them into the running estimates with
/// `running = (1-momentum)·running + momentum·batch`; frozen mode normalizes
/// by the stored statistics and never updates them.
pub fn batch_norm2d<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    state: &mut BnState<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    if state.channels() != c || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ChannelMismatch(format!(
            "batch norm configured for {} channels, input has {c}",
            state.channels()
        )));
    }
    let plane = h * w;
    let per_channel = n * plane;
    let (mean, var) = match state.mode {
        BnMode::Train => {
            if per_channel < 2 {
                return Err(Error::InvalidConfig(
                    "batch statistics undefined: batch*H*W < 2".into(),
                ));
            }
            let inv_n = S::one() / S::from_usize(per_channel);
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let mut acc = S::zero();
                for b in 0..n {
                    for &v in &input.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        acc += v;
                    }
                }
                let mu = acc * inv_n;
                let mut vacc = S::zero();
                for b in 0..n {
                    for &v in &input.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        let d = v - mu;
                        vacc += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = vacc * inv_n;
            }
            let m = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = (S::one() - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] = (S::one() - m) * state.running_var[ch] + m * var[ch];
            }
            (mean, var)
        }
        BnMode::Frozen => (state.running_mean.clone(), state.running_var.clone()),
    };

    let inv: Vec<S> = var
        .iter()
        .map(|&v| S::one() / (v + state.epsilon).sqrt())
        .collect();
    let mut xhat = vec![S::zero(); input.numel()];
    let mut out = vec![S::zero(); input.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let (mu, iv) = (mean[ch], inv[ch]);
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in 0..plane {
                let xh = (input.data()[o + i] - mu) * iv;
                xhat[o + i] = xh;
                out[o + i] = ga * xh + be;
            }
        }
    }

    let input_t = input.clone();
    let gamma_t = gamma.clone();
    let beta_t = beta.clone();
    let gamma_data = Arc::new(gamma.data().to_vec());
    let xhat = Arc::new(xhat);
    let inv = Arc::new(inv);
    let mode = state.mode;
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad, sink| {
            let count = S::from_usize(per_channel);
            if let Some(dg) = sink.entry(&gamma_t) {
                for ch in 0..c {
                    let mut acc = S::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * plane;
                        for i in 0..plane {
                            acc += grad[o + i] * xhat[o + i];
                        }
                    }
                    dg[ch] += acc;
                }
            }
            if let Some(db) = sink.entry(&beta_t) {
                for ch in 0..c {
                    let mut acc = S::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * plane;
                        for i in 0..plane {
                            acc += grad[o + i];
                        }
                    }
                    db[ch] += acc;
                }
            }
            if let Some(dx) = sink.entry(&input_t) {
                match mode {
                    BnMode::Train => {
                        for ch in 0..c {
                            let mut sum_g = S::zero();
                            let mut sum_gx = S::zero();
                            for b in 0..n {
                                let o = (b * c + ch) * plane;
                                for i in 0..plane {
                                    sum_g += grad[o + i];
                                    sum_gx += grad[o + i] * xhat[o + i];
                                }
                            }
                            let mean_g = sum_g / count;
                            let mean_gx = sum_gx / count;
                            let scale = gamma_data[ch] * inv[ch];
                            for b in 0..n {
                                let o = (b * c + ch) * plane;
                                for i in 0..plane {
                                    dx[o + i] +=
                                        scale * (grad[o + i] - mean_g - xhat[o + i] * mean_gx);
                                }
                            }
                        }
                    }
                    BnMode::Frozen => {
                        for ch in 0..c {
                            let scale = gamma_data[ch] * inv[ch];
                            for b in 0..n {
                                let o = (b * c + ch) * plane;
                                for i in 0..plane {
                                    dx[o + i] += grad[o + i] * scale;
                                }
                            }
                        }
                    }
                }
            }
        }),
    ))
}

/// Nearest-neighbor upsampling: each pixel becomes a `factor x factor` block.
pub fn upsample_nearest<S: Scalar>(input: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    if factor < 1 {
        return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for bc in 0..n * c {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh {
            let sy = y / factor;
            for x in 0..ow {
                dst[y * ow + x] = src[sy * w + x / factor];
            }
        }
    }
    let input_t = input.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |grad, sink| {
            if let Some(dx) = sink.entry(&input_t) {
                for bc in 0..n * c {
                    let g = &grad[bc * oh * ow..(bc + 1) * oh * ow];
                    let d = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..oh {
                        let sy = y / factor;
                        for x in 0..ow {
                            d[sy * w + x / factor] += g[y * ow + x];
                        }
                    }
                }
            }
        }),
    ))
}

/// 2x2 max pooling with stride 2 (spatial extents must be even). Ties route
/// the gradient to the first maximal element in scan order.
pub fn max_pool2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::IndivisibleSize {
            size: h.max(w),
            divisor: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![S::zero(); n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for bc in 0..n * c {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let obase = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx2 in 0..2 {
                        let i = (2 * oy + dy) * w + 2 * ox + dx2;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                out[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = best_i as u32;
            }
        }
    }
    let input_t = input.clone();
    let argmax = Arc::new(argmax);
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |grad, sink| {
            if let Some(dx) = sink.entry(&input_t) {
                for bc in 0..n * c {
                    let obase = bc * oh * ow;
                    let d = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for i in 0..oh * ow {
                        d[argmax[obase + i] as usize] += grad[obase + i];
                    }
                }
            }
        }),
    ))
}

/// Keep every second pixel starting at (0,0); extents must be even.
pub fn subsample2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::IndivisibleSize {
            size: h.max(w),
            divisor: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for bc in 0..n * c {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[2 * y * w + 2 * x];
            }
        }
    }
    let input_t = input.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |grad, sink| {
            if let Some(dx) = sink.entry(&input_t) {
                for bc in 0..n * c {
                    let g = &grad[bc * oh * ow..(bc + 1) * oh * ow];
                    let d = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            d[2 * y * w + 2 * x] += g[y * ow + x];
                        }
                    }
                }
            }
        }),
    ))
}

/// Double the spatial extents, placing values at even coordinates and zeros
/// elsewhere (the expand step of a pyramid, before smoothing).
pub fn zero_upsample2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for bc in 0..n * c {
        let src = &input.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[2 * y * ow + 2 * x] = src[y * w + x];
            }
        }
    }
    let input_t = input.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |grad, sink| {
            if let Some(dx) = sink.entry(&input_t) {
                for bc in 0..n * c {
                    let g = &grad[bc * oh * ow..(bc + 1) * oh * ow];
                    let d = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            d[y * w + x] += g[2 * y * ow + 2 * x];
                        }
                    }
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn params(
        weight: Tensor<f64>,
        bias: Option<Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> ConvParams<f64> {
        ConvParams::new(weight, bias, stride, pad).unwrap()
    }

    #[test]
    fn conv_sums_all_elements_with_ones_kernel() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &params(w, None, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let x = Tensor::zeros(&[2, 3, 5, 5]);
        let w = Tensor::from_vec(&[4, 3, 3, 3], vec![0.7; 4 * 3 * 9]).unwrap();
        let y = conv2d::<f64>(&x, &params(w, None, 1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = crate::rng::root(11);
        let x = Tensor::uniform(&mut rng, &[1, 1, 5, 5], -1.0, 1.0);
        let w = Tensor::uniform(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
        let y = conv2d::<f64>(&x, &params(w.clone(), None, 1, 0)).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for ki in 0..3 {
                    for kj in 0..3 {
                        acc += x.data()[(oy + ki) * 5 + ox + kj] * w.data()[ki * 3 + kj];
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], acc);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_tiny_output() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::from_vec(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(matches!(
            conv2d::<f64>(&x, &params(w, None, 1, 1)),
            Err(Error::ChannelMismatch(_))
        ));
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(conv2d::<f64>(&x, &params(w, None, 1, 0)).is_err());
    }

    #[test]
    fn pconv_equals_conv_when_all_valid() {
        let mut rng = crate::rng::root(5);
        let x = Tensor::uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w = Tensor::uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[4], -0.5, 0.5);
        let mask = Tensor::full(&[2, 1, 6, 6], 1.0);
        let p = params(w, Some(b), 1, 0);
        let (y, m) = pconv2d::<f64>(&x, &mask, &p).unwrap();
        let y_ref = conv2d(&x, &p).unwrap();
        // Without padding every window is fully valid, so the scale factor is
        // exactly 1 and the outputs match bit for bit.
        assert_eq!(y.data(), y_ref.data());
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pconv_all_hole_window_outputs_zero_and_clears_mask() {
        let x = Tensor::full(&[1, 1, 3, 3], 7.0);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let mask = Tensor::zeros(&[1, 1, 3, 3]);
        let (y, m) = pconv2d::<f64>(&x, &mask, &params(w, Some(b), 1, 0)).unwrap();
        assert_eq!(y.data(), &[0.0]);
        assert_eq!(m.data(), &[0.0]);
    }

    #[test]
    fn pconv_renormalization_arithmetic() {
        // All-ones 3x3 kernel, window values all 2, five valid pixels, bias 0:
        // (2*5) * (9/5) = 18.
        let x = Tensor::full(&[1, 1, 3, 3], 2.0);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let mask = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let (y, m) = pconv2d::<f64>(&x, &mask, &params(w, None, 1, 0)).unwrap();
        assert_eq!(y.data(), &[18.0]);
        assert_eq!(m.data(), &[1.0]);
    }

    #[test]
    fn pconv_rejects_non_binary_mask() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let mask = Tensor::full(&[1, 1, 3, 3], 0.5);
        assert!(matches!(
            pconv2d::<f64>(&x, &mask, &params(w, None, 1, 0)),
            Err(Error::NonBinaryMask)
        ));
    }

    #[test]
    fn gconv_gate_at_zero_halves_feature() {
        // Feature branch outputs 2 (bias), gating branch outputs 0: 2*σ(0)=1.
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let wf = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let bf = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let wg = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let y = gconv2d::<f64>(
            &x,
            &params(wf, Some(bf), 1, 1),
            &params(wg, None, 1, 1),
            Activation::Identity,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gconv_closed_gate_suppresses_output() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let wf = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let bf = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let wg = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let bg = Tensor::from_vec(&[1], vec![-20.0]).unwrap();
        let y = gconv2d::<f64>(
            &x,
            &params(wf, Some(bf), 1, 1),
            &params(wg, Some(bg), 1, 1),
            Activation::Identity,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn bn_identity_on_standardized_input() {
        let data = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::from_vec(&[2, 1, 2, 2], data.clone()).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut st = BnState::new(1);
        let y = batch_norm2d::<f64>(&x, &gamma, &beta, &mut st).unwrap();
        for (a, b) in y.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn bn_frozen_statistics_do_not_move() {
        let mut st = BnState::<f64>::new(2);
        st.running_mean = vec![0.3, -0.1];
        st.running_var = vec![1.5, 0.2];
        st.mode = BnMode::Frozen;
        let snapshot = (st.running_mean.clone(), st.running_var.clone());
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let mut rng = crate::rng::root(3);
        for _ in 0..100 {
            let x = Tensor::uniform(&mut rng, &[1, 2, 4, 4], -2.0, 2.0);
            batch_norm2d(&x, &gamma, &beta, &mut st).unwrap();
        }
        assert_eq!(st.running_mean, snapshot.0);
        assert_eq!(st.running_var, snapshot.1);
    }

    #[test]
    fn bn_running_update_matches_closed_form() {
        // Constant batch of value 3: batch mean 3, batch var 0.
        let x = Tensor::full(&[1, 1, 2, 2], 3.0);
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut st = BnState::<f64>::new(1);
        batch_norm2d(&x, &gamma, &beta, &mut st).unwrap();
        // running_mean = 0.9*0 + 0.1*3, running_var = 0.9*1 + 0.1*0.
        assert!((st.running_mean[0] - 0.3).abs() < 1e-12);
        assert!((st.running_var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn bn_rejects_degenerate_batch() {
        let x = Tensor::full(&[1, 1, 1, 1], 3.0);
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut st = BnState::<f64>::new(1);
        assert!(batch_norm2d(&x, &gamma, &beta, &mut st).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest::<f64>(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let id = upsample_nearest::<f64>(&x, 1).unwrap();
        assert_eq!(id.data(), x.data());
        assert!(upsample_nearest::<f64>(&x, 0).is_err());
    }

    #[test]
    fn upsample_then_corner_subsample_recovers_input() {
        let mut rng = crate::rng::root(9);
        let x = Tensor::uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let up = upsample_nearest::<f64>(&x, 2).unwrap();
        let down = subsample2(&up).unwrap();
        assert_eq!(down.data(), x.data());
    }

    #[test]
    fn activation_table() {
        let x = Tensor::from_vec(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(
            activation(&x, Activation::Relu).unwrap().data(),
            &[0.0, 0.0, 2.0]
        );
        let leaky = activation(&x, Activation::LeakyRelu(0.2)).unwrap();
        assert!((leaky.data()[0] + 0.2).abs() < 1e-12);
        let sig = activation(&Tensor::scalar(0.0f64), Activation::Sigmoid).unwrap();
        assert!((sig.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_bias_accumulates_output_grad() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![0.5; 9]).unwrap();
        let w = Tensor::leaf(&[1, 1, 3, 3], vec![0.1; 9]).unwrap();
        let b = Tensor::leaf(&[1], vec![0.0]).unwrap();
        let p = ConvParams::new(w.clone(), Some(b.clone()), 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let g = backward(&y.sum()).unwrap();
        // d(sum)/db = number of output positions = 9.
        assert_eq!(g.get(&b).unwrap(), &[9.0]);
        assert_eq!(g.get(&w).unwrap().len(), 9);
    }

    #[test]
    fn max_pool_routes_gradient_to_max() {
        let x = Tensor::leaf(&[1, 1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap();
        let y = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = backward(&y.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
