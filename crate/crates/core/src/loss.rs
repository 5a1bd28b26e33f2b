//! The inpainting objective: per-pixel valid/hole terms, perceptual and style
//! terms over extracted features, total variation over the (dilated) hole
//! region, and a Laplacian-pyramid term, combined as a weighted sum.
//!
//! The feature extractor stands in for pretrained pooling taps: three fixed
//! (never trained) conv+ReLU+maxpool stages with seeded random weights. It is
//! deterministic given its seed and gradients flow through it to its input;
//! externally supplied weights can replace the random ones.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::ops::{conv2d, max_pool2, subsample2, zero_upsample2, ConvParams};
use crate::tensor::{Scalar, Tensor};
use crate::{rng, Error, Result};

/// Coefficients of the six weighted terms (the style coefficient multiplies
/// the sum of both style terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub valid: f64,
    pub hole: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
    pub laplacian: f64,
}

impl LossWeights {
    /// The published configuration: 30, 240, 0.2, 0.05, 250, 20.
    pub fn paper() -> Self {
        LossWeights {
            valid: 30.0,
            hole: 240.0,
            perceptual: 0.2,
            style: 0.05,
            tv: 250.0,
            laplacian: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.valid,
            self.hole,
            self.perceptual,
            self.style,
            self.tv,
            self.laplacian,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which pixels the total-variation term sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvRegion {
    /// The hole region dilated by one pixel (8-neighborhood).
    DilatedHole,
    /// Every pixel.
    WholeImage,
}

/// Sign of the exponent in the per-level pyramid weight `2^(±2j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LapWeighting {
    /// `2^(2j)` — as printed (up-weights coarse levels).
    AsPrinted,
    /// `2^(-2j)` — the variant some lineages use.
    Inverted,
}

/// Full loss configuration.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub lap_levels: usize,
    pub lap_weighting: LapWeighting,
    pub tv_region: TvRegion,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::paper(),
            lap_levels: 3,
            lap_weighting: LapWeighting::AsPrinted,
            tv_region: TvRegion::DilatedHole,
        }
    }
}

// ── Feature extractor ───────────────────────────────────────────────

/// Three fixed conv(3x3) + ReLU + 2x2-maxpool stages. Stage `p` halves the
/// spatial extent `p` times.
pub struct FeatureExtractor<S: Scalar> {
    stages: Vec<ConvParams<S>>,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub const DEFAULT_WIDTHS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64, in_channels: usize, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidConfig("extractor needs >= 1 stage".into()));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let mut r = rng::stream(seed, 0xfea7, i as u64);
            let fan_in = prev * 9;
            let limit = (6.0 / fan_in as f64).sqrt();
            let weight = Tensor::uniform(&mut r, &[w, prev, 3, 3], -limit, limit);
            let bias = Tensor::zeros(&[w]);
            stages.push(ConvParams::new(weight, Some(bias), 1, 1)?);
            prev = w;
        }
        Ok(FeatureExtractor {
            stages,
            widths: widths.to_vec(),
            seed,
        })
    }

    /// Replace the weights of one stage (externally supplied extractors).
    pub fn set_stage_weights(&mut self, stage: usize, weight: Tensor<S>, bias: Tensor<S>) -> Result<()> {
        let current = &self.stages[stage];
        if weight.shape() != current.weight.shape() {
            return Err(Error::ShapeMismatch(format!(
                "stage {stage} weight {:?}, expected {:?}",
                weight.shape(),
                current.weight.shape()
            )));
        }
        self.stages[stage] = ConvParams::new(weight, Some(bias), 1, 1)?;
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].in_channels()
    }

    /// Feature maps after each pooling stage.
    pub fn features(&self, image: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let (_, c, _, _) = image.dims4()?;
        if c != self.in_channels() {
            return Err(Error::ChannelMismatch(format!(
                "extractor expects {} channels, image has {c}",
                self.in_channels()
            )));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = max_pool2(&conv2d(&x, stage)?.relu())?;
            levels.push(x.clone());
        }
        Ok(levels)
    }
}

// ── Pixel terms ─────────────────────────────────────────────────────

fn check_mask_for<S: Scalar>(image: &Tensor<S>, mask: &Tensor<S>) -> Result<()> {
    let (n, _, h, w) = image.dims4()?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    if (mn, mc, mh, mw) != (n, 1, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    if !mask.data().iter().all(|&v| v == S::zero() || v == S::one()) {
        return Err(Error::NonBinaryMask);
    }
    Ok(())
}

/// Complement of a binary mask.
pub fn mask_complement<S: Scalar>(mask: &Tensor<S>) -> Tensor<S> {
    let data = mask.data().iter().map(|&v| S::one() - v).collect();
    Tensor::from_vec(mask.shape(), data).expect("same shape")
}

/// Mean absolute error restricted to valid pixels: `‖M⊙(out-gt)‖₁ / N`,
/// with `N` the total element count of `gt`.
pub fn l_valid<S: Scalar>(out: &Tensor<S>, gt: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    check_mask_for(gt, mask)?;
    let diff = out.sub(gt)?.mul_mask(mask)?;
    Ok(diff.l1_mean())
}

/// Mean absolute error restricted to hole pixels: `‖(1-M)⊙(out-gt)‖₁ / N`.
pub fn l_hole<S: Scalar>(out: &Tensor<S>, gt: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    check_mask_for(gt, mask)?;
    let inv = mask_complement(mask);
    let diff = out.sub(gt)?.mul_mask(&inv)?;
    Ok(diff.l1_mean())
}

// ── Perceptual and style ────────────────────────────────────────────

/// Perceptual distance over extractor levels for both the raw output and the
/// composite: `Σ_p ‖Ψp(out)-Ψp(gt)‖₁/Np + Σ_p ‖Ψp(comp)-Ψp(gt)‖₁/Np`.
pub fn l_perceptual<S: Scalar>(
    out: &Tensor<S>,
    comp: &Tensor<S>,
    gt: &Tensor<S>,
    psi: &FeatureExtractor<S>,
) -> Result<Tensor<S>> {
    let f_out = psi.features(out)?;
    let f_comp = psi.features(comp)?;
    let f_gt = psi.features(gt)?;
    let mut total = Tensor::scalar(S::zero());
    for ((fo, fc), fg) in f_out.iter().zip(&f_comp).zip(&f_gt) {
        total = total.add(&fo.sub(fg)?.l1_mean())?;
        total = total.add(&fc.sub(fg)?.l1_mean())?;
    }
    Ok(total)
}

/// Gram matrix `FᵀF` of a feature map reshaped to (positions, channels).
pub fn gram<S: Scalar>(features: &Tensor<S>) -> Result<Tensor<S>> {
    let f = features.positions_by_channels()?;
    f.matmul_tn(&f)
}

/// Style distance over pre-extracted feature levels:
/// `Σ_p (1/Cp²)·‖(Gram_a - Gram_b)/Kp‖₁` with `Kp` the element count of Ψp.
pub fn l_style_from_features<S: Scalar>(fa: &[Tensor<S>], fb: &[Tensor<S>]) -> Result<Tensor<S>> {
    if fa.len() != fb.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature pyramids of {} vs {} levels",
            fa.len(),
            fb.len()
        )));
    }
    let mut total = Tensor::scalar(S::zero());
    for (a, b) in fa.iter().zip(fb) {
        let c = a.shape()[1];
        let k = a.numel();
        let diff = gram(a)?.sub(&gram(b)?)?.abs().sum();
        let norm = 1.0 / (k as f64 * (c * c) as f64);
        total = total.add(&diff.scale(S::from_f64(norm)))?;
    }
    Ok(total)
}

/// Style distance between two images under the extractor.
pub fn l_style<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    psi: &FeatureExtractor<S>,
) -> Result<Tensor<S>> {
    l_style_from_features(&psi.features(a)?, &psi.features(b)?)
}

// ── Total variation ─────────────────────────────────────────────────

/// 1-pixel dilation of the hole region (8-neighborhood) per batch image.
fn tv_region_flags<S: Scalar>(mask: &Tensor<S>, region: TvRegion, h: usize, w: usize) -> Vec<bool> {
    let n = mask.shape()[0];
    let mut flags = vec![false; n * h * w];
    match region {
        TvRegion::WholeImage => flags.iter_mut().for_each(|f| *f = true),
        TvRegion::DilatedHole => {
            for b in 0..n {
                let m = &mask.data()[b * h * w..(b + 1) * h * w];
                let out = &mut flags[b * h * w..(b + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        if m[y * w + x] == S::zero() {
                            for dy in -1i32..=1 {
                                for dx in -1i32..=1 {
                                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                                    if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                                        out[ny as usize * w + nx as usize] = true;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    flags
}

/// Total variation of the composite over the region `R` (pairs with both
/// endpoints in `R`), normalized by the element count of the composite.
pub fn l_tv<S: Scalar>(comp: &Tensor<S>, mask: &Tensor<S>, region: TvRegion) -> Result<Tensor<S>> {
    let (n, c, h, w) = comp.dims4()?;
    check_mask_for(comp, mask)?;
    let flags = tv_region_flags(mask, region, h, w);
    let inv_n = S::one() / S::from_usize(comp.numel());

    let plane = h * w;
    let mut acc = S::zero();
    for b in 0..n {
        let fl = &flags[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let img = &comp.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    if !fl[y * w + x] {
                        continue;
                    }
                    if x + 1 < w && fl[y * w + x + 1] {
                        acc += (img[y * w + x + 1] - img[y * w + x]).abs() * inv_n;
                    }
                    if y + 1 < h && fl[(y + 1) * w + x] {
                        acc += (img[(y + 1) * w + x] - img[y * w + x]).abs() * inv_n;
                    }
                }
            }
        }
    }

    let comp_t = comp.clone();
    let comp_data = alloc::sync::Arc::new(comp.data().to_vec());
    let flags = alloc::sync::Arc::new(flags);
    Ok(Tensor::from_op(
        vec![1],
        vec![acc],
        vec![comp.clone()],
        Box::new(move |grad, sink| {
            let g = grad[0] * inv_n;
            if let Some(dx) = sink.entry(&comp_t) {
                for b in 0..n {
                    let fl = &flags[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        for y in 0..h {
                            for x in 0..w {
                                if !fl[y * w + x] {
                                    continue;
                                }
                                if x + 1 < w && fl[y * w + x + 1] {
                                    let d = comp_data[o + y * w + x + 1] - comp_data[o + y * w + x];
                                    let s = if d > S::zero() {
                                        S::one()
                                    } else if d < S::zero() {
                                        -S::one()
                                    } else {
                                        S::zero()
                                    };
                                    dx[o + y * w + x + 1] += g * s;
                                    dx[o + y * w + x] -= g * s;
                                }
                                if y + 1 < h && fl[(y + 1) * w + x] {
                                    let d = comp_data[o + (y + 1) * w + x] - comp_data[o + y * w + x];
                                    let s = if d > S::zero() {
                                        S::one()
                                    } else if d < S::zero() {
                                        -S::one()
                                    } else {
                                        S::zero()
                                    };
                                    dx[o + (y + 1) * w + x] += g * s;
                                    dx[o + y * w + x] -= g * s;
                                }
                            }
                        }
                    }
                }
            }
        }),
    ))
}

// ── Laplacian pyramid ───────────────────────────────────────────────

/// 5x5 binomial kernel as a dense `(C,C,5,5)` depthwise filter (off-diagonal
/// blocks zero), scaled by `gain`.
fn binomial_kernel<S: Scalar>(channels: usize, gain: f64) -> ConvParams<S> {
    let b = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut weight = vec![S::zero(); channels * channels * 25];
    for c in 0..channels {
        for i in 0..5 {
            for j in 0..5 {
                let v = gain * b[i] * b[j] / 256.0;
                weight[((c * channels + c) * 5 + i) * 5 + j] = S::from_f64(v);
            }
        }
    }
    let w = Tensor::from_vec(&[channels, channels, 5, 5], weight).expect("kernel dims");
    ConvParams::new(w, None, 1, 2).expect("valid kernel")
}

/// Band-pass levels `L⁰..L^{J-1}` plus the coarse residual. Expanding the
/// residual and adding bands reconstructs the input exactly (up to float
/// rounding) by construction.
pub struct LaplacianPyramid<S: Scalar> {
    pub bands: Vec<Tensor<S>>,
    pub residual: Tensor<S>,
}

fn pyramid_expand<S: Scalar>(x: &Tensor<S>, channels: usize) -> Result<Tensor<S>> {
    // Zero-stuffed upsample followed by 4x-gain smoothing interpolates.
    conv2d(&zero_upsample2(x)?, &binomial_kernel(channels, 4.0))
}

/// Build a `levels`-band pyramid; spatial extents must be divisible by
/// `2^levels`.
pub fn build_pyramid<S: Scalar>(image: &Tensor<S>, levels: usize) -> Result<LaplacianPyramid<S>> {
    let (_, c, h, w) = image.dims4()?;
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::IndivisibleSize {
            size: h.min(w),
            divisor: div,
        });
    }
    let smooth = binomial_kernel::<S>(c, 1.0);
    let mut bands = Vec::with_capacity(levels);
    let mut current = image.clone();
    for _ in 0..levels {
        let next = subsample2(&conv2d(&current, &smooth)?)?;
        let band = current.sub(&pyramid_expand(&next, c)?)?;
        bands.push(band);
        current = next;
    }
    Ok(LaplacianPyramid {
        bands,
        residual: current,
    })
}

impl<S: Scalar> LaplacianPyramid<S> {
    /// Invert the decomposition: `G_j = L_j + expand(G_{j+1})`.
    pub fn reconstruct(&self) -> Result<Tensor<S>> {
        let c = self.residual.shape()[1];
        let mut current = self.residual.clone();
        for band in self.bands.iter().rev() {
            current = band.add(&pyramid_expand(&current, c)?)?;
        }
        Ok(current)
    }
}

/// Laplacian loss: `Σ_j 2^(±2j) ‖L^j(out) - L^j(gt)‖₁` over `levels` bands.
pub fn l_laplacian<S: Scalar>(
    out: &Tensor<S>,
    gt: &Tensor<S>,
    levels: usize,
    weighting: LapWeighting,
) -> Result<Tensor<S>> {
    let pa = build_pyramid(out, levels)?;
    let pb = build_pyramid(gt, levels)?;
    let mut total = Tensor::scalar(S::zero());
    for (j, (a, b)) in pa.bands.iter().zip(&pb.bands).enumerate() {
        let weight = match weighting {
            LapWeighting::AsPrinted => (1u64 << (2 * j)) as f64,
            LapWeighting::Inverted => 1.0 / (1u64 << (2 * j)) as f64,
        };
        let term = a.sub(b)?.abs().sum().scale(S::from_f64(weight));
        total = total.add(&term)?;
    }
    Ok(total)
}

// ── Combination ─────────────────────────────────────────────────────

/// The seven scalar terms of one loss evaluation.
pub struct LossTerms<S: Scalar> {
    pub valid: Tensor<S>,
    pub hole: Tensor<S>,
    pub perceptual: Tensor<S>,
    pub style_out: Tensor<S>,
    pub style_comp: Tensor<S>,
    pub tv: Tensor<S>,
    pub laplacian: Tensor<S>,
}

impl<S: Scalar> LossTerms<S> {
    /// Weighted sum; errors on a non-finite term.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor<S>> {
        w.validate()?;
        for (name, t) in [
            ("valid", &self.valid),
            ("hole", &self.hole),
            ("perceptual", &self.perceptual),
            ("style_out", &self.style_out),
            ("style_comp", &self.style_comp),
            ("tv", &self.tv),
            ("laplacian", &self.laplacian),
        ] {
            t.validate_finite(name)?;
        }
        let style = self.style_out.add(&self.style_comp)?;
        let mut total = self.valid.scale(S::from_f64(w.valid));
        total = total.add(&self.hole.scale(S::from_f64(w.hole)))?;
        total = total.add(&self.perceptual.scale(S::from_f64(w.perceptual)))?;
        total = total.add(&style.scale(S::from_f64(w.style)))?;
        total = total.add(&self.tv.scale(S::from_f64(w.tv)))?;
        total = total.add(&self.laplacian.scale(S::from_f64(w.laplacian)))?;
        Ok(total)
    }
}

/// Evaluate all seven terms for one prediction.
///
/// `mask` marks valid pixels (1) and holes (0); `comp` is the composite
/// `M⊙gt + (1-M)⊙out`.
pub fn compute_terms<S: Scalar>(
    out: &Tensor<S>,
    gt: &Tensor<S>,
    mask: &Tensor<S>,
    comp: &Tensor<S>,
    psi: &FeatureExtractor<S>,
    cfg: &LossConfig,
) -> Result<LossTerms<S>> {
    Ok(LossTerms {
        valid: l_valid(out, gt, mask)?,
        hole: l_hole(out, gt, mask)?,
        perceptual: l_perceptual(out, comp, gt, psi)?,
        style_out: l_style(out, gt, psi)?,
        style_comp: l_style(comp, gt, psi)?,
        tv: l_tv(comp, mask, cfg.tv_region)?,
        laplacian: l_laplacian(out, gt, cfg.lap_levels, cfg.lap_weighting)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn pixel_terms_on_uniform_difference() {
        // 2x2 single-channel, diff 0.5 everywhere, all-valid mask.
        let gt = img(&[1, 1, 2, 2], vec![0.0; 4]);
        let out = img(&[1, 1, 2, 2], vec![0.5; 4]);
        let mask = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert!((l_valid(&out, &gt, &mask).unwrap().item() - 0.5).abs() < 1e-12);
        assert_eq!(l_hole(&out, &gt, &mask).unwrap().item(), 0.0);
    }

    #[test]
    fn pixel_terms_zero_when_equal() {
        let gt = img(&[1, 2, 4, 4], (0..32).map(|i| i as f64 / 32.0).collect());
        let mask_data: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let mask = img(&[1, 1, 4, 4], mask_data);
        assert_eq!(l_valid(&gt, &gt, &mask).unwrap().item(), 0.0);
        assert_eq!(l_hole(&gt, &gt, &mask).unwrap().item(), 0.0);
    }

    #[test]
    fn valid_plus_hole_partitions_l1() {
        let mut rng = crate::rng::root(21);
        let gt = Tensor::uniform(&mut rng, &[2, 2, 4, 4], 0.0, 1.0);
        let out = Tensor::uniform(&mut rng, &[2, 2, 4, 4], 0.0, 1.0);
        let mask_data: Vec<f64> = (0..32).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let mask = img(&[2, 1, 4, 4], mask_data);
        let v = l_valid(&out, &gt, &mask).unwrap().item();
        let h = l_hole(&out, &gt, &mask).unwrap().item();
        let l1 = out.sub(&gt).unwrap().l1_mean().item();
        assert!((v + h - l1).abs() < 1e-12);
    }

    #[test]
    fn perceptual_zero_at_equality_positive_otherwise() {
        let psi = FeatureExtractor::<f64>::new(7, 1, &FeatureExtractor::<f64>::DEFAULT_WIDTHS).unwrap();
        let mut rng = crate::rng::root(3);
        let gt = Tensor::uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        let zero = l_perceptual(&gt, &gt, &gt, &psi).unwrap().item();
        assert_eq!(zero, 0.0);
        let out = Tensor::uniform(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        assert!(l_perceptual(&out, &out, &gt, &psi).unwrap().item() > 0.0);
    }

    #[test]
    fn style_gram_hand_example() {
        // Identity features on 1-channel 2x2 images: Gram(a) = Σa², so
        // style = |30 - 3| / (K=4 * C²=1) = 6.75.
        let a = img(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = img(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]);
        let s = l_style_from_features(&[a], &[b]).unwrap().item();
        assert!((s - 6.75).abs() < 1e-12);
    }

    #[test]
    fn style_invariant_to_joint_channel_permutation() {
        // Swapping channels of both operands permutes both Grams identically.
        let mut rng = crate::rng::root(17);
        let a = Tensor::uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let swap = |t: &Tensor<f64>| {
            let c0 = t.slice_channels(0, 1).unwrap();
            let c1 = t.slice_channels(1, 2).unwrap();
            Tensor::concat_channels(&[&c1, &c0]).unwrap()
        };
        let s1 = l_style_from_features(&[a.clone()], &[b.clone()]).unwrap().item();
        let s2 = l_style_from_features(&[swap(&a)], &[swap(&b)]).unwrap().item();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = crate::rng::root(19);
        let f = Tensor::uniform(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        let g = gram(&f).unwrap();
        let d = g.data();
        for i in 0..3 {
            for j in 0..3 {
                assert!((d[i * 3 + j] - d[j * 3 + i]).abs() < 1e-12);
            }
            assert!(d[i * 3 + i] >= 0.0);
        }
    }

    #[test]
    fn tv_zero_for_constant_image_and_empty_region() {
        let comp = Tensor::full(&[1, 1, 4, 4], 0.7);
        let holes = img(
            &[1, 1, 4, 4],
            (0..16).map(|i| if i == 5 { 0.0 } else { 1.0 }).collect(),
        );
        assert_eq!(l_tv(&comp, &holes, TvRegion::DilatedHole).unwrap().item(), 0.0);
        // No holes: region is empty.
        let mut rng = crate::rng::root(8);
        let noisy = Tensor::uniform(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
        let all_valid = Tensor::full(&[1, 1, 4, 4], 1.0);
        assert_eq!(l_tv(&noisy, &all_valid, TvRegion::DilatedHole).unwrap().item(), 0.0);
    }

    #[test]
    fn tv_matches_loop_oracle_on_single_hole() {
        // 3x3, one hole at the center: R is the whole 3x3 image.
        let vals = vec![0.1, 0.9, 0.2, 0.4, 0.5, 0.7, 0.3, 0.8, 0.6];
        let comp = img(&[1, 1, 3, 3], vals.clone());
        let mask = img(
            &[1, 1, 3, 3],
            (0..9).map(|i| if i == 4 { 0.0 } else { 1.0 }).collect(),
        );
        let mut expect = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                if x + 1 < 3 {
                    expect += (vals[y * 3 + x + 1] - vals[y * 3 + x]).abs() / 9.0;
                }
                if y + 1 < 3 {
                    expect += (vals[(y + 1) * 3 + x] - vals[y * 3 + x]).abs() / 9.0;
                }
            }
        }
        let got = l_tv(&comp, &mask, TvRegion::DilatedHole).unwrap().item();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn pyramid_reconstructs_input() {
        let mut rng = crate::rng::root(4);
        let x = Tensor::uniform(&mut rng, &[1, 2, 16, 16], 0.0, 1.0);
        let p = build_pyramid(&x, 3).unwrap();
        assert_eq!(p.bands.len(), 3);
        let back = p.reconstruct().unwrap();
        let max_err = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-12, "max reconstruction error {max_err}");
    }

    #[test]
    fn pyramid_bands_vanish_on_equal_inputs_and_divisibility_enforced() {
        let x = Tensor::full(&[1, 1, 8, 8], 0.25);
        assert_eq!(l_laplacian(&x, &x, 3, LapWeighting::AsPrinted).unwrap().item(), 0.0);
        let odd = Tensor::full(&[1, 1, 12, 12], 0.0);
        assert!(build_pyramid(&odd, 3).is_err());
    }

    #[test]
    fn constant_image_has_zero_interior_bands() {
        // Zero padding breaks flatness near the border, but interior band
        // values of a constant image are exactly zero.
        let x = Tensor::full(&[1, 1, 16, 16], 0.5);
        let p = build_pyramid(&x, 1).unwrap();
        let band = &p.bands[0];
        for y in 4..12 {
            for x_ in 4..12 {
                assert!(band.data()[y * 16 + x_].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_with_unit_terms_matches_paper_arithmetic() {
        let one = || Tensor::scalar(1.0f64);
        let terms = LossTerms {
            valid: one(),
            hole: one(),
            perceptual: one(),
            style_out: one(),
            style_comp: one(),
            tv: one(),
            laplacian: one(),
        };
        let total = terms.total(&LossWeights::paper()).unwrap().item();
        // 30 + 240 + 0.2 + 0.05*(1+1) + 250 + 20 = 540.3
        assert!((total - 540.3).abs() < 1e-12);
        let zero = || Tensor::scalar(0.0f64);
        let zeros = LossTerms {
            valid: zero(),
            hole: zero(),
            perceptual: zero(),
            style_out: zero(),
            style_comp: zero(),
            tv: zero(),
            laplacian: zero(),
        };
        assert_eq!(zeros.total(&LossWeights::paper()).unwrap().item(), 0.0);
    }

    #[test]
    fn total_rejects_non_finite_terms() {
        let one = || Tensor::scalar(1.0f64);
        let terms = LossTerms {
            valid: Tensor::scalar(f64::NAN),
            hole: one(),
            perceptual: one(),
            style_out: one(),
            style_comp: one(),
            tv: one(),
            laplacian: one(),
        };
        assert!(matches!(
            terms.total(&LossWeights::paper()),
            Err(Error::NumericFailure(_))
        ));
    }
}
