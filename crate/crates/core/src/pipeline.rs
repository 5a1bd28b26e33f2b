//! The autoinpainting pipeline: sweep circles over the organ of interest,
//! inpaint each independently, keep the top-scoring candidates, inpaint the
//! union with incremental dilations, and accept or reject the result with a
//! size gate. Residual volumes are evaluated with a threshold sweep.
//!
//! The whole pipeline is a pure function of `(model, volume, params)`; slices
//! are independent, so callers may fan per-slice work out to threads and
//! merge by index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::loss::FeatureExtractor;
use crate::metrics::ConfusionCounts;
use crate::net::InpaintModel;
use crate::tensor::Tensor;
use crate::volume::{ImageSlice, Volume};
use crate::{Error, Result};

// ── Preprocessing ───────────────────────────────────────────────────

/// Source intensity conventions with their clamp ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Lung CT, Hounsfield clamp [-1000, 500].
    CtLung,
    /// Head-and-neck CT, Hounsfield clamp [-200, 200].
    CtHeadNeck,
    /// PET standardized uptake values, clamp [0, 12].
    Pet,
}

impl Modality {
    pub fn clamp_range(&self) -> (f64, f64) {
        match self {
            Modality::CtLung => (-1000.0, 500.0),
            Modality::CtHeadNeck => (-200.0, 200.0),
            Modality::Pet => (0.0, 12.0),
        }
    }
}

/// Clamp raw intensities to the modality range and rescale that range to
/// [0, 1].
pub fn ingest_preprocess(raw: &[f32], modality: Modality) -> Vec<f32> {
    let (lo, hi) = modality.clamp_range();
    raw.iter()
        .map(|&v| (((v as f64).clamp(lo, hi) - lo) / (hi - lo)) as f32)
        .collect()
}

// ── Parameters ──────────────────────────────────────────────────────

/// Sliding-circle and segmentation hyperparameters (pixel units).
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    /// Sliding-circle radius.
    pub radius: f64,
    /// Lattice interval between circle centers.
    pub stride: usize,
    /// Candidates kept for the union.
    pub top_k: usize,
    /// Structuring-element widths for incremental dilation (odd, increasing).
    pub dilation_widths: Vec<usize>,
    /// Relative score-increase threshold that stops the dilation walk.
    pub epsilon: f64,
    /// Minimum plausible tumor radius (size gate).
    pub r_min: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub theta_step: f64,
    /// Intensity-vs-texture mixing weight in [0,1].
    pub lambda: f64,
    /// Residual binarization level used before the gate's CC analysis.
    pub gate_threshold: f64,
}

impl PipelineParams {
    /// Published lung parameters: radius 27, interval 15, minimum radius 7.
    pub fn paper_lung() -> Self {
        PipelineParams {
            radius: 27.0,
            stride: 15,
            top_k: 3,
            dilation_widths: vec![7, 9, 11, 13, 15],
            epsilon: 0.05,
            r_min: 7.0,
            theta_lo: 0.0,
            theta_hi: 0.80,
            theta_step: 0.02,
            lambda: 0.5,
            gate_threshold: 0.1,
        }
    }

    /// Published head-and-neck parameters: radius 15, interval 8, minimum
    /// radius 4.
    pub fn paper_head_neck() -> Self {
        PipelineParams {
            radius: 15.0,
            stride: 8,
            r_min: 4.0,
            ..Self::paper_lung()
        }
    }

    /// Scale the published lung parameters to another square image extent
    /// (pixel quantities scale by `size/512`, widths snapped to odd ≥ 3).
    pub fn scaled(size: usize) -> Self {
        let f = size as f64 / 512.0;
        let odd = |v: f64| -> usize {
            let r = Float::round(v).max(3.0) as usize;
            if r % 2 == 0 {
                r + 1
            } else {
                r
            }
        };
        let base = Self::paper_lung();
        PipelineParams {
            radius: (base.radius * f).max(2.0),
            stride: (Float::round(base.stride as f64 * f) as usize).max(1),
            dilation_widths: base.dilation_widths.iter().map(|&w| odd(w as f64 * f)).collect(),
            r_min: (base.r_min * f).max(1.0),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 || self.stride == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig(
                "radius, stride and top_k must be positive".into(),
            ));
        }
        let mut prev = 0usize;
        for &w in &self.dilation_widths {
            if w % 2 == 0 || w <= prev {
                return Err(Error::InvalidConfig(
                    "dilation widths must be strictly increasing odd integers".into(),
                ));
            }
            prev = w;
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must lie in [0,1]".into()));
        }
        if !(self.theta_lo >= 0.0 && self.theta_lo < self.theta_hi && self.theta_hi <= 1.0) {
            return Err(Error::InvalidConfig(
                "theta range must satisfy 0 <= lo < hi <= 1".into(),
            ));
        }
        if self.theta_step <= 0.0 || self.r_min <= 0.0 {
            return Err(Error::InvalidConfig("theta step and r_min must be > 0".into()));
        }
        Ok(())
    }

    /// The sweep grid `lo, lo+step, …` up to and including `hi`.
    pub fn thetas(&self) -> Vec<f64> {
        let n = Float::round((self.theta_hi - self.theta_lo) / self.theta_step) as usize;
        (0..=n).map(|i| self.theta_lo + i as f64 * self.theta_step).collect()
    }
}

// ── Binary-mask utilities ───────────────────────────────────────────

/// Pixels within Euclidean distance `r` of `(cy, cx)`.
pub fn circle_mask(h: usize, w: usize, cy: usize, cx: usize, r: f64) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let r2 = r * r;
    let y0 = (cy as f64 - r).floor().max(0.0) as usize;
    let y1 = ((cy as f64 + r).ceil() as usize).min(h - 1);
    let x0 = (cx as f64 - r).floor().max(0.0) as usize;
    let x1 = ((cx as f64 + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy as f64;
            let dx = x as f64 - cx as f64;
            if dy * dy + dx * dx <= r2 {
                out[y * w + x] = true;
            }
        }
    }
    out
}

/// Centers on the regular lattice (spacing `stride`, row-major) whose circle
/// of radius `r` intersects the OOI mask.
pub fn circle_grid(ooi: &[f32], h: usize, w: usize, r: f64, stride: usize) -> Vec<(usize, usize)> {
    // Distance check against OOI pixels via a bounding-box scan per center.
    let mut centers = Vec::new();
    let r2 = r * r;
    let mut y = 0usize;
    while y < h {
        let mut x = 0usize;
        while x < w {
            let y0 = (y as f64 - r).floor().max(0.0) as usize;
            let y1 = ((y as f64 + r).ceil() as usize).min(h - 1);
            let x0 = (x as f64 - r).floor().max(0.0) as usize;
            let x1 = ((x as f64 + r).ceil() as usize).min(w - 1);
            'scan: for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if ooi[yy * w + xx] == 1.0 {
                        let dy = yy as f64 - y as f64;
                        let dx = xx as f64 - x as f64;
                        if dy * dy + dx * dx <= r2 {
                            centers.push((y, x));
                            break 'scan;
                        }
                    }
                }
            }
            x += stride;
        }
        y += stride;
    }
    centers
}

/// Morphological dilation by a `width x width` square structuring element
/// (separable; width must be odd).
pub fn dilate(mask: &[bool], h: usize, w: usize, width: usize) -> Result<Vec<bool>> {
    if width % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "structuring element width {width} must be odd"
        )));
    }
    let r = width / 2;
    let mut horiz = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            horiz[y * w + x] = (lo..=hi).any(|xx| mask[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x]);
        }
    }
    Ok(out)
}

/// Connected components under 8-connectivity.
pub struct Components {
    /// 0 for background, 1-based component label otherwise.
    pub labels: Vec<u32>,
    /// `areas[k]` is the pixel count of component `k+1`.
    pub areas: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.areas.len()
    }

    pub fn largest_area(&self) -> usize {
        self.areas.iter().copied().max().unwrap_or(0)
    }
}

pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Components {
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        let mut area = 0usize;
        stack.push(start);
        labels[start] = label;
        while let Some(i) = stack.pop() {
            area += 1;
            let (y, x) = (i / w, i % w);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny < 0 || ny >= h as i32 || nx < 0 || nx >= w as i32 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    Components { labels, areas }
}

// ── Candidate machinery ─────────────────────────────────────────────

/// One circular (or dilated-union) candidate with its scores.
#[derive(Debug, Clone)]
pub struct CandidateRegion {
    pub center: (usize, usize),
    pub mask: Vec<bool>,
    pub intensity_diff: f64,
    pub texture_diff: f64,
    pub combined: f64,
}

/// Raw intensity and texture differences between the original slice and one
/// inpainted result, over `region`.
///
/// Intensity: mean absolute difference over region pixels and channels.
/// Texture: mean over extractor levels of the mean absolute feature
/// difference, the region nearest-downsampled to each level; empty levels
/// are skipped.
pub fn score_candidate(
    original: &ImageSlice,
    inpainted: &ImageSlice,
    region: &[bool],
    psi_original: &[Tensor<f32>],
    psi_inpainted: &[Tensor<f32>],
) -> Result<(f64, f64)> {
    let (h, w) = (original.height, original.width);
    let region_size = region.iter().filter(|&&v| v).count();
    if region_size == 0 {
        return Err(Error::Empty("candidate region".into()));
    }
    let mut intensity = 0.0f64;
    for c in 0..original.channels {
        let a = original.channel(c);
        let b = inpainted.channel(c);
        for i in 0..h * w {
            if region[i] {
                intensity += (a[i] as f64 - b[i] as f64).abs();
            }
        }
    }
    intensity /= (region_size * original.channels) as f64;

    let mut level_means = Vec::with_capacity(psi_original.len());
    for (p, (fa, fb)) in psi_original.iter().zip(psi_inpainted).enumerate() {
        let scale = 1usize << (p + 1);
        let (_, fc, fh, fw) = fa.dims4()?;
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y in 0..fh {
            for x in 0..fw {
                let (oy, ox) = (y * scale, x * scale);
                if oy < h && ox < w && region[oy * w + ox] {
                    for c in 0..fc {
                        let idx = (c * fh + y) * fw + x;
                        acc += (fa.data()[idx] as f64 - fb.data()[idx] as f64).abs();
                    }
                    count += fc;
                }
            }
        }
        if count > 0 {
            level_means.push(acc / count as f64);
        }
    }
    let texture = if level_means.is_empty() {
        0.0
    } else {
        level_means.iter().sum::<f64>() / level_means.len() as f64
    };
    Ok((intensity, texture))
}

/// Fill `combined` as the λ-mix of per-slice max-normalized scores.
pub fn normalize_combined(cands: &mut [CandidateRegion], lambda: f64) {
    let max_i = cands.iter().map(|c| c.intensity_diff).fold(0.0, f64::max);
    let max_t = cands.iter().map(|c| c.texture_diff).fold(0.0, f64::max);
    for c in cands.iter_mut() {
        let ni = if max_i > 0.0 { c.intensity_diff / max_i } else { 0.0 };
        let nt = if max_t > 0.0 { c.texture_diff / max_t } else { 0.0 };
        c.combined = lambda * ni + (1.0 - lambda) * nt;
    }
}

/// Keep the `k` highest combined scores; ties broken by row-major center
/// order. Returns everything when fewer than `k` candidates exist.
pub fn select_top(mut cands: Vec<CandidateRegion>, k: usize, width: usize) -> Vec<CandidateRegion> {
    cands.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .expect("finite scores")
            .then_with(|| {
                let ia = a.center.0 * width + a.center.1;
                let ib = b.center.0 * width + b.center.1;
                ia.cmp(&ib)
            })
    });
    cands.truncate(k);
    cands
}

/// Pixelwise OR of candidate masks.
pub fn union_masks(cands: &[CandidateRegion]) -> Result<Vec<bool>> {
    let first = cands
        .first()
        .ok_or_else(|| Error::Empty("union of zero candidates".into()))?;
    let mut out = first.mask.clone();
    for c in &cands[1..] {
        for (o, &m) in out.iter_mut().zip(&c.mask) {
            *o = *o || m;
        }
    }
    Ok(out)
}

/// Index into the mask sequence chosen by the dilation walk: stop at the
/// first step whose relative score increase is below `epsilon` and keep the
/// previous (smaller) mask; otherwise keep growing to the last.
pub fn choose_dilation_index(scores: &[f64], epsilon: f64) -> usize {
    for i in 1..scores.len() {
        let prev = scores[i - 1];
        let rel = if prev > 0.0 {
            (scores[i] - prev) / prev
        } else if scores[i] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if rel < epsilon {
            return i - 1;
        }
    }
    scores.len().saturating_sub(1)
}

// ── Inference plumbing ──────────────────────────────────────────────

/// Composite of `out` over `orig` restricted to `region` (plain buffers).
fn composite_slice(orig: &ImageSlice, out: &[f32], region: &[bool]) -> ImageSlice {
    let mut comp = orig.clone();
    let plane = orig.height * orig.width;
    for c in 0..orig.channels {
        let dst = comp.channel_mut(c);
        for i in 0..plane {
            if region[i] {
                dst[i] = out[c * plane + i];
            }
        }
    }
    comp
}

/// Inpaint one slice under several hole regions in batches; returns the
/// composite for each region.
fn inpaint_regions(
    model: &InpaintModel<f32>,
    slice: &ImageSlice,
    regions: &[Vec<bool>],
) -> Result<Vec<ImageSlice>> {
    const BATCH: usize = 16;
    let (c, h, w) = (slice.channels, slice.height, slice.width);
    let plane = h * w;
    let mut results = Vec::with_capacity(regions.len());
    for chunk in regions.chunks(BATCH) {
        let b = chunk.len();
        let mut img = Vec::with_capacity(b * c * plane);
        let mut msk = Vec::with_capacity(b * plane);
        for region in chunk {
            img.extend_from_slice(&slice.data);
            msk.extend(region.iter().map(|&hole| if hole { 0.0f32 } else { 1.0 }));
        }
        let image_t = Tensor::from_vec(&[b, c, h, w], img)?;
        let mask_t = Tensor::from_vec(&[b, 1, h, w], msk)?;
        let out = model.infer(&image_t, &mask_t)?;
        for (bi, region) in chunk.iter().enumerate() {
            let sample = &out.data()[bi * c * plane..(bi + 1) * c * plane];
            results.push(composite_slice(slice, sample, region));
        }
    }
    Ok(results)
}

/// Mean-over-channels absolute difference.
fn residual_plane(a: &ImageSlice, b: &ImageSlice) -> Vec<f32> {
    let plane = a.height * a.width;
    let mut out = vec![0.0f32; plane];
    for c in 0..a.channels {
        let (pa, pb) = (a.channel(c), b.channel(c));
        for i in 0..plane {
            out[i] += (pa[i] - pb[i]).abs();
        }
    }
    let inv = 1.0 / a.channels as f32;
    for v in &mut out {
        *v *= inv;
    }
    out
}

// ── Per-slice pipeline ──────────────────────────────────────────────

/// Everything observed while processing one slice, for audit output.
#[derive(Debug, Clone)]
pub struct SliceDiagnostics {
    pub slice_index: usize,
    pub candidates: usize,
    /// Combined scores of the selected top candidates.
    pub top_scores: Vec<f64>,
    /// Combined scores across the union + dilation sequence.
    pub dilation_scores: Vec<f64>,
    /// Chosen entry of the mask sequence (0 = union, i = i-th dilation).
    pub chosen_dilation: usize,
    pub gate_passed: bool,
    /// Largest connected-component area of the binarized residual.
    pub largest_cc_area: usize,
}

/// Size gate: binarize the residual at `gate_threshold`, take the largest
/// 8-connected component, and pass iff its equivalent-area radius
/// `sqrt(area/π)` reaches `r_min`.
pub fn size_gate(
    residual: &[f32],
    h: usize,
    w: usize,
    gate_threshold: f64,
    r_min: f64,
) -> (bool, usize) {
    let binary: Vec<bool> = residual.iter().map(|&v| v as f64 > gate_threshold).collect();
    let comps = connected_components(&binary, h, w);
    let largest = comps.largest_area();
    let radius = Float::sqrt(largest as f64 / core::f64::consts::PI);
    (radius >= r_min, largest)
}

/// Run the four pipeline steps on one slice. Returns the output slice (the
/// final inpainted composite, or the input when the gate rejects) plus
/// diagnostics.
pub fn autoinpaint_slice(
    model: &InpaintModel<f32>,
    slice: &ImageSlice,
    ooi: &[f32],
    params: &PipelineParams,
    psi: &FeatureExtractor<f32>,
) -> Result<(ImageSlice, SliceDiagnostics)> {
    params.validate()?;
    let (h, w) = (slice.height, slice.width);
    if ooi.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "OOI plane of {} elements for {h}x{w} slice",
            ooi.len()
        )));
    }
    let pass_through = |index: usize, candidates: usize| SliceDiagnostics {
        slice_index: index,
        candidates,
        top_scores: Vec::new(),
        dilation_scores: Vec::new(),
        chosen_dilation: 0,
        gate_passed: false,
        largest_cc_area: 0,
    };

    let centers = circle_grid(ooi, h, w, params.radius, params.stride);
    if centers.is_empty() {
        return Ok((slice.clone(), pass_through(0, 0)));
    }

    let psi_orig = psi.features(&slice.to_tensor())?;

    // Step II: inpaint every circle independently and score it.
    let regions: Vec<Vec<bool>> = centers
        .iter()
        .map(|&(cy, cx)| circle_mask(h, w, cy, cx, params.radius))
        .collect();
    let inpainted = inpaint_regions(model, slice, &regions)?;
    let mut cands = Vec::with_capacity(centers.len());
    for ((center, region), comp) in centers.iter().zip(regions).zip(&inpainted) {
        let psi_comp = psi.features(&comp.to_tensor())?;
        let (intensity, texture) = score_candidate(slice, comp, &region, &psi_orig, &psi_comp)?;
        cands.push(CandidateRegion {
            center: *center,
            mask: region,
            intensity_diff: intensity,
            texture_diff: texture,
            combined: 0.0,
        });
    }
    normalize_combined(&mut cands, params.lambda);

    // Step III: top-K union, then incremental dilation.
    let top = select_top(cands, params.top_k, w);
    let top_scores: Vec<f64> = top.iter().map(|c| c.combined).collect();
    let union = union_masks(&top)?;
    let mut masks = vec![union.clone()];
    for &width in &params.dilation_widths {
        masks.push(dilate(&union, h, w, width)?);
    }
    let dilated_results = inpaint_regions(model, slice, &masks)?;
    let mut dil_cands = Vec::with_capacity(masks.len());
    for (mask, comp) in masks.iter().zip(&dilated_results) {
        let psi_comp = psi.features(&comp.to_tensor())?;
        let (intensity, texture) = score_candidate(slice, comp, mask, &psi_orig, &psi_comp)?;
        dil_cands.push(CandidateRegion {
            center: (0, 0),
            mask: mask.clone(),
            intensity_diff: intensity,
            texture_diff: texture,
            combined: 0.0,
        });
    }
    normalize_combined(&mut dil_cands, params.lambda);
    let dilation_scores: Vec<f64> = dil_cands.iter().map(|c| c.combined).collect();
    let chosen = choose_dilation_index(&dilation_scores, params.epsilon);
    let final_slice = dilated_results[chosen].clone();

    // Step IV: size gate on the residual.
    let residual = residual_plane(slice, &final_slice);
    let (passed, largest) = size_gate(&residual, h, w, params.gate_threshold, params.r_min);

    let diags = SliceDiagnostics {
        slice_index: 0,
        candidates: centers.len(),
        top_scores,
        dilation_scores,
        chosen_dilation: chosen,
        gate_passed: passed,
        largest_cc_area: largest,
    };
    if passed {
        Ok((final_slice, diags))
    } else {
        Ok((slice.clone(), diags))
    }
}

// ── Volume pipeline ─────────────────────────────────────────────────

/// Stacked per-slice residuals with the per-slice gate decisions.
#[derive(Debug, Clone)]
pub struct ResidualVolume {
    /// `(slices, 1, H, W)` mean-channel absolute differences in [0,1].
    pub residual: Volume,
    /// True where the slice was inpainted (gate passed).
    pub inpainted: Vec<bool>,
    pub subject: u64,
}

pub struct AutoinpaintOutput {
    pub output: Volume,
    pub residual: ResidualVolume,
    pub diagnostics: Vec<SliceDiagnostics>,
}

/// Assemble per-slice results (already in slice order) into volumes.
pub fn assemble_outputs(
    input: &Volume,
    subject: u64,
    slices: Vec<(ImageSlice, SliceDiagnostics)>,
) -> Result<AutoinpaintOutput> {
    let mut output = Volume::zeros(input.slices, input.channels, input.height, input.width);
    let mut residual = Volume::zeros(input.slices, 1, input.height, input.width);
    let mut flags = Vec::with_capacity(input.slices);
    let mut diagnostics = Vec::with_capacity(input.slices);
    for (i, (out_slice, mut diag)) in slices.into_iter().enumerate() {
        diag.slice_index = i;
        output.slice_data_mut(i).copy_from_slice(&out_slice.data);
        let res = residual_plane(&input.get_slice(i), &out_slice);
        residual.slice_data_mut(i).copy_from_slice(&res);
        flags.push(diag.gate_passed);
        diagnostics.push(diag);
    }
    Ok(AutoinpaintOutput {
        output,
        residual: ResidualVolume {
            residual,
            inpainted: flags,
            subject,
        },
        diagnostics,
    })
}

/// Sequential per-slice autoinpainting of a volume.
pub fn autoinpaint_volume(
    model: &InpaintModel<f32>,
    volume: &Volume,
    ooi: &Volume,
    params: &PipelineParams,
    psi: &FeatureExtractor<f32>,
    subject: u64,
) -> Result<AutoinpaintOutput> {
    if (ooi.slices, ooi.height, ooi.width) != (volume.slices, volume.height, volume.width)
        || ooi.channels != 1
    {
        return Err(Error::ShapeMismatch(format!(
            "OOI volume {}x{}x{}x{} does not match image volume",
            ooi.slices, ooi.channels, ooi.height, ooi.width
        )));
    }
    ooi.validate_binary()?;
    let results: Vec<(ImageSlice, SliceDiagnostics)> = (0..volume.slices)
        .map(|i| autoinpaint_slice(model, &volume.get_slice(i), ooi.slice_data(i), params, psi))
        .collect::<Result<_>>()?;
    assemble_outputs(volume, subject, results)
}

// ── Threshold sweep ─────────────────────────────────────────────────

/// Segmentation quality of one subject at one threshold.
#[derive(Debug, Clone, Copy)]
pub struct ThetaMetrics {
    pub theta: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Per-subject sweep outcome: the subject-best threshold (bracketed metrics)
/// and the metrics at the cohort's fixed threshold.
#[derive(Debug, Clone)]
pub struct SubjectSweep {
    pub subject: u64,
    pub best: ThetaMetrics,
    pub at_global: ThetaMetrics,
    /// Dice at every grid threshold, in grid order.
    pub dice_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub thetas: Vec<f64>,
    pub per_subject: Vec<SubjectSweep>,
    /// The single threshold maximizing mean Dice across subjects.
    pub global_theta: f64,
    pub mean_best_dice: f64,
    pub mean_global_dice: f64,
}

fn metrics_at(residual: &Volume, gt: &Volume, theta: f64) -> Result<(f64, f64, f64)> {
    let pred: Vec<f32> = residual
        .data
        .iter()
        .map(|&v| if v as f64 > theta { 1.0 } else { 0.0 })
        .collect();
    let c = ConfusionCounts::from_masks(&pred, &gt.data)?;
    Ok((c.dice(), c.precision().0, c.recall().0))
}

/// Sweep binarization thresholds over residual volumes: per-subject best
/// ("bracketed") metrics at each subject's best-Dice threshold, and fixed
/// metrics at the single threshold that maximizes mean Dice cohort-wide.
pub fn threshold_sweep(
    residuals: &[ResidualVolume],
    ground_truth: &[&Volume],
    params: &PipelineParams,
) -> Result<SweepReport> {
    if residuals.is_empty() || residuals.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} residual volumes vs {} ground-truth volumes",
            residuals.len(),
            ground_truth.len()
        )));
    }
    let thetas = params.thetas();
    let mut all: Vec<Vec<ThetaMetrics>> = Vec::with_capacity(residuals.len());
    for (rv, gt) in residuals.iter().zip(ground_truth) {
        if (rv.residual.slices, rv.residual.height, rv.residual.width)
            != (gt.slices, gt.height, gt.width)
        {
            return Err(Error::ShapeMismatch(
                "residual/ground-truth volume shapes differ".into(),
            ));
        }
        gt.validate_binary()?;
        let per_theta = thetas
            .iter()
            .map(|&theta| {
                let (dice, precision, recall) = metrics_at(&rv.residual, gt, theta)?;
                Ok(ThetaMetrics {
                    theta,
                    dice,
                    precision,
                    recall,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        all.push(per_theta);
    }

    // Fixed threshold: maximize mean Dice (ties resolve to the smaller θ).
    let mut global_idx = 0usize;
    let mut best_mean = f64::NEG_INFINITY;
    for ti in 0..thetas.len() {
        let mean = all.iter().map(|m| m[ti].dice).sum::<f64>() / all.len() as f64;
        if mean > best_mean {
            best_mean = mean;
            global_idx = ti;
        }
    }

    let mut per_subject = Vec::with_capacity(residuals.len());
    for (rv, per_theta) in residuals.iter().zip(&all) {
        let mut best_i = 0usize;
        for (i, m) in per_theta.iter().enumerate() {
            if m.dice > per_theta[best_i].dice {
                best_i = i;
            }
        }
        per_subject.push(SubjectSweep {
            subject: rv.subject,
            best: per_theta[best_i],
            at_global: per_theta[global_idx],
            dice_curve: per_theta.iter().map(|m| m.dice).collect(),
        });
    }
    let mean_best_dice =
        per_subject.iter().map(|s| s.best.dice).sum::<f64>() / per_subject.len() as f64;

    Ok(SweepReport {
        thetas: thetas.clone(),
        per_subject,
        global_theta: thetas[global_idx],
        mean_best_dice,
        mean_global_dice: best_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_clamps_and_rescales() {
        let lung = ingest_preprocess(&[-1000.0, 500.0, -250.0], Modality::CtLung);
        assert_eq!(lung[0], 0.0);
        assert_eq!(lung[1], 1.0);
        assert!((lung[2] - 0.5).abs() < 1e-6);
        let pet = ingest_preprocess(&[6.0], Modality::Pet);
        assert!((pet[0] - 0.5).abs() < 1e-6);
        // Values beyond the clamp range saturate.
        let hn = ingest_preprocess(&[400.0], Modality::CtHeadNeck);
        assert_eq!(hn[0], 1.0);
    }

    #[test]
    fn circle_grid_on_empty_and_full_ooi() {
        let empty = vec![0.0f32; 60 * 60];
        assert!(circle_grid(&empty, 60, 60, 15.0, 8).is_empty());

        let full = vec![1.0f32; 60 * 60];
        let centers = circle_grid(&full, 60, 60, 15.0, 8);
        // Enumeration oracle: every lattice point (spacing 8) lies inside the
        // OOI, so its circle trivially meets it.
        let mut expected = 0;
        let mut y = 0;
        while y < 60 {
            let mut x = 0;
            while x < 60 {
                expected += 1;
                x += 8;
            }
            y += 8;
        }
        assert_eq!(centers.len(), expected);
        assert_eq!(expected, 64);
        // Deterministic row-major order.
        let mut sorted = centers.clone();
        sorted.sort_by_key(|&(y, x)| (y, x));
        assert_eq!(centers, sorted);
    }

    #[test]
    fn paper_parameters_are_expressible() {
        let lung = PipelineParams::paper_lung();
        assert_eq!((lung.radius, lung.stride, lung.r_min), (27.0, 15, 7.0));
        assert_eq!(lung.dilation_widths, vec![7, 9, 11, 13, 15]);
        assert_eq!(lung.top_k, 3);
        lung.validate().unwrap();
        let hn = PipelineParams::paper_head_neck();
        assert_eq!((hn.radius, hn.stride, hn.r_min), (15.0, 8, 4.0));
        assert_eq!(lung.thetas().len(), 41);
    }

    #[test]
    fn dilate_examples() {
        let mut m = vec![false; 25];
        m[12] = true; // center of 5x5
        let d3 = dilate(&m, 5, 5, 3).unwrap();
        let count = d3.iter().filter(|&&v| v).count();
        assert_eq!(count, 9);
        let d1 = dilate(&m, 5, 5, 1).unwrap();
        assert_eq!(d1, m);
        assert!(dilate(&m, 5, 5, 4).is_err());
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let mut m = vec![false; 16];
        m[0] = true;
        m[5] = true; // (1,1): diagonal neighbor of (0,0)
        let c = connected_components(&m, 4, 4);
        assert_eq!(c.count(), 1);
        assert_eq!(c.largest_area(), 2);
    }

    #[test]
    fn select_top_breaks_ties_row_major() {
        let mk = |cy: usize, cx: usize, s: f64| CandidateRegion {
            center: (cy, cx),
            mask: vec![true],
            intensity_diff: 0.0,
            texture_diff: 0.0,
            combined: s,
        };
        let picked = select_top(
            vec![mk(3, 0, 0.5), mk(0, 1, 0.5), mk(0, 0, 0.4)],
            2,
            8,
        );
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].center, (0, 1));
        assert_eq!(picked[1].center, (3, 0));
        // Fewer candidates than K returns all.
        let few = select_top(vec![mk(0, 0, 0.1)], 3, 8);
        assert_eq!(few.len(), 1);
    }

    #[test]
    fn union_merges_overlaps_and_keeps_disjoint_components() {
        let c1 = CandidateRegion {
            center: (4, 4),
            mask: circle_mask(16, 16, 4, 4, 2.5),
            intensity_diff: 0.0,
            texture_diff: 0.0,
            combined: 0.0,
        };
        let c2 = CandidateRegion {
            center: (4, 6),
            mask: circle_mask(16, 16, 4, 6, 2.5),
            intensity_diff: 0.0,
            texture_diff: 0.0,
            combined: 0.0,
        };
        let c3 = CandidateRegion {
            center: (12, 12),
            mask: circle_mask(16, 16, 12, 12, 2.0),
            intensity_diff: 0.0,
            texture_diff: 0.0,
            combined: 0.0,
        };
        let single = union_masks(&[c1.clone()]).unwrap();
        assert_eq!(single, c1.mask);
        let overlapping = union_masks(&[c1.clone(), c2]).unwrap();
        assert_eq!(connected_components(&overlapping, 16, 16).count(), 1);
        let disjoint = union_masks(&[c1, c3]).unwrap();
        assert_eq!(connected_components(&disjoint, 16, 16).count(), 2);
        // Union is idempotent.
        let c = CandidateRegion {
            center: (0, 0),
            mask: disjoint.clone(),
            intensity_diff: 0.0,
            texture_diff: 0.0,
            combined: 0.0,
        };
        assert_eq!(union_masks(&[c]).unwrap(), disjoint);
    }

    #[test]
    fn dilation_walk_rules() {
        // All equal: no change at the first step, keep the union.
        assert_eq!(choose_dilation_index(&[0.5; 6], 0.05), 0);
        // Strictly increasing by more than epsilon: keep the largest.
        assert_eq!(
            choose_dilation_index(&[0.1, 0.2, 0.4, 0.8, 1.6, 3.2], 0.05),
            5
        );
        // Growth stalls midway.
        assert_eq!(
            choose_dilation_index(&[0.1, 0.2, 0.21, 0.8, 1.6, 3.2], 0.05),
            1
        );
    }

    #[test]
    fn size_gate_equivalent_radius_arithmetic() {
        // 10x20 rectangle = 200 px: sqrt(200/π) ≈ 7.98 ≥ 7 passes.
        let mut residual = vec![0.0f32; 64 * 64];
        for y in 0..10 {
            for x in 0..20 {
                residual[y * 64 + x] = 0.5;
            }
        }
        let (pass, area) = size_gate(&residual, 64, 64, 0.1, 7.0);
        assert!(pass);
        assert_eq!(area, 200);
        // 10x10 = 100 px: sqrt(100/π) ≈ 5.64 < 7 fails.
        let mut small = vec![0.0f32; 64 * 64];
        for y in 0..10 {
            for x in 0..10 {
                small[y * 64 + x] = 0.5;
            }
        }
        let (pass, area) = size_gate(&small, 64, 64, 0.1, 7.0);
        assert!(!pass);
        assert_eq!(area, 100);
        // Empty residual fails.
        let (pass, area) = size_gate(&vec![0.0f32; 64 * 64], 64, 64, 0.1, 7.0);
        assert!(!pass);
        assert_eq!(area, 0);
    }

    #[test]
    fn sweep_on_scaled_ground_truth_is_perfect_below_half() {
        // residual = 0.5 * gt: every θ < 0.5 binarizes back to gt.
        let mut gt = Volume::zeros(2, 1, 8, 8);
        for i in 0..16 {
            gt.data[i * 3 % gt.data.len()] = 1.0;
        }
        let mut residual = gt.clone();
        for v in &mut residual.data {
            *v *= 0.5;
        }
        let rv = ResidualVolume {
            residual,
            inpainted: vec![true, true],
            subject: 7,
        };
        let params = PipelineParams::paper_lung();
        let report = threshold_sweep(&[rv], &[&gt], &params).unwrap();
        assert_eq!(report.thetas.len(), 41);
        assert_eq!(report.per_subject[0].best.dice, 1.0);
        assert!(report.global_theta < 0.5);
        assert_eq!(report.mean_best_dice, 1.0);
    }

    #[test]
    fn bracketed_metrics_dominate_fixed_threshold() {
        // Random residuals/truths: per-subject max over θ is at least the
        // value at any shared θ.
        let mut rng = crate::rng::root(55);
        use rand::Rng;
        let mut residuals = Vec::new();
        let mut gts = Vec::new();
        for s in 0..4u64 {
            let mut res = Volume::zeros(1, 1, 8, 8);
            let mut gt = Volume::zeros(1, 1, 8, 8);
            for i in 0..64 {
                res.data[i] = rng.gen_range(0.0..1.0);
                gt.data[i] = if rng.gen_range(0.0..1.0) > 0.7 { 1.0 } else { 0.0 };
            }
            residuals.push(ResidualVolume {
                residual: res,
                inpainted: vec![true],
                subject: s,
            });
            gts.push(gt);
        }
        let gt_refs: Vec<&Volume> = gts.iter().collect();
        let report = threshold_sweep(&residuals, &gt_refs, &PipelineParams::paper_lung()).unwrap();
        for s in &report.per_subject {
            assert!(s.best.dice >= s.at_global.dice - 1e-12);
        }
        assert!(report.mean_best_dice >= report.mean_global_dice - 1e-12);
    }

    #[test]
    fn binarized_area_monotone_in_theta() {
        let mut rng = crate::rng::root(56);
        use rand::Rng;
        let res: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut prev = usize::MAX;
        for i in 0..=40 {
            let theta = 0.02 * i as f64;
            let area = res.iter().filter(|&&v| v as f64 > theta).count();
            assert!(area <= prev);
            prev = area;
        }
    }
}
