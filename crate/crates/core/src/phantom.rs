//! Irregular training holes and a deterministic synthetic phantom.
//!
//! The phantom stands in for real PET-CT cohorts at desk scale: each subject
//! is a seeded composition of a dark background, an elliptical body, two
//! low-intensity lungs (whose dilation forms the organ-of-interest mask),
//! rib-like arcs and smooth per-subject texture. The optional second channel
//! is PET-like: near-zero background with scripted hot regions only — the
//! tumor(s) and one fixed decoy hot spot outside the lungs, so hyperintensity
//! alone cannot identify disease.
//!
//! Everything is a pure function of `(seed, slice index)`.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::volume::{ImageSlice, Volume};
use crate::{Error, Result};

// ── Rasterization helpers ───────────────────────────────────────────

fn fill_ellipse(mask: &mut [bool], h: usize, w: usize, cy: f64, cx: f64, ay: f64, ax: f64, rot: f64) {
    let (sin, cos) = (Float::sin(rot), Float::cos(rot));
    let extent = ay.max(ax) + 1.0;
    let y0 = ((cy - extent).floor().max(0.0)) as usize;
    let y1 = ((cy + extent).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - extent).floor().max(0.0)) as usize;
    let x1 = ((cx + extent).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / ax) * (u / ax) + (v / ay) * (v / ay) <= 1.0 {
                mask[y * w + x] = true;
            }
        }
    }
}

fn fill_circle(mask: &mut [bool], h: usize, w: usize, cy: f64, cx: f64, r: f64) {
    fill_ellipse(mask, h, w, cy, cx, r, r, 0.0);
}

/// Thick segment with round caps: all pixels within `thickness/2` of the
/// segment.
fn fill_line(
    mask: &mut [bool],
    h: usize,
    w: usize,
    y0: f64,
    x0: f64,
    y1: f64,
    x1: f64,
    thickness: f64,
) {
    let r = thickness / 2.0;
    let lo_y = (y0.min(y1) - r).floor().max(0.0) as usize;
    let hi_y = (y0.max(y1) + r).ceil().min(h as f64 - 1.0) as usize;
    let lo_x = (x0.min(x1) - r).floor().max(0.0) as usize;
    let hi_x = (x0.max(x1) + r).ceil().min(w as f64 - 1.0) as usize;
    let (vy, vx) = (y1 - y0, x1 - x0);
    let len2 = vy * vy + vx * vx;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (py, px) = (y as f64 - y0, x as f64 - x0);
            let t = if len2 > 0.0 {
                ((py * vy + px * vx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (dy, dx) = (py - t * vy, px - t * vx);
            if dy * dy + dx * dx <= r * r {
                mask[y * w + x] = true;
            }
        }
    }
}

// ── Hole generation ─────────────────────────────────────────────────

/// Recipe for irregular training holes built from circles, ellipses and
/// thick lines. Sizes are in pixels; `seed` is the base stream every mask
/// index derives from.
#[derive(Debug, Clone)]
pub struct HoleSpec {
    /// Target hole coverage band as a fraction of image area.
    pub coverage: (f64, f64),
    /// Relative draw weights for circle / ellipse / line primitives.
    pub mix: (f64, f64, f64),
    pub circle_radius: (f64, f64),
    pub ellipse_axes: (f64, f64),
    pub line_length: (f64, f64),
    pub line_thickness: (f64, f64),
    pub seed: u64,
}

impl HoleSpec {
    /// Defaults scaled to a square image of extent `size`, covering 25-30%.
    pub fn for_size(size: usize, seed: u64) -> Self {
        let s = size as f64;
        HoleSpec {
            coverage: (0.25, 0.30),
            mix: (1.0, 1.0, 1.0),
            circle_radius: (0.05 * s, 0.14 * s),
            ellipse_axes: (0.04 * s, 0.16 * s),
            line_length: (0.15 * s, 0.55 * s),
            line_thickness: (0.03 * s, 0.08 * s),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.coverage;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::InvalidConfig(
                "hole coverage band must satisfy 0 < lo < hi < 1".into(),
            ));
        }
        Ok(())
    }
}

fn draw_primitive(spec: &HoleSpec, rng: &mut ChaCha8Rng, scratch: &mut [bool], h: usize, w: usize, shrink: f64) {
    let total = spec.mix.0 + spec.mix.1 + spec.mix.2;
    let pick = rng.gen_range(0.0..total);
    let cy = rng.gen_range(0.0..h as f64);
    let cx = rng.gen_range(0.0..w as f64);
    let range = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        let v = rng.gen_range(lo..hi) * shrink;
        v.max(0.6)
    };
    if pick < spec.mix.0 {
        let r = range(spec.circle_radius.0, spec.circle_radius.1, rng);
        fill_circle(scratch, h, w, cy, cx, r);
    } else if pick < spec.mix.0 + spec.mix.1 {
        let ay = range(spec.ellipse_axes.0, spec.ellipse_axes.1, rng);
        let ax = range(spec.ellipse_axes.0, spec.ellipse_axes.1, rng);
        let rot = rng.gen_range(0.0..core::f64::consts::PI);
        fill_ellipse(scratch, h, w, cy, cx, ay, ax, rot);
    } else {
        let len = range(spec.line_length.0, spec.line_length.1, rng);
        let th = range(spec.line_thickness.0, spec.line_thickness.1, rng);
        let angle = rng.gen_range(0.0..core::f64::consts::PI);
        let (dy, dx) = (Float::sin(angle) * len / 2.0, Float::cos(angle) * len / 2.0);
        fill_line(scratch, h, w, cy - dy, cx - dx, cy + dy, cx + dx, th);
    }
}

/// Generate the `index`-th hole mask of the spec's stream: 1 marks valid
/// pixels, 0 marks holes. Every generated mask's coverage lies inside the
/// spec's band (so any batch mean does too).
pub fn generate_hole_mask(spec: &HoleSpec, h: usize, w: usize, index: u64) -> Result<Vec<f32>> {
    spec.validate()?;
    let (lo, hi) = spec.coverage;
    let total = h * w;
    const ATTEMPTS: usize = 32;
    for attempt in 0..ATTEMPTS {
        let mut r = rng::stream(spec.seed, 0x401e ^ attempt as u64, index);
        let mut holes = vec![false; total];
        let mut count = 0usize;
        let target = r.gen_range(lo + 0.02 * (hi - lo)..hi - 0.02 * (hi - lo));
        let budget = (hi * total as f64).floor() as usize;
        let mut stalled = 0usize;
        while (count as f64) < target * total as f64 && stalled < 24 {
            // Shrink primitives as the remaining budget tightens.
            let remaining = budget.saturating_sub(count);
            let shrink = ((remaining as f64 / total as f64) / (hi - lo)).min(1.0).max(0.05);
            let mut scratch = holes.clone();
            draw_primitive(spec, &mut r, &mut scratch, h, w, shrink);
            let new_count = scratch.iter().filter(|&&v| v).count();
            if new_count <= budget {
                if new_count == count {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                holes = scratch;
                count = new_count;
            } else {
                stalled += 1;
            }
        }
        let coverage = count as f64 / total as f64;
        if coverage >= lo && coverage <= hi {
            return Ok(holes.iter().map(|&hole| if hole { 0.0 } else { 1.0 }).collect());
        }
    }
    Err(Error::CoverageUnreachable {
        lo,
        hi,
        attempts: ATTEMPTS,
    })
}

// ── Phantom ─────────────────────────────────────────────────────────

/// Geometry of the synthetic anatomy; extents in pixels.
#[derive(Debug, Clone, Copy)]
pub struct PhantomConfig {
    pub size: usize,
    pub channels: usize,
}

impl PhantomConfig {
    pub fn new(size: usize, channels: usize) -> Result<Self> {
        if channels == 0 || channels > 2 {
            return Err(Error::InvalidConfig("phantom channels must be 1 or 2".into()));
        }
        if size < 16 {
            return Err(Error::InvalidConfig("phantom size must be >= 16".into()));
        }
        Ok(PhantomConfig { size, channels })
    }
}

/// One synthetic slice: image in [0,1], organ-of-interest mask, and the
/// tumor ground truth when present.
#[derive(Debug, Clone)]
pub struct PhantomSlice {
    pub image: ImageSlice,
    /// Binary OOI plane (height*width).
    pub ooi: Vec<f32>,
    /// Binary tumor ground truth, present only for tumoral slices.
    pub tumor: Option<Vec<f32>>,
    pub subject_seed: u64,
    pub slice_index: usize,
}

struct SubjectParams {
    body_c: (f64, f64),
    body_a: (f64, f64),
    lung_c: [(f64, f64); 2],
    lung_a: (f64, f64),
    lung_phase: f64,
    body_val: f64,
    lung_val: f64,
    rib_val: f64,
    texture: Vec<f64>,
}

const TEXTURE_GRID: usize = 8;

fn subject_params(cfg: &PhantomConfig, subject_seed: u64) -> SubjectParams {
    let s = cfg.size as f64;
    let mut r = rng::stream(subject_seed, 0x5b1e, 0);
    let jitter = |r: &mut ChaCha8Rng, base: f64, spread: f64| base + r.gen_range(-spread..spread);
    SubjectParams {
        body_c: (jitter(&mut r, 0.52 * s, 0.015 * s), jitter(&mut r, 0.50 * s, 0.015 * s)),
        body_a: (jitter(&mut r, 0.36 * s, 0.015 * s), jitter(&mut r, 0.42 * s, 0.015 * s)),
        lung_c: [
            (jitter(&mut r, 0.48 * s, 0.015 * s), jitter(&mut r, 0.32 * s, 0.015 * s)),
            (jitter(&mut r, 0.48 * s, 0.015 * s), jitter(&mut r, 0.68 * s, 0.015 * s)),
        ],
        lung_a: (jitter(&mut r, 0.19 * s, 0.015 * s), jitter(&mut r, 0.125 * s, 0.01 * s)),
        lung_phase: r.gen_range(0.0..core::f64::consts::TAU),
        body_val: jitter(&mut r, 0.35, 0.03),
        lung_val: jitter(&mut r, 0.14, 0.02),
        rib_val: jitter(&mut r, 0.55, 0.04),
        texture: (0..TEXTURE_GRID * TEXTURE_GRID)
            .map(|_| r.gen_range(-1.0..1.0))
            .collect(),
    }
}

/// Bilinear sample of the subject's coarse texture grid.
fn texture_at(p: &SubjectParams, size: usize, y: usize, x: usize) -> f64 {
    let g = TEXTURE_GRID as f64 - 1.0;
    let fy = y as f64 / size as f64 * g;
    let fx = x as f64 / size as f64 * g;
    let (iy, ix) = (fy as usize, fx as usize);
    let (ty, tx) = (fy - iy as f64, fx - ix as f64);
    let at = |yy: usize, xx: usize| p.texture[yy.min(TEXTURE_GRID - 1) * TEXTURE_GRID + xx.min(TEXTURE_GRID - 1)];
    at(iy, ix) * (1.0 - ty) * (1.0 - tx)
        + at(iy, ix + 1) * (1.0 - ty) * tx
        + at(iy + 1, ix) * ty * (1.0 - tx)
        + at(iy + 1, ix + 1) * ty * tx
}

fn inside(c: (f64, f64), a: (f64, f64), y: f64, x: f64) -> f64 {
    let dy = (y - c.0) / a.0;
    let dx = (x - c.1) / a.1;
    dy * dy + dx * dx
}

/// Lung scale for a slice: a smooth per-slice modulation so neighboring
/// slices differ but stay anatomically similar.
fn lung_scale(p: &SubjectParams, slice_index: usize) -> f64 {
    0.92 + 0.08 * Float::sin(0.35 * slice_index as f64 + p.lung_phase)
}

/// Deterministic healthy slice; the OOI mask is the dilated union of the two
/// lung ellipses.
pub fn generate_healthy_slice(
    cfg: &PhantomConfig,
    subject_seed: u64,
    slice_index: usize,
) -> PhantomSlice {
    let size = cfg.size;
    let p = subject_params(cfg, subject_seed);
    let scale = lung_scale(&p, slice_index);
    let lung_a = (p.lung_a.0 * scale, p.lung_a.1 * scale);

    let mut image = ImageSlice::zeros(cfg.channels, size, size);
    let mut lung_mask = vec![false; size * size];
    for (cy, cx) in p.lung_c {
        fill_ellipse(&mut lung_mask, size, size, cy, cx, lung_a.0, lung_a.1, 0.0);
    }

    // Channel 1: CT-like anatomy.
    {
        let plane = image.channel_mut(0);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                let mut v = 0.04;
                let body_d = inside(p.body_c, p.body_a, fy, fx);
                if body_d <= 1.0 {
                    v = p.body_val;
                    // Rib band: a thin bright rim just inside the body.
                    if body_d > 0.80 && body_d <= 0.92 {
                        v = p.rib_val;
                    }
                    if lung_mask[y * size + x] {
                        v = p.lung_val;
                    }
                    v += 0.03 * texture_at(&p, size, y, x);
                }
                plane[y * size + x] = (v.clamp(0.0, 1.0)) as f32;
            }
        }
    }

    // Channel 2: PET-like uptake with a fixed decoy hot spot between the
    // lungs (healthy hypermetabolic tissue).
    if cfg.channels == 2 {
        let s = size as f64;
        let decoy_c = (0.64 * s, 0.50 * s);
        let decoy_a = (0.055 * s, 0.04 * s);
        let plane = image.channel_mut(1);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64, x as f64);
                let mut v = 0.015;
                if inside(p.body_c, p.body_a, fy, fx) <= 1.0 {
                    v = 0.05 + 0.01 * texture_at(&p, size, y, x);
                }
                let d = inside(decoy_c, decoy_a, fy, fx);
                if d <= 1.0 {
                    // Soft-edged hot spot.
                    v = v.max(0.55 * (1.0 - d * d * 0.3));
                }
                plane[y * size + x] = (v.clamp(0.0, 1.0)) as f32;
            }
        }
    }

    // OOI: lungs dilated by 2 px (Chebyshev).
    let mut ooi = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            if lung_mask[y * size + x] {
                for dy in -2i32..=2 {
                    for dx in -2i32..=2 {
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if ny >= 0 && ny < size as i32 && nx >= 0 && nx < size as i32 {
                            ooi[ny as usize * size + nx as usize] = 1.0;
                        }
                    }
                }
            }
        }
    }

    PhantomSlice {
        image,
        ooi,
        tumor: None,
        subject_seed,
        slice_index,
    }
}

/// Tumor recipe: blob count, radius band (pixels), and per-channel contrast
/// added to the healthy background.
#[derive(Debug, Clone, Copy)]
pub struct TumorSpec {
    pub blobs: (usize, usize),
    pub radius: (f64, f64),
    pub contrast_ct: f64,
    pub contrast_pet: f64,
}

impl TumorSpec {
    pub fn for_size(size: usize) -> Self {
        let s = size as f64;
        TumorSpec {
            blobs: (1, 1),
            radius: (0.07 * s, 0.10 * s),
            contrast_ct: 0.40,
            contrast_pet: 0.65,
        }
    }
}

/// Healthy slice plus irregular bright blob(s) inside the OOI on all
/// channels (stronger on the PET-like channel), with the blob support as
/// ground truth. Blob boundaries get a 1-px Gaussian falloff.
pub fn generate_tumoral_slice(
    cfg: &PhantomConfig,
    subject_seed: u64,
    slice_index: usize,
    spec: &TumorSpec,
) -> Result<PhantomSlice> {
    let mut slice = generate_healthy_slice(cfg, subject_seed, slice_index);
    let size = cfg.size;
    let p = subject_params(cfg, subject_seed);
    let scale = lung_scale(&p, slice_index);
    let lung_a = (p.lung_a.0 * scale, p.lung_a.1 * scale);

    let mut r = rng::stream(subject_seed, 0x7u64, slice_index as u64);
    let n_blobs = if spec.blobs.0 == spec.blobs.1 {
        spec.blobs.0
    } else {
        r.gen_range(spec.blobs.0..=spec.blobs.1)
    };
    if n_blobs == 0 {
        return Err(Error::InvalidConfig("tumor spec with zero blobs".into()));
    }

    let mut gt = vec![0.0f32; size * size];
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..n_blobs {
        let mut ok = false;
        for _try in 0..64 {
            let lung = p.lung_c[r.gen_range(0..2usize)];
            let radius = r.gen_range(spec.radius.0..=spec.radius.1);
            // Keep the blob comfortably inside the lung ellipse.
            let margin_y = (lung_a.0 - radius - 1.0).max(0.0);
            let margin_x = (lung_a.1 - radius - 1.0).max(0.0);
            if margin_y == 0.0 || margin_x == 0.0 {
                continue;
            }
            let u: f64 = r.gen_range(0.0..1.0);
            let ang = r.gen_range(0.0..core::f64::consts::TAU);
            let cy = lung.0 + Float::sin(ang) * margin_y * Float::sqrt(u) * 0.8;
            let cx = lung.1 + Float::cos(ang) * margin_x * Float::sqrt(u) * 0.8;
            // Blob separation keeps connected components distinct.
            if placed
                .iter()
                .any(|&(py, px, pr)| {
                    let d = Float::sqrt((py - cy) * (py - cy) + (px - cx) * (px - cx));
                    d < pr + radius + 4.0
                })
            {
                continue;
            }
            // Irregular boundary: radial wobble with two harmonics.
            let a2 = r.gen_range(0.0..0.10);
            let a3 = r.gen_range(0.0..0.08);
            let ph2 = r.gen_range(0.0..core::f64::consts::TAU);
            let ph3 = r.gen_range(0.0..core::f64::consts::TAU);
            let boundary = |phi: f64| radius * (1.0 + a2 * Float::sin(2.0 * phi + ph2) + a3 * Float::sin(3.0 * phi + ph3));

            // Verify the support fits inside the OOI before painting.
            let extent = radius * 1.25 + 2.0;
            let mut support: Vec<usize> = Vec::new();
            let mut fits = true;
            let y0 = ((cy - extent).floor().max(0.0)) as usize;
            let y1 = ((cy + extent).ceil().min(size as f64 - 1.0)) as usize;
            let x0 = ((cx - extent).floor().max(0.0)) as usize;
            let x1 = ((cx + extent).ceil().min(size as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let d = Float::sqrt(dy * dy + dx * dx);
                    let phi = Float::atan2(dy, dx);
                    if d <= boundary(phi) {
                        if slice.ooi[y * size + x] == 0.0 {
                            fits = false;
                        }
                        support.push(y * size + x);
                    }
                }
            }
            if !fits || support.is_empty() {
                continue;
            }

            for &idx in &support {
                gt[idx] = 1.0;
            }
            // Paint intensity with 1-px Gaussian falloff beyond the support.
            for y in y0.saturating_sub(2)..=(y1 + 2).min(size - 1) {
                for x in x0.saturating_sub(2)..=(x1 + 2).min(size - 1) {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let d = Float::sqrt(dy * dy + dx * dx);
                    let phi = Float::atan2(dy, dx);
                    let over = d - boundary(phi);
                    let fall = if over <= 0.0 {
                        1.0
                    } else {
                        Float::exp(-over * over / 2.0)
                    };
                    if fall > 1e-3 {
                        let i = y * size + x;
                        let ct = slice.image.channel_mut(0);
                        ct[i] = ((ct[i] as f64 + spec.contrast_ct * fall).clamp(0.0, 1.0)) as f32;
                        if cfg.channels == 2 {
                            let pet = slice.image.channel_mut(1);
                            pet[i] =
                                ((pet[i] as f64 + spec.contrast_pet * fall).clamp(0.0, 1.0)) as f32;
                        }
                    }
                }
            }
            placed.push((cy, cx, radius));
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::BlobOutsideOoi);
        }
    }

    slice.tumor = Some(gt);
    Ok(slice)
}

/// A subject's slices stacked into aligned image/OOI/ground-truth volumes
/// (ground truth all-zero for healthy slices).
pub struct PhantomVolume {
    pub images: Volume,
    pub ooi: Volume,
    pub ground_truth: Volume,
    pub subject_seed: u64,
}

/// Stack slices of one subject in order.
pub fn assemble_volume(slices: &[PhantomSlice]) -> Result<PhantomVolume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Empty("assemble_volume of zero slices".into()))?;
    if slices.iter().any(|s| s.subject_seed != first.subject_seed) {
        return Err(Error::InvalidConfig(
            "assemble_volume: slices from different subjects".into(),
        ));
    }
    let images = Volume::from_slices(&slices.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let (h, w) = (images.height, images.width);
    let mut ooi = Volume::zeros(slices.len(), 1, h, w);
    let mut gt = Volume::zeros(slices.len(), 1, h, w);
    for (i, s) in slices.iter().enumerate() {
        if s.ooi.len() != h * w {
            return Err(Error::ShapeMismatch("OOI plane size mismatch".into()));
        }
        ooi.slice_data_mut(i).copy_from_slice(&s.ooi);
        if let Some(t) = &s.tumor {
            gt.slice_data_mut(i).copy_from_slice(t);
        }
    }
    Ok(PhantomVolume {
        images,
        ooi,
        ground_truth: gt,
        subject_seed: first.subject_seed,
    })
}

/// All slices of one healthy subject.
pub fn healthy_subject(cfg: &PhantomConfig, subject_seed: u64, n_slices: usize) -> Vec<PhantomSlice> {
    (0..n_slices)
        .map(|i| generate_healthy_slice(cfg, subject_seed, i))
        .collect()
}

/// All slices of one tumoral subject.
pub fn tumoral_subject(
    cfg: &PhantomConfig,
    subject_seed: u64,
    n_slices: usize,
    spec: &TumorSpec,
) -> Result<Vec<PhantomSlice>> {
    (0..n_slices)
        .map(|i| generate_tumoral_slice(cfg, subject_seed, i, spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg2() -> PhantomConfig {
        PhantomConfig::new(64, 2).unwrap()
    }

    #[test]
    fn hole_masks_are_deterministic_and_binary() {
        let spec = HoleSpec::for_size(64, 42);
        let a = generate_hole_mask(&spec, 64, 64, 3).unwrap();
        let b = generate_hole_mask(&spec, 64, 64, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || v == 1.0));
        let c = generate_hole_mask(&spec, 64, 64, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hole_coverage_stays_inside_band() {
        let spec = HoleSpec::for_size(64, 7);
        for i in 0..100 {
            let m = generate_hole_mask(&spec, 64, 64, i).unwrap();
            let coverage = m.iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64;
            assert!(
                (0.25..=0.30).contains(&coverage),
                "mask {i} coverage {coverage}"
            );
        }
    }

    #[test]
    fn infeasible_coverage_band_errors_out() {
        let mut spec = HoleSpec::for_size(8, 1);
        spec.coverage = (0.999, 0.9999);
        assert!(matches!(
            generate_hole_mask(&spec, 8, 8, 0),
            Err(Error::CoverageUnreachable { .. })
        ));
    }

    #[test]
    fn healthy_slice_is_deterministic() {
        let cfg = cfg2();
        let a = generate_healthy_slice(&cfg, 11, 5);
        let b = generate_healthy_slice(&cfg, 11, 5);
        assert_eq!(a.image, b.image);
        assert_eq!(a.ooi, b.ooi);
        let c = generate_healthy_slice(&cfg, 12, 5);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn ooi_area_is_plausible_across_subjects() {
        let cfg = cfg2();
        for seed in 0..100u64 {
            let s = generate_healthy_slice(&cfg, seed, 0);
            let area = s.ooi.iter().filter(|&&v| v == 1.0).count() as f64 / s.ooi.len() as f64;
            assert!((0.10..=0.50).contains(&area), "seed {seed} area {area}");
        }
    }

    #[test]
    fn pet_channel_is_dark_outside_hot_regions() {
        let cfg = cfg2();
        for seed in 0..20u64 {
            let s = generate_healthy_slice(&cfg, seed, 2);
            let pet = s.image.channel(1);
            // Hot region = anything above 0.3; exclude it and average.
            let rest: Vec<f64> = pet.iter().filter(|&&v| v < 0.3).map(|&v| v as f64).collect();
            let mean = rest.iter().sum::<f64>() / rest.len() as f64;
            assert!(mean < 0.1, "seed {seed} background mean {mean}");
        }
    }

    #[test]
    fn tumor_area_tracks_radius() {
        let cfg = cfg2();
        let mut spec = TumorSpec::for_size(64);
        spec.radius = (5.0, 5.0);
        let s = generate_tumoral_slice(&cfg, 3, 1, &spec).unwrap();
        let gt = s.tumor.unwrap();
        let area = gt.iter().filter(|&&v| v == 1.0).count() as f64;
        let expect = core::f64::consts::PI * 25.0;
        assert!(
            (area - expect).abs() <= 0.2 * expect,
            "area {area} vs πr² {expect}"
        );
        // Single connected blob.
        let comps = crate::pipeline::connected_components(
            &gt.iter().map(|&v| v == 1.0).collect::<Vec<_>>(),
            64,
            64,
        );
        assert_eq!(comps.count(), 1);
    }

    #[test]
    fn three_blob_spec_produces_three_components() {
        let cfg = cfg2();
        let mut spec = TumorSpec::for_size(64);
        spec.blobs = (3, 3);
        spec.radius = (3.0, 4.0);
        let s = generate_tumoral_slice(&cfg, 5, 0, &spec).unwrap();
        let gt = s.tumor.unwrap();
        let comps = crate::pipeline::connected_components(
            &gt.iter().map(|&v| v == 1.0).collect::<Vec<_>>(),
            64,
            64,
        );
        assert_eq!(comps.count(), 3);
    }

    #[test]
    fn zero_contrast_tumor_leaves_image_unchanged() {
        let cfg = cfg2();
        let mut spec = TumorSpec::for_size(64);
        spec.contrast_ct = 0.0;
        spec.contrast_pet = 0.0;
        let healthy = generate_healthy_slice(&cfg, 9, 4);
        let tumoral = generate_tumoral_slice(&cfg, 9, 4, &spec).unwrap();
        assert_eq!(healthy.image, tumoral.image);
        assert!(tumoral.tumor.is_some());
    }

    #[test]
    fn ground_truth_inside_ooi_and_disjoint_from_decoy() {
        let cfg = cfg2();
        let spec = TumorSpec::for_size(64);
        for seed in 20..40u64 {
            let s = generate_tumoral_slice(&cfg, seed, 0, &spec).unwrap();
            let gt = s.tumor.as_ref().unwrap();
            let healthy = generate_healthy_slice(&cfg, seed, 0);
            for i in 0..gt.len() {
                if gt[i] == 1.0 {
                    assert_eq!(s.ooi[i], 1.0, "gt outside OOI at {i}");
                    // Decoy hot spot: healthy PET channel above 0.3.
                    assert!(
                        healthy.image.channel(1)[i] < 0.3,
                        "gt overlaps decoy at {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn oversized_blob_cannot_be_placed() {
        let cfg = cfg2();
        let mut spec = TumorSpec::for_size(64);
        spec.radius = (30.0, 32.0);
        assert!(matches!(
            generate_tumoral_slice(&cfg, 1, 0, &spec),
            Err(Error::BlobOutsideOoi)
        ));
    }

    #[test]
    fn assemble_checks_subject_consistency() {
        let cfg = cfg2();
        let a = generate_healthy_slice(&cfg, 1, 0);
        let b = generate_healthy_slice(&cfg, 1, 1);
        let v = assemble_volume(&[a.clone(), b]).unwrap();
        assert_eq!(v.images.slices, 2);
        assert_eq!(v.ground_truth.data.iter().sum::<f32>(), 0.0);
        let c = generate_healthy_slice(&cfg, 2, 0);
        assert!(assemble_volume(&[a, c]).is_err());
    }
}
