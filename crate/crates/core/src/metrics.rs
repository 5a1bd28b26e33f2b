//! Image-quality metrics (MSE, PSNR, SSIM), segmentation metrics (Dice,
//! Precision, Recall), cohort aggregation, and the Wilcoxon signed-rank test.
//!
//! All accumulation is in 64-bit. SSIM defaults to the single-window form
//! (global statistics); a sliding-window variant is available separately.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Result};

fn check_equal_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs of {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("metric input".into()));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_equal_len(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Peak signal-to-noise ratio `10·log10(R²/MSE)`; +∞ when the images match.
pub fn psnr(a: &[f32], b: &[f32], r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(Error::InvalidConfig(format!("PSNR peak {r} must be > 0")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * Float::log10(r * r / m))
}

fn moments(a: &[f32], b: &[f32]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let (mut ma, mut mb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ma += x as f64;
        mb += y as f64;
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

fn ssim_from_moments(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, r: f64) -> f64 {
    let c1 = (0.01 * r) * (0.01 * r);
    let c2 = (0.03 * r) * (0.03 * r);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// SSIM with the whole input as a single window (population (co)variances),
/// `c1 = (0.01R)²`, `c2 = (0.03R)²`.
pub fn ssim(a: &[f32], b: &[f32], r: f64) -> Result<f64> {
    check_equal_len(a, b)?;
    let (ma, mb, va, vb, cov) = moments(a, b);
    Ok(ssim_from_moments(ma, mb, va, vb, cov, r))
}

/// Mean local SSIM over a sliding Gaussian window (the common windowed
/// variant); falls back to the global form when the plane is smaller than
/// the window.
pub fn ssim_windowed(a: &[f32], b: &[f32], h: usize, w: usize, r: f64) -> Result<f64> {
    check_equal_len(a, b)?;
    if a.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "plane {}x{} holds {} elements, got {}",
            h,
            w,
            h * w,
            a.len()
        )));
    }
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    if h < WIN || w < WIN {
        return ssim(a, b, r);
    }
    let mut kernel = [0.0f64; WIN * WIN];
    let mut ksum = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let dy = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = j as f64 - (WIN as f64 - 1.0) / 2.0;
            let v = Float::exp(-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA));
            kernel[i * WIN + j] = v;
            ksum += v;
        }
    }
    for k in &mut kernel {
        *k /= ksum;
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in 0..=(h - WIN) {
        for x in 0..=(w - WIN) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = kernel[i * WIN + j];
                    ma += k * a[(y + i) * w + x + j] as f64;
                    mb += k * b[(y + i) * w + x + j] as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = kernel[i * WIN + j];
                    let dx = a[(y + i) * w + x + j] as f64 - ma;
                    let dy = b[(y + i) * w + x + j] as f64 - mb;
                    va += k * dx * dx;
                    vb += k * dy * dy;
                    cov += k * dx * dy;
                }
            }
            total += ssim_from_moments(ma, mb, va, vb, cov, r);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ── Segmentation metrics ────────────────────────────────────────────

/// Voxel confusion counts between a prediction `S` and ground truth `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn from_masks(s: &[f32], g: &[f32]) -> Result<Self> {
        check_equal_len(s, g)?;
        if !s
            .iter()
            .chain(g.iter())
            .all(|&v| v == 0.0 || v == 1.0)
        {
            return Err(Error::NonBinaryMask);
        }
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (&sv, &gv) in s.iter().zip(g) {
            match (sv == 1.0, gv == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        Ok(ConfusionCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fneg,
        })
    }

    /// `2|S∩G| / (|S|+|G|)`; two empty masks agree perfectly (Dice 1).
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.true_pos as f64 / denom as f64
        }
    }

    /// `(precision, flagged)`: flagged when `|S| = 0` (defined as 1).
    pub fn precision(&self) -> (f64, bool) {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            (1.0, true)
        } else {
            (self.true_pos as f64 / denom as f64, false)
        }
    }

    /// `(recall, flagged)`: flagged when `|G| = 0` (defined as 1).
    pub fn recall(&self) -> (f64, bool) {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            (1.0, true)
        } else {
            (self.true_pos as f64 / denom as f64, false)
        }
    }
}

/// Dice coefficient between two binary masks.
pub fn dice(s: &[f32], g: &[f32]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(s, g)?.dice())
}

/// Precision and recall between two binary masks.
pub fn precision_recall(s: &[f32], g: &[f32]) -> Result<(f64, f64)> {
    let c = ConfusionCounts::from_masks(s, g)?;
    Ok((c.precision().0, c.recall().0))
}

// ── Wilcoxon signed-rank ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMode {
    /// Enumerate all 2ⁿ sign assignments (n ≤ 25).
    Exact,
    /// Tie-corrected normal approximation with continuity correction.
    Normal,
}

#[derive(Debug, Clone, Copy)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; tied absolute differences receive average ranks.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired samples of {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Empty("signed-rank test needs >= 2 pairs".into()));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::AllDifferencesZero);
    }
    let n = diffs.len();

    // Average ranks of |d|, ties shared.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        diffs[i]
            .abs()
            .partial_cmp(&diffs[j].abs())
            .expect("finite differences")
    });
    let mut ranks = vec![0.0f64; n];
    let mut tie_groups: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        tie_groups.push(j - i + 1);
        i = j + 1;
    }
    let mut w_plus = 0.0;
    let mut w_minus = 0.0;
    for (d, r) in diffs.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        } else {
            w_minus += r;
        }
    }
    let t = w_plus.min(w_minus);

    let p = match mode {
        WilcoxonMode::Exact => {
            if n > 25 {
                return Err(Error::InvalidConfig(format!(
                    "exact mode enumerates 2^n assignments; n = {n} > 25"
                )));
            }
            // Ranks are multiples of 1/2; double them to integers and count
            // achievable rank-sums over all 2^n assignments by subset-sum.
            let ranks2: Vec<u64> = ranks.iter().map(|r| (r * 2.0) as u64).collect();
            let total: u64 = ranks2.iter().sum();
            let mut dist = vec![0u64; total as usize + 1];
            dist[0] = 1;
            for &r in &ranks2 {
                for s in (r as usize..dist.len()).rev() {
                    dist[s] += dist[s - r as usize];
                }
            }
            let t2 = (t * 2.0 + 1e-9) as usize;
            let le: u64 = dist[..=t2.min(dist.len() - 1)].iter().sum();
            let p = 2.0 * le as f64 / (1u64 << n) as f64;
            p.min(1.0)
        }
        WilcoxonMode::Normal => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let tie_term: f64 = tie_groups
                .iter()
                .map(|&g| {
                    let g = g as f64;
                    g * g * g - g
                })
                .sum::<f64>()
                / 48.0;
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
            if var <= 0.0 {
                return Err(Error::AllDifferencesZero);
            }
            // Continuity correction toward the mean.
            let z = (t - mean + 0.5) / Float::sqrt(var);
            let p = 2.0 * normal_cdf(z);
            p.min(1.0)
        }
    };

    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        p_value: p,
        n_used: n,
    })
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / core::f64::consts::SQRT_2))
}

// ── Aggregation ─────────────────────────────────────────────────────

/// Mean and population standard deviation (two-pass, 64-bit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate of zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Aggregate {
        mean,
        std: Float::sqrt(var),
        n: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_have_zero_mse_infinite_psnr() {
        let a = vec![0.25f32; 16];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_30db_example() {
        // R = 255, MSE = 65.025: 10·log10(65025/65.025) = 30 dB exactly.
        let a = vec![0.0f32; 4];
        let d = 65.025f64.sqrt() as f32;
        let b = vec![d; 4];
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 30.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = crate::rng::root(31);
        use rand::Rng;
        let a: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut expect = 0.0f64;
        for i in 0..64 {
            expect += (a[i] as f64 - b[i] as f64).powi(2);
        }
        expect /= 64.0;
        assert!((mse(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn ssim_is_one_for_identical_nonconstant_input() {
        let a: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_vs_shifted_matches_closed_form() {
        // a ≡ 0, b ≡ 1, R = 1: variances vanish, SSIM = c1/(1+c1).
        let a = vec![0.0f32; 32];
        let b = vec![1.0f32; 32];
        let c1 = 0.01f64 * 0.01;
        let expect = c1 / (1.0 + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = crate::rng::root(33);
        use rand::Rng;
        for _ in 0..10 {
            let a: Vec<f32> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f32> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ab = ssim(&a, &b, 1.0).unwrap();
            let ba = ssim(&b, &a, 1.0).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_hand_cases() {
        let ones = vec![1.0f32; 4];
        let zeros = vec![0.0f32; 4];
        assert_eq!(dice(&ones, &ones).unwrap(), 1.0);
        assert_eq!(dice(&ones, &zeros).unwrap(), 0.0);
        assert_eq!(dice(&zeros, &zeros).unwrap(), 1.0);
        // |S| = |G| = 4, overlap 2.
        let s = vec![1.0f32, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let g = vec![0.0f32, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(dice(&s, &g).unwrap(), 0.5);
        let (p, r) = precision_recall(&s, &g).unwrap();
        assert_eq!((p, r), (0.5, 0.5));
    }

    #[test]
    fn dice_rejects_non_binary() {
        let s = vec![0.5f32; 4];
        let g = vec![0.0f32; 4];
        assert!(matches!(dice(&s, &g), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn empty_mask_flags() {
        let c = ConfusionCounts::from_masks(&[0.0; 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.precision(), (1.0, true));
        assert_eq!(c.recall(), (0.0, false));
    }

    #[test]
    fn wilcoxon_all_positive_small_sample() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0; 5];
        let r = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert!((r.p_value - 0.0625).abs() < 1e-12, "p {}", r.p_value);
    }

    #[test]
    fn wilcoxon_identical_samples_are_an_error() {
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, WilcoxonMode::Exact),
            Err(Error::AllDifferencesZero)
        ));
    }

    #[test]
    fn wilcoxon_antisymmetry() {
        let x = [2.0, 5.0, 1.0, 7.0, 3.0, 8.0];
        let y = [1.0, 6.0, 0.5, 3.0, 3.5, 2.0];
        let ab = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
        let ba = wilcoxon_signed_rank(&y, &x, WilcoxonMode::Exact).unwrap();
        assert_eq!(ab.w_plus, ba.w_minus);
        assert_eq!(ab.w_minus, ba.w_plus);
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn wilcoxon_exact_brute_force_cross_check() {
        // Independent oracle: literal enumeration of all sign patterns.
        let x = [0.3, -1.2, 2.2, 0.9, -0.4, 1.7, 0.6];
        let y = [0.0; 7];
        let r = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
        let mut d: Vec<f64> = x.to_vec();
        d.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
        let ranks: Vec<f64> = (1..=7).map(|v| v as f64).collect();
        let t = r.w_plus.min(r.w_minus);
        let mut le = 0u64;
        for pattern in 0u32..(1 << 7) {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if pattern & (1 << i) != 0 {
                    w += r;
                }
            }
            if w <= t + 1e-9 {
                le += 1;
            }
        }
        let expect = (2.0 * le as f64 / 128.0).min(1.0);
        assert!((r.p_value - expect).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let a = aggregate(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((a.mean, a.std), (1.0, 0.0));
        let b = aggregate(&[0.0, 2.0]).unwrap();
        assert_eq!((b.mean, b.std), (1.0, 1.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_matches_two_pass_oracle() {
        let mut rng = crate::rng::root(37);
        use rand::Rng;
        let vals: Vec<f64> = (0..33).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let agg = aggregate(&vals).unwrap();
        let mean = vals.iter().sum::<f64>() / 33.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 33.0;
        assert!((agg.mean - mean).abs() < 1e-12);
        assert!((agg.std - var.sqrt()).abs() < 1e-12);
    }
}
