//! Volumetric image quality metrics (PSNR, SSIM) and paired bootstrap
//! significance testing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{depth_sum, instance_normalize, PotentialVolume, Real};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; identical inputs yield +inf.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "psnr inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 =
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as i64;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Separable Gaussian filter evaluated at every valid (fully interior)
/// window center; returns the filtered image and its valid dims.
fn filter_valid(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = gaussian_window();
    let n = SSIM_WINDOW;
    let vh = h - n + 1;
    let vw = w - n + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * vw];
    for r in 0..h {
        for c in 0..vw {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[r * w + c + i];
            }
            tmp[r * vw + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; vh * vw];
    for r in 0..vh {
        for c in 0..vw {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(r + i) * vw + c];
            }
            out[r * vw + c] = acc;
        }
    }
    (out, vh, vw)
}

/// Mean local SSIM over all valid window positions (Gaussian window 11x11,
/// sigma 1.5, K1 0.01, K2 0.03).
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(CoreError::ShapeMismatch("ssim image size".into()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}-pixel SSIM window"
        )));
    }
    let c1 = (SSIM_K1 * data_range) * (SSIM_K1 * data_range);
    let c2 = (SSIM_K2 * data_range) * (SSIM_K2 * data_range);

    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();

    let (mu_a, vh, vw) = filter_valid(a, h, w);
    let (mu_b, _, _) = filter_valid(b, h, w);
    let (e_aa, _, _) = filter_valid(&aa, h, w);
    let (e_bb, _, _) = filter_valid(&bb, h, w);
    let (e_ab, _, _) = filter_valid(&ab, h, w);

    let mut total = 0.0;
    for i in 0..vh * vw {
        let va = e_aa[i] - mu_a[i] * mu_a[i];
        let vb = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
            / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        total += s;
    }
    Ok(total / (vh * vw) as f64)
}

/// Volume score: mean of per-depth-slice 2D SSIM at matching depths.
pub fn ssim_volume<T: Real>(a: &PotentialVolume<T>, b: &PotentialVolume<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(CoreError::ShapeMismatch("ssim_volume dims".into()));
    }
    let (d, h, w) = a.dims();
    let mut total = 0.0;
    for dd in 0..d {
        let sa: Vec<f64> = a.vol.slice(dd).iter().map(|v| v.f64()).collect();
        let sb: Vec<f64> = b.vol.slice(dd).iter().map(|v| v.f64()).collect();
        total += ssim(&sa, &sb, h, w, 1.0)?;
    }
    Ok(total / d as f64)
}

/// Per-instance metric row in the order the report tables use.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricRow {
    pub psnr_full: f64,
    pub ssim_full: f64,
    pub psnr_depthsum: f64,
    pub ssim_depthsum: f64,
}

/// Normalize both volumes independently, then score full-volume and
/// depth-sum PSNR/SSIM.
pub fn evaluate_instance<T: Real>(
    gt: &PotentialVolume<T>,
    recon: &PotentialVolume<T>,
) -> Result<MetricRow> {
    if gt.dims() != recon.dims() {
        return Err(CoreError::ShapeMismatch("evaluate_instance dims".into()));
    }
    let (_, h, w) = gt.dims();
    let g = instance_normalize(gt);
    let r = instance_normalize(recon);
    let gflat: Vec<f64> = g.vol.data.iter().map(|v| v.f64()).collect();
    let rflat: Vec<f64> = r.vol.data.iter().map(|v| v.f64()).collect();
    let psnr_full = psnr(&gflat, &rflat, 1.0)?;
    let ssim_full = ssim_volume(&g, &r)?;

    // depth sums are renormalized to [0,1] before scoring
    let norm01 = |v: Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            v.into_iter().map(|x| (x - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let gd = norm01(depth_sum(&g.vol).iter().map(|v| v.f64()).collect());
    let rd = norm01(depth_sum(&r.vol).iter().map(|v| v.f64()).collect());
    let psnr_depthsum = psnr(&gd, &rd, 1.0)?;
    let ssim_depthsum = ssim(&gd, &rd, h, w, 1.0)?;
    Ok(MetricRow { psnr_full, ssim_full, psnr_depthsum, ssim_depthsum })
}

/// Mean pairwise SSIM between depth slices of one normalized volume; high
/// values flag depth-collapsed reconstructions.
pub fn depth_slice_similarity<T: Real>(v: &PotentialVolume<T>) -> Result<f64> {
    let (d, h, w) = v.dims();
    if d < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 depth slices".into()));
    }
    let n = instance_normalize(v);
    let slices: Vec<Vec<f64>> =
        (0..d).map(|dd| n.vol.slice(dd).iter().map(|x| x.f64()).collect()).collect();
    let mut total = 0.0;
    let mut cnt = 0;
    for i in 0..d {
        for j in i + 1..d {
            total += ssim(&slices[i], &slices[j], h, w, 1.0)?;
            cnt += 1;
        }
    }
    Ok(total / cnt as f64)
}

/// Mean and standard error, excluding non-finite entries.
pub fn mean_sem(scores: &[f64]) -> (f64, f64, usize) {
    let finite: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, scores.len() - n);
    }
    let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), scores.len() - n)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapReport {
    /// Fraction of resamples where mean(a) <= mean(b).
    pub p_value: f64,
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
}

/// Paired bootstrap over instances: resample indices with replacement,
/// report p = P[mean(a) <= mean(b)] and the 95% CI of the mean difference.
pub fn paired_bootstrap(
    scores_a: &[f64],
    scores_b: &[f64],
    resamples: usize,
    rng: &mut impl Rng,
) -> Result<BootstrapReport> {
    if scores_a.len() != scores_b.len() {
        return Err(CoreError::ShapeMismatch("paired scores must have equal length".into()));
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 paired scores".into()));
    }
    let mut diffs = Vec::with_capacity(resamples);
    let mut le_count = 0usize;
    for _ in 0..resamples {
        let mut sa = 0.0;
        let mut sb = 0.0;
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa += scores_a[i];
            sb += scores_b[i];
        }
        if sa <= sb {
            le_count += 1;
        }
        diffs.push((sa - sb) / n as f64);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo_idx = ((resamples as f64) * 0.025) as usize;
    let hi_idx = (((resamples as f64) * 0.975) as usize).min(resamples - 1);
    let mean_diff = diffs.iter().sum::<f64>() / resamples as f64;
    Ok(BootstrapReport {
        p_value: le_count as f64 / resamples as f64,
        mean_diff,
        ci_low: diffs[lo_idx],
        ci_high: diffs[hi_idx],
        resamples,
    })
}
