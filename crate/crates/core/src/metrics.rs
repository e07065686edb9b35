//! Image and depth quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Predictions are clamped to this before taking logarithms.
pub const DEPTH_EPS: f64 = 1e-6;

/// All metrics for one rendered view (or an average over views). Fields that
/// do not apply to the image kind are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub depth: Option<DepthMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub rmse_log: f64,
    pub log10_err: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid_pixels: usize,
}

fn check_shapes(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} values, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64)
}

/// Peak signal-to-noise ratio for values in [0, 1], capped at 100 dB.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region (no padding).
fn filter_valid(img: &[f64], width: usize, height: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let ow = width + 1 - k;
    let oh = height + 1 - k;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| kernel[i] * img[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_plane(pred: &[f64], gt: &[f64], width: usize, height: usize) -> f64 {
    let kernel = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let (mu_x, ow, oh) = filter_valid(pred, width, height, &kernel);
    let (mu_y, _, _) = filter_valid(gt, width, height, &kernel);
    let (xx, _, _) = filter_valid(&prod(pred, pred), width, height, &kernel);
    let (yy, _, _) = filter_valid(&prod(gt, gt), width, height, &kernel);
    let (xy, _, _) = filter_valid(&prod(pred, gt), width, height, &kernel);
    let mut acc = 0.0;
    for i in 0..ow * oh {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    acc / (ow * oh) as f64
}

/// Mean structural similarity (11-tap Gaussian window, sigma 1.5, data range
/// 1), averaged over channels. Images are row-major with interleaved channels.
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.len() != width * height * channels {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not form a {width}x{height}x{channels} image",
            pred.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let plane = |img: &[f64], c: usize| -> Vec<f64> { img.iter().skip(c).step_by(channels).copied().collect() };
    let total: f64 = (0..channels)
        .map(|c| ssim_plane(&plane(pred, c), &plane(gt, c), width, height))
        .sum();
    Ok(total / channels as f64)
}

/// Depth accuracy over pixels with positive ground truth (and `mask`, when
/// given).
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<DepthMetrics> {
    check_shapes(pred, gt)?;
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::ShapeMismatch("mask size differs from the image".into()));
        }
    }
    let mut n = 0usize;
    let (mut absrel, mut sq_log, mut log10_err) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if !(g > 0.0) || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let p = p.max(DEPTH_EPS);
        n += 1;
        absrel += (p - g).abs() / g;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        log10_err += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        let mut threshold = 1.0;
        for h in hits.iter_mut() {
            threshold *= 1.25;
            if ratio < threshold {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no pixel has valid ground-truth depth".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        absrel: absrel / nf,
        rmse_log: (sq_log / nf).sqrt(),
        log10_err: log10_err / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        n_valid_pixels: n,
    })
}
