//! MSE, PSNR and SSIM between imputed and ground-truth frames.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Side of the square SSIM box window (odd).
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Serializes non-finite values as the strings `"inf"` / `"nan"` so reports stay valid JSON.
pub fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub mse: f64,
    pub ssim: f64,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub ssim: f64,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub frames: Vec<FrameMetrics>,
}

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("metric", a.shape(), b.shape()));
    }
    Ok(())
}

fn mse_one(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Mean squared difference over every element of every frame.
pub fn mse(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", &[a.len()], &[b.len()]));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        check_same(x, y)?;
        total += mse_one(x, y) * x.len() as f64;
        count += x.len();
    }
    Ok(total / count as f64)
}

/// `10 log10(range^2 / mse)`; `+inf` when `mse == 0`.
pub fn psnr(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Summed-area table with a zero border row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y, x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean SSIM over all fully-contained `window x window` boxes of one plane.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &MetricConfig) -> Result<f64> {
    let win = cfg.window;
    if win % 2 == 0 || win == 0 {
        return Err(Error::config(format!("SSIM window must be odd, got {win}")));
    }
    if win > h.min(w) {
        return Err(Error::config(format!("SSIM window {win} exceeds frame {h}x{w}")));
    }
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let sa = integral(h, w, |y, x| a[y * w + x]);
    let sb = integral(h, w, |y, x| b[y * w + x]);
    let saa = integral(h, w, |y, x| a[y * w + x] * a[y * w + x]);
    let sbb = integral(h, w, |y, x| b[y * w + x] * b[y * w + x]);
    let sab = integral(h, w, |y, x| a[y * w + x] * b[y * w + x]);
    let n = (win * win) as f64;
    let boxsum = |s: &[f64], y: usize, x: usize| {
        s[(y + win) * (w + 1) + x + win] - s[y * (w + 1) + x + win] - s[(y + win) * (w + 1) + x] + s[y * (w + 1) + x]
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let ma = boxsum(&sa, y, x) / n;
            let mb = boxsum(&sb, y, x) / n;
            let va = (boxsum(&saa, y, x) / n - ma * ma).max(0.0);
            let vb = (boxsum(&sbb, y, x) / n - mb * mb).max(0.0);
            let cov = boxsum(&sab, y, x) / n - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s.clamp(-1.0, 1.0);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two `[H, W, C]` frames, averaged over channels.
pub fn ssim_frame(a: &Tensor<f32>, b: &Tensor<f32>, cfg: &MetricConfig) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = match a.shape() {
        [h, w, c] => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        other => return Err(Error::contract(format!("SSIM expects [H,W,C] frames, got {other:?}"))),
    };
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        total += ssim_plane(&pa, &pb, h, w, cfg)?;
    }
    Ok(total / c as f64)
}

/// Mean per-frame SSIM.
pub fn ssim(a: &[Tensor<f32>], b: &[Tensor<f32>], cfg: &MetricConfig) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += ssim_frame(x, y, cfg)?;
    }
    Ok(total / a.len() as f64)
}

/// Full report for imputed frames against ground truth. `indices` label the frames.
pub fn evaluate(pred: &[Tensor<f32>], truth: &[Tensor<f32>], indices: &[usize], cfg: &MetricConfig) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.len() != indices.len() {
        return Err(Error::shape("evaluate", &[pred.len(), indices.len()], &[truth.len()]));
    }
    let mut frames = Vec::with_capacity(pred.len());
    for ((p, t), &index) in pred.iter().zip(truth).zip(indices) {
        check_same(p, t)?;
        let m = mse_one(p, t);
        frames.push(FrameMetrics {
            index,
            mse: m,
            ssim: ssim_frame(p, t, cfg)?,
            psnr: psnr(m, cfg.data_range),
        });
    }
    Ok(summarize(frames, cfg))
}

/// Aggregates per-frame metrics (equal-sized frames).
pub fn summarize(frames: Vec<FrameMetrics>, cfg: &MetricConfig) -> MetricReport {
    let n = frames.len().max(1) as f64;
    let mse = frames.iter().map(|f| f.mse).sum::<f64>() / n;
    let ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
    MetricReport {
        mse,
        ssim,
        psnr: psnr(mse, cfg.data_range),
        frames,
    }
}
