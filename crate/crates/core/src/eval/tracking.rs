use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::serialize_db;
use crate::numerics::Tensor;
use crate::synthdata::PolarCalibration;

/// Fraction of the peak that bounds the tracked region.
pub const BLOB_THRESHOLD: f64 = 0.5;

/// Polar position: range in metres, angle in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Polar {
    pub r: f64,
    pub theta: f64,
}

/// Maps a (fractional) pixel position onto the calibrated polar axes.
pub fn pixel_to_polar(cal: &PolarCalibration, height: usize, width: usize, row: f64, col: f64) -> Polar {
    let frac = |v: f64, n: usize| if n > 1 { v / (n - 1) as f64 } else { 0.0 };
    Polar {
        r: cal.range_min + frac(row, height) * (cal.range_max - cal.range_min),
        theta: (cal.angle_min + frac(col, width) * (cal.angle_max - cal.angle_min)).to_radians(),
    }
}

/// Locates the brightest blob of an `[H, W]` or `[H, W, C]` frame (channels
/// summed, negatives treated as zero). Returns `None` for an all-zero frame.
pub fn track_blob(frame: &Tensor<f32>, cal: &PolarCalibration) -> Result<Option<Polar>> {
    let (h, w, c) = match frame.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape("track_blob", s, &[0, 0, 0])),
    };
    let intensity: Vec<f64> = frame
        .data()
        .chunks(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>().max(0.0))
        .collect();
    let (peak_at, peak) = intensity
        .iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    if peak <= 0.0 || !peak.is_finite() {
        return Ok(None);
    }
    let cut = BLOB_THRESHOLD * peak;
    let mut seen = vec![false; h * w];
    let mut stack = vec![peak_at];
    seen[peak_at] = true;
    let (mut mass, mut sr, mut sc) = (0.0, 0.0, 0.0);
    while let Some(i) = stack.pop() {
        let (r, col) = (i / w, i % w);
        let v = intensity[i];
        mass += v;
        sr += v * r as f64;
        sc += v * col as f64;
        let mut visit = |j: usize| {
            if !seen[j] && intensity[j] >= cut {
                seen[j] = true;
                stack.push(j);
            }
        };
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
        if col > 0 {
            visit(i - 1);
        }
        if col + 1 < w {
            visit(i + 1);
        }
    }
    Ok(Some(pixel_to_polar(cal, h, w, sr / mass, sc / mass)))
}

/// Euclidean distance between two polar positions (law of cosines).
pub fn tracking_error(r_i: f64, theta_i: f64, r_g: f64, theta_g: f64) -> f64 {
    (r_i * r_i + r_g * r_g - 2.0 * r_i * r_g * (theta_i - theta_g).cos()).max(0.0).sqrt()
}

/// Per-frame tracking errors with their empirical distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackingResult {
    pub errors: Vec<f64>,
    /// `(error, fraction of frames with error <= it)`, sorted.
    pub cdf: Vec<(f64, f64)>,
    #[serde(serialize_with = "serialize_db")]
    pub median: f64,
    /// Imputed frames in which no blob was found.
    pub missed: usize,
}

impl TrackingResult {
    pub fn from_errors(errors: Vec<f64>, missed: usize) -> Self {
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let cdf = sorted.iter().enumerate().map(|(i, &e)| (e, (i + 1) as f64 / n as f64)).collect();
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Self {
            errors,
            cdf,
            median,
            missed,
        }
    }
}
