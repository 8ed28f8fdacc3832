use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{BlobShape, DomainSpec, FrameSequence, TrajectoryFamily};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const STREAM_KINEMATICS: u64 = 1;
const STREAM_APPEARANCE: u64 = 2;
const STREAM_TIMING: u64 = 3;

/// splitmix64 finalizer over (seed, window, stream).
pub(crate) fn derive_seed(seed: u64, window: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(window.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Blob center as a function of time measured in frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Linear {
        origin: [f64; 2],
        velocity: [f64; 2],
    },
    Circular {
        pivot: [f64; 2],
        radius: f64,
        omega: f64,
        phase: f64,
    },
    Bounce {
        origin: [f64; 2],
        velocity: [f64; 2],
        lo: [f64; 2],
        hi: [f64; 2],
    },
}

fn fold(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl Trajectory {
    /// `[row, col]` at `tau` frames after the window start.
    pub fn center_at(&self, tau: f64) -> [f64; 2] {
        match *self {
            Trajectory::Linear { origin, velocity } => {
                [origin[0] + velocity[0] * tau, origin[1] + velocity[1] * tau]
            }
            Trajectory::Circular {
                pivot,
                radius,
                omega,
                phase,
            } => {
                let a = phase + omega * tau;
                [pivot[0] + radius * a.cos(), pivot[1] + radius * a.sin()]
            }
            Trajectory::Bounce {
                origin,
                velocity,
                lo,
                hi,
            } => [
                fold(origin[0] + velocity[0] * tau, lo[0], hi[0]),
                fold(origin[1] + velocity[1] * tau, lo[1], hi[1]),
            ],
        }
    }

    fn sample(spec: &DomainSpec, span: f64, rng: &mut ChaCha8Rng) -> Self {
        let margin = blob_margin(spec);
        let lo = [margin, margin];
        let hi = [spec.height as f64 - 1.0 - margin, spec.width as f64 - 1.0 - margin];
        let speed = if spec.speed_max > spec.speed_min {
            rng.gen_range(spec.speed_min..=spec.speed_max)
        } else {
            spec.speed_min
        };
        let heading = match spec.heading {
            Some(h) => h,
            None => rng.gen_range(0.0..2.0 * PI),
        };
        match spec.trajectory {
            TrajectoryFamily::Linear => {
                let mut velocity = [speed * heading.cos(), speed * heading.sin()];
                for axis in 0..2 {
                    let room = hi[axis] - lo[axis];
                    let travel = velocity[axis] * span;
                    if travel.abs() > room {
                        velocity[axis] *= room / travel.abs();
                    }
                }
                let mut origin = [0.0; 2];
                for axis in 0..2 {
                    let travel = velocity[axis] * span;
                    let start_lo = lo[axis] - travel.min(0.0);
                    let start_hi = hi[axis] - travel.max(0.0);
                    origin[axis] = if start_hi > start_lo {
                        rng.gen_range(start_lo..start_hi)
                    } else {
                        start_lo
                    };
                }
                Trajectory::Linear { origin, velocity }
            }
            TrajectoryFamily::Circular => {
                let max_r = ((hi[0] - lo[0]).min(hi[1] - lo[1]) / 2.0).max(1.0);
                let radius = rng.gen_range((max_r * 0.5)..=max_r);
                let mut pivot = [0.0; 2];
                for axis in 0..2 {
                    let (a, b) = (lo[axis] + radius, hi[axis] - radius);
                    pivot[axis] = if b > a { rng.gen_range(a..b) } else { (lo[axis] + hi[axis]) / 2.0 };
                }
                let sign = if heading.sin() >= 0.0 { 1.0 } else { -1.0 };
                Trajectory::Circular {
                    pivot,
                    radius,
                    omega: sign * speed / radius,
                    phase: heading,
                }
            }
            TrajectoryFamily::Bounce => {
                let origin = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
                Trajectory::Bounce {
                    origin,
                    velocity: [speed * heading.cos(), speed * heading.sin()],
                    lo,
                    hi,
                }
            }
        }
    }
}

fn blob_extent(spec: &DomainSpec) -> f64 {
    let s = spec.blob_size;
    match spec.blob_shape {
        BlobShape::Gaussian => 3.0 * s * (1.0 + spec.deformation_rate * 10.0),
        BlobShape::Ring => s + 3.0 * ring_width(s),
        BlobShape::Bar => 3.0 * BAR_LONG * s,
    }
}

fn blob_margin(spec: &DomainSpec) -> f64 {
    match spec.blob_shape {
        BlobShape::Ring => spec.blob_size,
        _ => 1.5 * spec.blob_size,
    }
}

const BAR_LONG: f64 = 2.5;
const BAR_SHORT: f64 = 0.6;

fn ring_width(size: f64) -> f64 {
    0.35 * size
}

struct Blob {
    trajectory: Trajectory,
    amplitude: f64,
    /// Signed covariance drift per frame.
    drift: f64,
    orientation: f64,
}

fn render(spec: &DomainSpec, blobs: &[Blob], tau: f64, out: &mut [f64]) {
    let s = spec.blob_size;
    for b in blobs {
        let c = b.trajectory.center_at(tau);
        let stretch = (1.0 + b.drift * tau).max(0.2);
        let (sr, sc) = (stretch, 1.0 / stretch);
        for r in 0..spec.height {
            for col in 0..spec.width {
                let dr = (r as f64 - c[0]) / sr;
                let dc = (col as f64 - c[1]) / sc;
                let v = match spec.blob_shape {
                    BlobShape::Gaussian => (-0.5 * (dr * dr + dc * dc) / (s * s)).exp(),
                    BlobShape::Ring => {
                        let rho = (dr * dr + dc * dc).sqrt();
                        let w = ring_width(s);
                        (-0.5 * ((rho - s) / w).powi(2)).exp()
                    }
                    BlobShape::Bar => {
                        let (sin, cos) = b.orientation.sin_cos();
                        let u = dr * cos + dc * sin;
                        let v = -dr * sin + dc * cos;
                        (-0.5 * ((u / (BAR_LONG * s)).powi(2) + (v / (BAR_SHORT * s)).powi(2))).exp()
                    }
                };
                out[r * spec.width + col] += b.amplitude * v;
            }
        }
    }
}

fn generate_window(spec: &DomainSpec, window_len: usize, seed: u64, index: u64) -> Result<FrameSequence> {
    let mut kin = ChaCha8Rng::seed_from_u64(derive_seed(seed, index, STREAM_KINEMATICS));
    let mut app = ChaCha8Rng::seed_from_u64(derive_seed(seed, index, STREAM_APPEARANCE));
    let mut timing = ChaCha8Rng::seed_from_u64(derive_seed(seed, index, STREAM_TIMING));

    let span = window_len as f64 - 1.0 + spec.jitter;
    let blobs: Vec<Blob> = (0..spec.blob_count)
        .map(|_| {
            let trajectory = Trajectory::sample(spec, span, &mut kin);
            let amplitude = if spec.intensity_max > spec.intensity_min {
                app.gen_range(spec.intensity_min..=spec.intensity_max)
            } else {
                spec.intensity_min
            };
            let sign = if app.gen_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                trajectory,
                amplitude,
                drift: sign * spec.deformation_rate,
                orientation: app.gen_range(0.0..PI),
            }
        })
        .collect();

    let offset: f64 = timing.gen_range(0.0..100.0);
    let taus: Vec<f64> = (0..window_len)
        .map(|k| {
            let j = if spec.jitter > 0.0 {
                timing.gen_range(-spec.jitter..spec.jitter)
            } else {
                0.0
            };
            k as f64 + j
        })
        .collect();

    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("valid sigma"));
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut data = Vec::with_capacity(window_len * h * w * ch);
    let mut plane = vec![0.0; h * w];
    for &tau in &taus {
        plane.iter_mut().for_each(|v| *v = 0.0);
        render(spec, &blobs, tau, &mut plane);
        for &v in &plane {
            let mut v = v;
            if let Some(n) = &noise {
                v += n.sample(&mut app);
            }
            let v = v.clamp(0.0, 1.0);
            let v = if v < spec.sparsity_threshold { 0.0 } else { v };
            for _ in 0..ch {
                data.push(v as f32);
            }
        }
    }
    let frames = Tensor::new(&[window_len, h, w, ch], data)?;
    let timestamps = taus.iter().map(|t| (offset + t) / spec.rate).collect();
    let centers = taus
        .iter()
        .map(|&t| blobs.iter().map(|b| b.trajectory.center_at(t)).collect())
        .collect();
    let seq = FrameSequence {
        frames,
        timestamps,
        centers: Some(centers),
    };
    seq.validate()?;
    Ok(seq)
}

/// `windows` sequences of `window_len` frames; window `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &DomainSpec, windows: usize, window_len: usize, seed: u64) -> Result<Vec<FrameSequence>> {
    spec.validate()?;
    if window_len < 2 {
        return Err(Error::config(format!("window length must be at least 2, got {window_len}")));
    }
    let extent = 2.0 * blob_extent(spec);
    if extent >= spec.height.min(spec.width) as f64 {
        return Err(Error::config(format!(
            "blob extent {extent:.1} px does not fit a {}x{} frame",
            spec.height, spec.width
        )));
    }
    (0..windows)
        .into_par_iter()
        .map(|i| generate_window(spec, window_len, seed, i as u64))
        .collect()
}
