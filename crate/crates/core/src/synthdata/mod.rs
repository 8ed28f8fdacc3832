//! Synthetic multi-domain heatmap sequences, masking protocols and the
//! on-disk sequence container.

mod container;
mod generate;
mod mask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use container::{decode, encode, load, load_dataset, save, save_dataset, DatasetManifest, MAGIC};
pub(crate) use generate::derive_seed;
pub use generate::{generate, Trajectory};
pub use mask::{mask, mask_indices};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobShape {
    Gaussian,
    Ring,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryFamily {
    Linear,
    Circular,
    Bounce,
}

/// Pixel-to-polar calibration: rows map linearly onto range, columns onto angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolarCalibration {
    pub range_min: f64,
    pub range_max: f64,
    /// Degrees.
    pub angle_min: f64,
    pub angle_max: f64,
}

impl Default for PolarCalibration {
    fn default() -> Self {
        Self {
            range_min: 0.1,
            range_max: 3.0,
            angle_min: -60.0,
            angle_max: 60.0,
        }
    }
}

/// Appearance and kinematics of one sensing domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Frames per second.
    pub rate: f64,
    pub blob_count: usize,
    pub blob_shape: BlobShape,
    /// Gaussian sigma, ring radius or bar half-width scale, in pixels.
    pub blob_size: f64,
    pub trajectory: TrajectoryFamily,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Fixed heading in radians (row axis = 0); random when absent.
    pub heading: Option<f64>,
    /// Relative change of the blob covariance per frame.
    pub deformation_rate: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Background white-noise standard deviation.
    pub noise: f64,
    /// Values below this are zeroed after noise and clipping.
    pub sparsity_threshold: f64,
    /// Timestamp jitter as a fraction of the frame period.
    pub jitter: f64,
    pub calibration: PolarCalibration,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::domain_a()
    }
}

impl DomainSpec {
    /// Gaussian blob, linear motion, 40 fps.
    pub fn domain_a() -> Self {
        Self {
            name: "domain-a".into(),
            height: 32,
            width: 32,
            channels: 1,
            rate: 40.0,
            blob_count: 1,
            blob_shape: BlobShape::Gaussian,
            blob_size: 2.0,
            trajectory: TrajectoryFamily::Linear,
            speed_min: 0.8,
            speed_max: 1.6,
            heading: None,
            deformation_rate: 0.01,
            intensity_min: 0.7,
            intensity_max: 1.0,
            noise: 0.01,
            sparsity_threshold: 0.03,
            jitter: 0.2,
            calibration: PolarCalibration::default(),
        }
    }

    /// Ring blob, circular motion, extra noise, 20 fps.
    pub fn domain_b() -> Self {
        Self {
            name: "domain-b".into(),
            rate: 20.0,
            blob_shape: BlobShape::Ring,
            blob_size: 3.0,
            trajectory: TrajectoryFamily::Circular,
            noise: 0.02,
            sparsity_threshold: 0.05,
            ..Self::domain_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("domain frame extents must be positive"));
        }
        if !(self.rate > 0.0) {
            return Err(Error::config(format!("domain rate must be positive, got {}", self.rate)));
        }
        if self.noise < 0.0 || self.sparsity_threshold < 0.0 {
            return Err(Error::config("domain noise and sparsity threshold must be nonnegative"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config(format!("timestamp jitter must be in [0, 0.5), got {}", self.jitter)));
        }
        if self.speed_min < 0.0 || self.speed_max < self.speed_min {
            return Err(Error::config("domain speed range is invalid"));
        }
        if !(self.blob_size > 0.0) || self.blob_count == 0 {
            return Err(Error::config("domain needs at least one blob of positive size"));
        }
        if self.intensity_min < 0.0 || self.intensity_max > 1.0 || self.intensity_max < self.intensity_min {
            return Err(Error::config("blob intensities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Timestamped `[T, H, W, C]` heatmap sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor<f32>,
    pub timestamps: Vec<f64>,
    /// Generator ground truth: per frame, per blob `[row, col]`.
    pub centers: Option<Vec<Vec<[f64; 2]>>>,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>, timestamps: Vec<f64>) -> Result<Self> {
        let seq = Self {
            frames,
            timestamps,
            centers: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.ndim() != 4 {
            return Err(Error::data(format!(
                "frame tensor must be [T,H,W,C], got {:?}",
                self.frames.shape()
            )));
        }
        if self.frames.shape()[0] != self.timestamps.len() {
            return Err(Error::data(format!(
                "{} frames but {} timestamps",
                self.frames.shape()[0],
                self.timestamps.len()
            )));
        }
        if !self.timestamps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::data("timestamps must be strictly increasing"));
        }
        if let Some(c) = &self.centers {
            if c.len() != self.len() {
                return Err(Error::data("blob center metadata does not match frame count"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// `(H, W, C)`
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    /// Frame `i` as `[H, W, C]`.
    pub fn frame(&self, i: usize) -> Tensor<f32> {
        self.frames.index_first(i).expect("frame index in range")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(alias = "interp")]
    Interpolation,
    #[serde(alias = "extrap")]
    Extrapolation,
    #[serde(alias = "retro")]
    Retrospective,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" | "interpolation" => Ok(Self::Interpolation),
            "extrap" | "extrapolation" => Ok(Self::Extrapolation),
            "retro" | "retrospective" => Ok(Self::Retrospective),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Interpolation => "interp",
            Self::Extrapolation => "extrap",
            Self::Retrospective => "retro",
        })
    }
}

/// Observed frames with their times plus the times to impute.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermittentSequence {
    pub observed_times: Vec<f64>,
    /// Each `[H, W, C]`.
    pub observed_frames: Vec<Tensor<f32>>,
    pub query_times: Vec<f64>,
    pub mode: Mode,
    /// Source-window indices, when cut from a complete window.
    pub observed_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
}

impl IntermittentSequence {
    pub fn frame_shape(&self) -> Option<(usize, usize, usize)> {
        self.observed_frames.first().map(|f| {
            let s = f.shape();
            (s[0], s[1], s[2])
        })
    }

    /// Checks the query times against the declared mode.
    pub fn check_mode(&self) -> Result<()> {
        let (Some(&first), Some(&last)) = (self.observed_times.first(), self.observed_times.last()) else {
            return Err(Error::data("no observed frames"));
        };
        for &m in &self.query_times {
            let ok = match self.mode {
                Mode::Interpolation => first < m && m < last,
                Mode::Extrapolation => m > last,
                Mode::Retrospective => m < first,
            };
            if !ok {
                return Err(Error::contract(format!(
                    "query time {m} violates {} mode for observations in [{first}, {last}]",
                    self.mode
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth for the masked frames of a window, in query order.
pub fn masked_truth(seq: &FrameSequence, inter: &IntermittentSequence) -> Vec<Tensor<f32>> {
    inter.masked_indices.iter().map(|&i| seq.frame(i)).collect()
}
