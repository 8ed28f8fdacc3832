use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tracking::{pixel_to_polar, track_blob, tracking_error, Polar, TrackingResult};
use crate::baselines::Imputer;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, serialize_db, summarize, FrameMetrics, MetricConfig};
use crate::model::fnv1a;
use crate::numerics::Tensor;
use crate::synthdata::{derive_seed, mask, masked_truth, FrameSequence, IntermittentSequence, Mode, PolarCalibration};

const STREAM_EVAL_MASK: u64 = 21;

/// Masking protocol applied to evaluation windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub drop_rate: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            drop_rate: 0.5,
            mode: Mode::Interpolation,
            seed: 0,
        }
    }
}

/// Masks every window with a per-window seed derived from `cfg.seed`.
pub fn mask_windows(dataset: &[FrameSequence], cfg: &MaskConfig) -> Result<Vec<IntermittentSequence>> {
    dataset
        .iter()
        .enumerate()
        .map(|(i, w)| mask(w, cfg.drop_rate, cfg.mode, derive_seed(cfg.seed, i as u64, STREAM_EVAL_MASK)))
        .collect()
}

/// FNV-1a over the mode and observed/masked index sets of every window.
pub fn mask_hash(masks: &[IntermittentSequence]) -> u64 {
    let mut bytes = Vec::new();
    for m in masks {
        bytes.extend_from_slice(m.mode.to_string().as_bytes());
        for list in [&m.observed_indices, &m.masked_indices] {
            bytes.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for &i in list {
                bytes.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
    }
    fnv1a(&bytes)
}

/// Aggregate quality over every imputed frame of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    #[serde(serialize_with = "serialize_db")]
    pub mse: f64,
    #[serde(serialize_with = "serialize_db")]
    pub ssim: f64,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowFailure {
    pub window: usize,
    pub error: String,
}

/// One imputer's results over the benchmark windows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImputerResult {
    pub name: String,
    pub metrics: MetricSummary,
    /// Mean SSIM of each window, `None` where the imputer failed.
    pub window_ssim: Vec<Option<f64>>,
    pub tracking: TrackingResult,
    pub failures: Vec<WindowFailure>,
    pub mask_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub mask: MaskConfig,
    pub mask_hash: String,
    pub windows: usize,
    pub rows: Vec<ImputerResult>,
}

/// Ground-truth position of frame `t`: generator metadata when present,
/// otherwise the blob tracked on the true frame.
fn truth_position(w: &FrameSequence, t: usize, cal: &PolarCalibration) -> Result<Option<Polar>> {
    let (h, wd, _) = w.frame_shape();
    match &w.centers {
        Some(c) if !c[t].is_empty() => Ok(Some(pixel_to_polar(cal, h, wd, c[t][0][0], c[t][0][1]))),
        _ => track_blob(&w.frame(t), cal),
    }
}

struct WindowOutcome {
    frames: Vec<FrameMetrics>,
    errors: Vec<f64>,
    missed: usize,
}

fn score_window(
    w: &FrameSequence,
    inter: &IntermittentSequence,
    pred: &[Tensor<f32>],
    metric: &MetricConfig,
    cal: &PolarCalibration,
) -> Result<WindowOutcome> {
    let truth = masked_truth(w, inter);
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "imputer returned {} frames for {} queries",
            pred.len(),
            truth.len()
        )));
    }
    let report = evaluate(pred, &truth, &inter.masked_indices, metric)?;
    let mut errors = Vec::new();
    let mut missed = 0;
    for (p, &t) in pred.iter().zip(&inter.masked_indices) {
        match (track_blob(p, cal)?, truth_position(w, t, cal)?) {
            (Some(a), Some(g)) => errors.push(tracking_error(a.r, a.theta, g.r, g.theta)),
            (None, Some(_)) => missed += 1,
            (_, None) => {}
        }
    }
    Ok(WindowOutcome {
        frames: report.frames,
        errors,
        missed,
    })
}

fn run_one(
    imputer: &dyn Imputer,
    dataset: &[FrameSequence],
    masks: &[IntermittentSequence],
    metric: &MetricConfig,
    cal: &PolarCalibration,
) -> ImputerResult {
    let outcomes: Vec<Result<WindowOutcome>> = dataset
        .par_iter()
        .zip(masks.par_iter())
        .map(|(w, inter)| score_window(w, inter, &imputer.impute(inter)?, metric, cal))
        .collect();
    let mut frames = Vec::new();
    let mut errors = Vec::new();
    let mut missed = 0;
    let mut failures = Vec::new();
    let mut window_ssim = Vec::with_capacity(outcomes.len());
    for (window, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                window_ssim.push(Some(o.frames.iter().map(|f| f.ssim).sum::<f64>() / o.frames.len().max(1) as f64));
                frames.extend(o.frames);
                errors.extend(o.errors);
                missed += o.missed;
            }
            Err(e) => {
                window_ssim.push(None);
                failures.push(WindowFailure {
                    window,
                    error: e.to_string(),
                });
            }
        }
    }
    let count = frames.len();
    let summary = if count == 0 {
        MetricSummary {
            mse: f64::NAN,
            ssim: f64::NAN,
            psnr: f64::NAN,
            frames: 0,
        }
    } else {
        let r = summarize(frames, metric);
        MetricSummary {
            mse: r.mse,
            ssim: r.ssim,
            psnr: r.psnr,
            frames: count,
        }
    };
    ImputerResult {
        name: imputer.name(),
        metrics: summary,
        window_ssim,
        tracking: TrackingResult::from_errors(errors, missed),
        failures,
        mask_hash: format!("{:016x}", mask_hash(masks)),
    }
}

/// Scores every imputer on the same masks of `dataset`. Per-window imputer
/// failures are recorded in the row, not raised.
pub fn run_benchmark(
    imputers: &[&dyn Imputer],
    dataset: &[FrameSequence],
    mask_cfg: &MaskConfig,
    metric: &MetricConfig,
    cal: &PolarCalibration,
) -> Result<BenchmarkReport> {
    if dataset.is_empty() {
        return Err(Error::data("benchmark dataset is empty"));
    }
    let masks = mask_windows(dataset, mask_cfg)?;
    let hash = format!("{:016x}", mask_hash(&masks));
    let rows: Vec<ImputerResult> = imputers.iter().map(|imp| run_one(*imp, dataset, &masks, metric, cal)).collect();
    assert!(rows.iter().all(|r| r.mask_hash == hash), "imputers saw different masks");
    Ok(BenchmarkReport {
        mask: mask_cfg.clone(),
        mask_hash: hash,
        windows: dataset.len(),
        rows,
    })
}

impl BenchmarkReport {
    pub fn row(&self, name: &str) -> Option<&ImputerResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text comparison table.
    pub fn to_table(&self) -> String {
        let header = ["imputer", "MSE", "SSIM", "PSNR", "track median", "missed", "failed"];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    format!("{:.6}", r.metrics.mse),
                    format!("{:.4}", r.metrics.ssim),
                    format!("{:.2}", r.metrics.psnr),
                    format!("{:.4}", r.tracking.median),
                    r.tracking.missed.to_string(),
                    r.failures.len().to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header, &mut out);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        for row in &body {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        }
        out
    }
}
