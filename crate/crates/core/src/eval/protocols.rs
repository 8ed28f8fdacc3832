use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::bench::{mask_windows, run_benchmark, BenchmarkReport, ImputerResult, MaskConfig, MetricSummary};
use crate::baselines::{Imputer, LocfImputer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, serialize_db, summarize, MetricConfig};
use crate::model::{ImputeOptions, Model, ModelImputer};
use crate::numerics::Tensor;
use crate::odesolve::{SolveTelemetry, SolverConfig};
use crate::synthdata::{masked_truth, FrameSequence, IntermittentSequence, PolarCalibration};

/// Model quality on an unseen domain next to its in-domain reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub unseen: ImputerResult,
    pub reference: ImputerResult,
    pub locf_unseen: ImputerResult,
    /// Unseen-domain model SSIM minus LOCF SSIM on the same masks.
    #[serde(serialize_with = "serialize_db")]
    pub ssim_delta_vs_locf: f64,
    /// In-domain SSIM minus unseen-domain SSIM.
    #[serde(serialize_with = "serialize_db")]
    pub degradation: f64,
    pub below_locf: bool,
}

fn check_shape(model: &Model, data: &[FrameSequence], what: &str) -> Result<()> {
    let want = (model.config.height, model.config.width, model.config.channels);
    match data.iter().find(|w| w.frame_shape() != want) {
        Some(w) => Err(Error::data(format!(
            "{what} frames are {:?}, the model expects {want:?}",
            w.frame_shape()
        ))),
        None => Ok(()),
    }
}

/// Evaluates `model` on `unseen` without retraining, alongside its score on
/// `reference` and LOCF on `unseen`; all runs share `mask_cfg`.
pub fn run_zero_shot(
    model: &Model,
    unseen: &[FrameSequence],
    reference: &[FrameSequence],
    mask_cfg: &MaskConfig,
    metric: &MetricConfig,
    cal: &PolarCalibration,
    options: &ImputeOptions,
) -> Result<ZeroShotReport> {
    check_shape(model, unseen, "unseen-domain")?;
    check_shape(model, reference, "reference-domain")?;
    let imputer = ModelImputer {
        model: std::sync::Arc::new(model.clone()),
        options: options.clone(),
    };
    let mut b = run_benchmark(&[&imputer, &LocfImputer], unseen, mask_cfg, metric, cal)?.rows.into_iter();
    let (unseen_row, locf_row) = (b.next().unwrap(), b.next().unwrap());
    let reference_row = run_benchmark(&[&imputer], reference, mask_cfg, metric, cal)?.rows.remove(0);
    let delta = unseen_row.metrics.ssim - locf_row.metrics.ssim;
    Ok(ZeroShotReport {
        ssim_delta_vs_locf: delta,
        degradation: reference_row.metrics.ssim - unseen_row.metrics.ssim,
        below_locf: !(delta > 0.0),
        unseen: unseen_row,
        reference: reference_row,
        locf_unseen: locf_row,
    })
}

/// Quality and cost of model inference at one solver tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElasticityRow {
    pub tolerance: f64,
    pub metrics: MetricSummary,
    pub telemetry: SolveTelemetry,
    /// Omitted when timing is disabled, so reports stay reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElasticityReport {
    pub mask: MaskConfig,
    pub rows: Vec<ElasticityRow>,
}

/// Re-runs inference at each adaptive tolerance on identical masks.
pub fn run_elasticity(
    model: &Model,
    dataset: &[FrameSequence],
    tolerances: &[f64],
    mask_cfg: &MaskConfig,
    metric: &MetricConfig,
    timed: bool,
) -> Result<ElasticityReport> {
    check_shape(model, dataset, "dataset")?;
    if let Some(t) = tolerances.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::config(format!("tolerance must be positive and finite, got {t}")));
    }
    let masks = mask_windows(dataset, mask_cfg)?;
    let mut rows = Vec::with_capacity(tolerances.len());
    for &tol in tolerances {
        let options = ImputeOptions {
            solver: Some(SolverConfig::adaptive(tol)),
            reverse_order: false,
        };
        let start = Instant::now();
        let outs: Vec<_> = masks
            .par_iter()
            .map(|m| model.impute(m, &options))
            .collect::<Result<Vec<_>>>()?;
        let wall = start.elapsed().as_secs_f64();
        let mut telemetry = SolveTelemetry::default();
        let mut frames = Vec::new();
        for ((w, m), out) in dataset.iter().zip(&masks).zip(&outs) {
            telemetry += out.telemetry;
            frames.extend(evaluate(&out.frames, &masked_truth(w, m), &m.masked_indices, metric)?.frames);
        }
        let count = frames.len();
        let r = summarize(frames, metric);
        rows.push(ElasticityRow {
            tolerance: tol,
            metrics: MetricSummary {
                mse: r.mse,
                ssim: r.ssim,
                psnr: r.psnr,
                frames: count,
            },
            telemetry,
            wall_seconds: timed.then_some(wall),
        });
    }
    Ok(ElasticityReport {
        mask: mask_cfg.clone(),
        rows,
    })
}

/// Writes an `[H, W, 2]` flow field as `<stem>.csv` (`x,y,dx,dy`, one row per
/// pixel) and `<stem>.pgm` (8-bit magnitude scaled to the field's maximum).
pub fn write_flow(flow: &Tensor<f32>, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let (h, w) = match flow.shape() {
        [h, w, 2] => (*h, *w),
        s => return Err(Error::shape("write_flow", s, &[0, 0, 2])),
    };
    let d = flow.data();
    let mut csv = String::from("x,y,dx,dy\n");
    let mut mags = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (d[(y * w + x) * 2], d[(y * w + x) * 2 + 1]);
            csv.push_str(&format!("{x},{y},{dx},{dy}\n"));
            mags.push((dx as f64).hypot(dy as f64));
        }
    }
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let csv_path = dir.join(format!("{stem}.csv"));
    let pgm_path = dir.join(format!("{stem}.pgm"));
    let io = |p: &Path, e: std::io::Error| Error::data(format!("cannot write {}: {e}", p.display()));
    fs::write(&csv_path, csv).map_err(|e| io(&csv_path, e))?;
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(mags.iter().map(|&m| if peak > 0.0 { (m / peak * 255.0).round() as u8 } else { 0 }));
    fs::File::create(&pgm_path)
        .and_then(|mut f| f.write_all(&pgm))
        .map_err(|e| io(&pgm_path, e))?;
    Ok((csv_path, pgm_path))
}

/// Imputes `seq` and writes the decoder flow of every generated frame.
pub fn dump_flow(model: &Model, seq: &IntermittentSequence, options: &ImputeOptions, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
    let out = model.impute(seq, options)?;
    let mut paths = Vec::new();
    for (q, flow) in out.flows.iter().enumerate() {
        if let Some(f) = flow {
            let (csv, pgm) = write_flow(f, dir, &format!("flow_{q:03}"))?;
            paths.push(csv);
            paths.push(pgm);
        }
    }
    Ok(paths)
}

/// Mean flow magnitude inside and outside the half-open pixel box
/// `[r0, r1) x [c0, c1)`.
pub fn flow_magnitude_split(flow: &Tensor<f32>, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<(f64, f64)> {
    let (h, w) = match flow.shape() {
        [h, w, 2] => (*h, *w),
        s => return Err(Error::shape("flow_magnitude_split", s, &[0, 0, 2])),
    };
    let d = flow.data();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let m = (d[(y * w + x) * 2] as f64).hypot(d[(y * w + x) * 2 + 1] as f64);
            if (r0..r1).contains(&y) && (c0..c1).contains(&x) {
                si += m;
                ni += 1;
            } else {
                so += m;
                no += 1;
            }
        }
    }
    Ok((si / ni.max(1) as f64, so / no.max(1) as f64))
}

/// A benchmark over the model and a given list of baselines.
pub fn run_with_model(
    model: Option<&Model>,
    baselines: &[Box<dyn Imputer>],
    dataset: &[FrameSequence],
    mask_cfg: &MaskConfig,
    metric: &MetricConfig,
    cal: &PolarCalibration,
) -> Result<BenchmarkReport> {
    let wrapped = model.map(|m| ModelImputer {
        model: std::sync::Arc::new(m.clone()),
        options: ImputeOptions::default(),
    });
    let mut refs: Vec<&dyn Imputer> = baselines.iter().map(|b| b.as_ref()).collect();
    if let Some(w) = &wrapped {
        check_shape(&w.model, dataset, "dataset")?;
        refs.push(w);
    }
    run_benchmark(&refs, dataset, mask_cfg, metric, cal)
}
