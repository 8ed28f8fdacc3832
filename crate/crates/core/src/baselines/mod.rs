//! Classical imputers behind one interface shared with the learned model.

mod em;
mod flow;
mod ot;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::IntermittentSequence;

pub use em::{fit_gmm, EmImputer, GmmFit, GmmParams};
pub use flow::{horn_schunck, OpticalFlowImputer};
pub use ot::{displacement_interpolate, sinkhorn, OtImputer, TransportPlan};

/// Fills the query times of an intermittent sequence, in query order.
pub trait Imputer: Send + Sync {
    fn name(&self) -> String;
    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>>;
}

/// Observed neighbours of a time point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bracket {
    /// Coincides with observation `i`.
    Exact(usize),
    Between { prev: usize, next: usize, tau: f64 },
    BeforeFirst,
    AfterLast,
}

pub fn bracket(times: &[f64], m: f64) -> Bracket {
    if let Some(i) = times.iter().position(|&t| t == m) {
        return Bracket::Exact(i);
    }
    let next = times.partition_point(|&t| t < m);
    if next == 0 {
        Bracket::BeforeFirst
    } else if next == times.len() {
        Bracket::AfterLast
    } else {
        let prev = next - 1;
        Bracket::Between {
            prev,
            next,
            tau: (m - times[prev]) / (times[next] - times[prev]),
        }
    }
}

fn require_observed(seq: &IntermittentSequence) -> Result<()> {
    if seq.observed_frames.is_empty() {
        return Err(Error::data("imputation needs at least one observed frame"));
    }
    if seq.observed_frames.len() != seq.observed_times.len() {
        return Err(Error::data(format!(
            "{} observed frames but {} observed times",
            seq.observed_frames.len(),
            seq.observed_times.len()
        )));
    }
    Ok(())
}

/// LOCF with the leading-gap fallback.
fn locf_frame(seq: &IntermittentSequence, m: f64) -> Tensor<f32> {
    let i = match bracket(&seq.observed_times, m) {
        Bracket::Exact(i) => i,
        Bracket::Between { prev, .. } => prev,
        Bracket::BeforeFirst => 0,
        Bracket::AfterLast => seq.observed_times.len() - 1,
    };
    seq.observed_frames[i].clone()
}

/// Per-pixel mean of the observed frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanImputer;

impl Imputer for MeanImputer {
    fn name(&self) -> String {
        "mean".into()
    }

    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>> {
        require_observed(seq)?;
        let mut acc = vec![0.0f64; seq.observed_frames[0].len()];
        for f in &seq.observed_frames {
            if f.shape() != seq.observed_frames[0].shape() {
                return Err(Error::shape("mean imputer", seq.observed_frames[0].shape(), f.shape()));
            }
            for (a, &v) in acc.iter_mut().zip(f.data()) {
                *a += v as f64;
            }
        }
        let n = seq.observed_frames.len() as f64;
        let mean = Tensor::new(
            seq.observed_frames[0].shape(),
            acc.iter().map(|a| (a / n) as f32).collect(),
        )?;
        Ok(seq
            .query_times
            .iter()
            .map(|&m| match bracket(&seq.observed_times, m) {
                Bracket::Exact(i) => seq.observed_frames[i].clone(),
                _ => mean.clone(),
            })
            .collect())
    }
}

/// Last observation carried forward; gaps before the first observation copy it.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocfImputer;

impl Imputer for LocfImputer {
    fn name(&self) -> String {
        "locf".into()
    }

    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>> {
        require_observed(seq)?;
        Ok(seq.query_times.iter().map(|&m| locf_frame(seq, m)).collect())
    }
}

/// Shared driver for imputers that need both bracketing observations.
fn impute_bracketed(
    seq: &IntermittentSequence,
    mut between: impl FnMut(&Tensor<f32>, &Tensor<f32>, f64) -> Result<Tensor<f32>>,
) -> Result<Vec<Tensor<f32>>> {
    require_observed(seq)?;
    seq.query_times
        .iter()
        .map(|&m| match bracket(&seq.observed_times, m) {
            Bracket::Between { prev, next, tau } => {
                between(&seq.observed_frames[prev], &seq.observed_frames[next], tau)
            }
            _ => Ok(locf_frame(seq, m)),
        })
        .collect()
}

/// Parses a comma-separated baseline list (`mean,locf,em,of,ot`).
pub fn parse_baselines(list: &str, seed: u64) -> Result<Vec<Box<dyn Imputer>>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| -> Result<Box<dyn Imputer>> {
            Ok(match name {
                "mean" => Box::new(MeanImputer),
                "locf" => Box::new(LocfImputer),
                "em" => Box::new(EmImputer { seed, ..EmImputer::default() }),
                "of" => Box::new(OpticalFlowImputer::default()),
                "ot" => Box::new(OtImputer::default()),
                other => return Err(Error::config(format!("unknown baseline `{other}`"))),
            })
        })
        .collect()
}
