use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::net::{LatentDynamics, Net};
use super::pipeline::{decode, frame_var, loss, Known, Request};
use super::{Model, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::odesolve::SolverConfig;
use crate::synthdata::{derive_seed, mask, FrameSequence, IntermittentSequence};

const STREAM_INIT: u64 = 11;
const STREAM_MASK: u64 = 12;
const STREAM_SHUFFLE: u64 = 13;

/// Loss of one masked window through `net`.
pub(crate) fn window_loss_on<T: Real>(
    net: &Net<T>,
    window: &FrameSequence,
    inter: &IntermittentSequence,
    solver: &SolverConfig,
) -> Result<Var<T>> {
    if inter.masked_indices.len() != inter.query_times.len() || inter.observed_indices.len() != inter.observed_times.len() {
        return Err(Error::contract("training needs a mask cut from a complete window"));
    }
    let frames = inter.observed_frames.iter().map(frame_var::<T>).collect::<Result<Vec<_>>>()?;
    let req = Request {
        frames: &frames,
        times: &inter.observed_times,
        queries: &inter.query_times,
        mode: inter.mode,
        reverse_order: false,
        solver,
    };
    let head = |h: &Var<T>, gap: f64| net.head(h, gap);
    let decoded = decode(net, &LatentDynamics(net), &head, &req)?;
    if decoded.generated.is_empty() {
        return Err(Error::contract("masked window has nothing to impute"));
    }
    let truth_at = |k: Known| -> Result<Var<T>> {
        let idx = match k {
            Known::Observed(i) => inter.observed_indices[i],
            Known::Query(q) => inter.masked_indices[q],
        };
        frame_var(&window.frame(idx))
    };
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut res_pred = Vec::new();
    let mut res_truth = Vec::new();
    for g in &decoded.generated {
        let t = truth_at(Known::Query(g.query))?;
        res_truth.push(t.sub(&truth_at(g.pred)?)?);
        truth.push(t);
        pred.push(g.frame.clone());
        res_pred.push(g.components.residual.clone());
    }
    loss(&pred, &truth, &res_pred, &res_truth, &net.cfg)
}

/// `f32` loss of one masked window under `model`.
pub fn window_loss(model: &Model, window: &FrameSequence, inter: &IntermittentSequence, solver: &SolverConfig) -> Result<f64> {
    let net = Net::bind(&model.config, &model.params, None)?;
    Ok(window_loss_on(&net, window, inter, solver)?.value().item() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Adam state over a model's parameters.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    steps: i32,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let zeros = |m: &Model| m.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            m: zeros(&model),
            v: zeros(&model),
            model,
            config,
            steps: 0,
        })
    }

    /// Loss and per-tensor gradients of one masked window.
    pub fn window_gradient(&self, window: &FrameSequence, inter: &IntermittentSequence) -> Result<(f64, Vec<Tensor<f32>>)> {
        let tape = Tape::new();
        let net = Net::bind(&self.model.config, &self.model.params, Some(&tape))?;
        let loss = window_loss_on(&net, window, inter, &self.config.solver)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {value}")));
        }
        let grads = tape.backward(&loss)?;
        Ok((value, net.vars.iter().map(|v| grads.get_or_zeros(v)).collect()))
    }

    /// One optimizer step on the mean gradient of `batch`; returns the mean loss.
    pub fn step(&mut self, batch: &[(&FrameSequence, IntermittentSequence)], learning_rate: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> =
            batch.par_iter().map(|(w, inter)| self.window_gradient(w, inter)).collect();
        let n = batch.len() as f64;
        let mut total = 0.0;
        let mut sum: Vec<Vec<f64>> = self.model.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for r in results {
            let (l, grads) = r?;
            total += l;
            for (acc, g) in sum.iter_mut().zip(&grads) {
                for (a, &x) in acc.iter_mut().zip(g.data()) {
                    *a += x as f64;
                }
            }
        }
        let norm = sum.iter().flatten().map(|g| (g / n) * (g / n)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for (k, acc) in sum.iter().enumerate() {
            let p = self.model.params.tensors[k].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..acc.len() {
                let g = acc[i] / n * clip;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                p[i] = (p[i] as f64 - learning_rate * (mi / c1) / ((vi / c2).sqrt() + eps)) as f32;
            }
        }
        Ok(total / n)
    }
}

/// Trains a freshly initialized model; see [`train_with`].
pub fn train(dataset: &[FrameSequence], mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, mcfg, tcfg, |_| {})
}

/// Masks each window afresh every epoch, shuffles, and steps Adam per batch
/// with the learning rate decayed geometrically per epoch.
pub fn train_with(
    dataset: &[FrameSequence],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    let model = Model::new(mcfg.clone(), derive_seed(tcfg.seed, 0, STREAM_INIT))?;
    for w in dataset {
        let (h, wd, c) = w.frame_shape();
        if (h, wd, c) != (mcfg.height, mcfg.width, mcfg.channels) {
            return Err(Error::data(format!(
                "window frames are {h}x{wd}x{c}, model expects {}x{}x{}",
                mcfg.height, mcfg.width, mcfg.channels
            )));
        }
    }
    let mut trainer = Trainer::new(model, tcfg.clone())?;
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.learning_rate * tcfg.decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, epoch as u64, STREAM_SHUFFLE)));
        let mut total = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let seed = derive_seed(tcfg.seed, (epoch * dataset.len() + i) as u64, STREAM_MASK);
                    let mode = tcfg.mode.mask_mode(i + epoch);
                    Ok((&dataset[i], mask(&dataset[i], tcfg.drop_rate, mode, seed)?))
                })
                .collect::<Result<Vec<_>>>()?;
            total += trainer.step(&batch, lr)? * chunk.len() as f64;
        }
        let stats = EpochStats {
            epoch,
            loss: total / dataset.len() as f64,
            learning_rate: lr,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history,
    })
}
