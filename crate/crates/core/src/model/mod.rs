//! Continuous-time encoder-decoder imputer: ConvGRU consolidation with
//! ODE-evolved latents, a flow/mask/residual decoder head and frame composition.

mod config;
mod net;
mod params;
mod pipeline;
mod train;

use std::fs;
use std::path::Path;
use std::sync::Arc;

pub use config::{ModelConfig, TrainConfig, TrainMode};
pub use net::{compose, DecodeComponents};
pub use params::{fnv1a, ParamStore, MODEL_MAGIC};
pub use pipeline::{frame_tensor, frame_var, loss, shrinkage_loss, time_unit, Known};
pub use train::{train, train_with, window_loss, EpochStats, TrainOutcome, Trainer};

use crate::baselines::Imputer;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::odesolve::{SolveTelemetry, SolverConfig};
use crate::synthdata::IntermittentSequence;
use net::{LatentDynamics, Net};
use pipeline::{decode, Request};

/// A configuration together with its trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

/// Inference-time switches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImputeOptions {
    /// Overrides the model's stored solver.
    pub solver: Option<SolverConfig>,
    /// Interpolation only: generate from the latest gap backwards, each frame
    /// composed from the following known frame.
    pub reverse_order: bool,
}

/// Imputed frames in query order, with the decoder's flow fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    /// Each `[H, W, C]`.
    pub frames: Vec<Tensor<f32>>,
    /// `[H, W, 2]` flow per query (column, row displacement); `None` for observed times.
    pub flows: Vec<Option<Tensor<f32>>>,
    pub telemetry: SolveTelemetry,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        params::encode(&self.config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, params) = params::decode(bytes)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// FNV-1a of the serialized container.
    pub fn checksum(&self) -> Result<u64> {
        Ok(fnv1a(&self.to_bytes()?))
    }

    fn check_frames(&self, frames: &[Tensor<f32>]) -> Result<()> {
        let want = [self.config.height, self.config.width, self.config.channels];
        for f in frames {
            if f.shape() != want {
                return Err(Error::data(format!(
                    "frame shape {:?} does not match the model's {want:?}",
                    f.shape()
                )));
            }
        }
        Ok(())
    }

    /// Encodes the observations and decodes every query time per the sequence's mode.
    pub fn impute(&self, seq: &IntermittentSequence, opts: &ImputeOptions) -> Result<Imputation> {
        self.impute_generic::<f32>(seq, opts)
    }

    pub(crate) fn impute_generic<T: Real>(&self, seq: &IntermittentSequence, opts: &ImputeOptions) -> Result<Imputation> {
        self.check_frames(&seq.observed_frames)?;
        let net = Net::bind(&self.config, &self.params.cast::<T>(), None)?;
        let frames = seq.observed_frames.iter().map(frame_var::<T>).collect::<Result<Vec<_>>>()?;
        let solver = opts.solver.clone().unwrap_or_else(|| self.config.solver.clone());
        let req = Request {
            frames: &frames,
            times: &seq.observed_times,
            queries: &seq.query_times,
            mode: seq.mode,
            reverse_order: opts.reverse_order,
            solver: &solver,
        };
        let head = |h: &Var<T>, gap: f64| net.head(h, gap);
        let decoded = decode(&net, &LatentDynamics(&net), &head, &req)?;
        let mut frames_out = Vec::with_capacity(seq.query_times.len());
        let mut flows = Vec::with_capacity(seq.query_times.len());
        for (q, &m) in seq.query_times.iter().enumerate() {
            if let Some(i) = decoded.exact[q] {
                frames_out.push(seq.observed_frames[i].clone());
                flows.push(None);
                continue;
            }
            let g = decoded
                .generated
                .iter()
                .find(|g| seq.query_times[g.query] == m)
                .expect("every open query is generated");
            let frame = frame_tensor(&g.frame)?;
            if !frame.all_finite() {
                return Err(Error::Numeric(format!("non-finite imputed frame at t={m}")));
            }
            frames_out.push(frame);
            flows.push(Some(frame_tensor(&g.components.flow)?));
        }
        Ok(Imputation {
            frames: frames_out,
            flows,
            telemetry: decoded.telemetry,
        })
    }

    /// Gradient of the loss on one masked window with respect to every parameter, in `f64`.
    pub fn loss_and_gradient_f64(
        &self,
        window: &crate::synthdata::FrameSequence,
        inter: &IntermittentSequence,
        solver: &SolverConfig,
        flat: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let params = self.params.cast::<f64>().unflatten(flat)?;
        let tape = Tape::new();
        let net = Net::bind(&self.config, &params, Some(&tape))?;
        let loss = train::window_loss_on(&net, window, inter, solver)?;
        let grads = tape.backward(&loss)?;
        let g = net.vars.iter().flat_map(|v| grads.get_or_zeros(v).into_data()).collect();
        Ok((loss.value().item(), g))
    }

    /// Loss on one masked window with parameters taken from `flat`, in `f64`.
    pub fn loss_f64(
        &self,
        window: &crate::synthdata::FrameSequence,
        inter: &IntermittentSequence,
        solver: &SolverConfig,
        flat: &[f64],
    ) -> Result<f64> {
        let params = self.params.cast::<f64>().unflatten(flat)?;
        let net = Net::bind(&self.config, &params, None)?;
        Ok(train::window_loss_on(&net, window, inter, solver)?.value().item())
    }
}

/// The model behind the shared imputer interface.
#[derive(Clone, Debug)]
pub struct ModelImputer {
    pub model: Arc<Model>,
    pub options: ImputeOptions,
}

impl Imputer for ModelImputer {
    fn name(&self) -> String {
        "model".into()
    }

    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>> {
        Ok(self.model.impute(seq, &self.options)?.frames)
    }
}
