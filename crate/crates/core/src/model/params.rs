//! Named parameter tensors, initialization and the NPFXM1 model container.
//!
//! Container layout, little-endian:
//!
//! ```text
//! "NPFXM1" | u32 config length | config JSON | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 data
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const MODEL_MAGIC: &[u8; 6] = b"NPFXM1";

#[derive(Clone, Copy, Debug)]
pub(crate) struct Slot {
    pub w: usize,
    pub b: usize,
}

/// Positions of each layer's weight and bias in the parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: Vec<Slot>,
    pub gru_gates: Slot,
    pub gru_candidate: Slot,
    pub dyn_in: Slot,
    pub dyn_out: Slot,
    pub head: Vec<Slot>,
}

/// Name and shape of every parameter, in storage order.
pub(crate) fn specs(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>)>, Layout) {
    let mut specs = Vec::new();
    let mut layer = |name: String, cout: usize, cin: usize, k: usize| -> Slot {
        let w = specs.len();
        specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        specs.push((format!("{name}.bias"), vec![cout, 1, 1]));
        Slot { w, b: w + 1 }
    };
    let (e, ch, hd, hc) = (cfg.embed_channels, cfg.latent_channels, cfg.dynamics_hidden, cfg.head_channels);
    let stages = cfg.stages().max(1);
    let embed = (0..stages)
        .map(|s| layer(format!("embed{s}"), e, if s == 0 { cfg.channels } else { e }, 3))
        .collect();
    let gru_gates = layer("gru.gates".into(), 2 * ch, ch + e, 3);
    let gru_candidate = layer("gru.candidate".into(), ch, ch + e, 3);
    let dyn_in = layer("dynamics.in".into(), hd, ch, 1);
    let dyn_out = layer("dynamics.out".into(), ch, hd, 1);
    let out = 3 + cfg.channels;
    let head = (0..stages)
        .map(|s| {
            let cin = if s == 0 { ch } else { hc };
            let cout = if s + 1 == stages { out } else { hc };
            layer(format!("head{s}"), cout, cin, 3)
        })
        .collect();
    let layout = Layout {
        embed,
        gru_gates,
        gru_candidate,
        dyn_in,
        dyn_out,
        head,
    };
    (specs, layout)
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Flattens every tensor into one vector, in storage order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.count() {
            return Err(Error::shape("unflatten", &[flat.len()], &[self.count()]));
        }
        let mut at = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let next = Tensor::new(t.shape(), flat[at..at + t.len()].to_vec());
                at += t.len();
                next
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            names: self.names.clone(),
            tensors,
        })
    }
}

/// Glorot-uniform weights, zero biases, a small dynamics output layer and a
/// positive composition-mask bias.
pub(crate) fn init(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let (specs, layout) = specs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: Vec<Tensor<f32>> = specs
        .iter()
        .map(|(name, shape)| {
            if name.ends_with(".bias") {
                return Tensor::zeros(shape);
            }
            let rf = shape[2] * shape[3];
            let bound = (6.0 / ((shape[0] + shape[1]) * rf) as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32)
        })
        .collect();
    tensors[layout.dyn_out.w].scale_inplace(0.1);
    let last = layout.head.last().expect("at least one head stage");
    tensors[last.b].data_mut()[2] = cfg.mask_bias_init as f32;
    ParamStore {
        names: specs.into_iter().map(|(n, _)| n).collect(),
        tensors,
    }
}

pub(crate) fn encode(cfg: &ModelConfig, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg)?;
    let mut buf = Vec::with_capacity(64 + json.len() + 4 * params.count());
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(format!(
                "truncated NPFXM1 container: expected {} bytes for {what} at offset {}, found {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>)> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(Error::data("not an NPFXM1 model container"));
    }
    let mut c = Cursor {
        bytes,
        pos: MODEL_MAGIC.len(),
    };
    let len = c.u32("config length")?;
    let cfg: ModelConfig =
        serde_json::from_slice(c.take(len, "config block")?).map_err(|e| Error::data(format!("model config block: {e}")))?;
    cfg.validate()?;
    let (specs, _) = specs(&cfg);
    let count = c.u32("tensor count")?;
    if count != specs.len() {
        return Err(Error::data(format!(
            "model container holds {count} tensors, configuration needs {}",
            specs.len()
        )));
    }
    let mut params = ParamStore {
        names: Vec::with_capacity(count),
        tensors: Vec::with_capacity(count),
    };
    for (want_name, want_shape) in specs {
        let n = c.u32("tensor name length")?;
        let name = std::str::from_utf8(c.take(n, "tensor name")?)
            .map_err(|_| Error::data("tensor name is not UTF-8"))?
            .to_string();
        if name != want_name {
            return Err(Error::data(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let ndim = c.u32("tensor rank")?;
        let shape = (0..ndim).map(|_| c.u32("tensor shape")).collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(Error::data(format!("tensor `{name}` has shape {shape:?}, expected {want_shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(4 * numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.names.push(name);
        params.tensors.push(Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::data(format!(
            "{} trailing bytes after the last model tensor",
            bytes.len() - c.pos
        )));
    }
    Ok((cfg, params))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
