use super::params::{specs, Layout, ParamStore, Slot};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{concat, Real, Tape, Var};
use crate::odesolve::Dynamics;

/// Parameters bound as graph inputs, either tracked on a tape or constant.
pub(crate) struct Net<T: Real> {
    pub vars: Vec<Var<T>>,
    layout: Layout,
    pub cfg: ModelConfig,
}

/// Decoder head outputs for one query, all `[1, ., H, W]`.
pub struct DecodeComponents<T: Real> {
    /// Pixel displacement, channel 0 along columns, channel 1 along rows.
    pub flow: Var<T>,
    /// Composition mask in (0, 1).
    pub mask: Var<T>,
    /// Appearance residual in (-1, 1).
    pub residual: Var<T>,
}

fn conv<T: Real>(x: &Var<T>, vars: &[Var<T>], slot: Slot) -> Result<Var<T>> {
    let k = vars[slot.w].shape()[2];
    x.conv2d(&vars[slot.w], 1, k / 2)?.add(&vars[slot.b])
}

impl<T: Real> Net<T> {
    pub fn bind(cfg: &ModelConfig, params: &ParamStore<T>, tape: Option<&Tape<T>>) -> Result<Self> {
        let (specs, layout) = specs(cfg);
        if specs.len() != params.tensors.len() {
            return Err(Error::contract("parameter store does not match the model configuration"));
        }
        for ((name, shape), t) in specs.iter().zip(&params.tensors) {
            if t.shape() != &shape[..] {
                return Err(Error::shape("bind parameter", shape, t.shape()));
            }
            debug_assert!(params.names.contains(name));
        }
        let vars = params
            .tensors
            .iter()
            .map(|t| match tape {
                Some(tape) => tape.leaf(t.clone()),
                None => Var::constant(t.clone()),
            })
            .collect();
        Ok(Self {
            vars,
            layout,
            cfg: cfg.clone(),
        })
    }

    /// `[1, C, H, W]` frame to `[1, E, H/ds, W/ds]` features.
    pub fn embed(&self, x: &Var<T>) -> Result<Var<T>> {
        let pools = self.cfg.stages();
        let mut h = x.clone();
        for (s, &slot) in self.layout.embed.iter().enumerate() {
            h = conv(&h, &self.vars, slot)?.tanh();
            if s < pools {
                h = h.avg_pool2x()?;
            }
        }
        Ok(h)
    }

    pub fn gru_step(&self, h: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
        conv_gru_step(&self.vars, self.layout.gru_gates, self.layout.gru_candidate, h, x)
    }

    /// Per-location two-layer MLP (1x1 convolutions).
    pub fn dynamics(&self, h: &Var<T>) -> Result<Var<T>> {
        let hidden = conv(h, &self.vars, self.layout.dyn_in)?.tanh();
        conv(&hidden, &self.vars, self.layout.dyn_out)
    }

    /// Latent to flow, mask and residual; `gap` is the signed normalized time
    /// from the predecessor frame to the query.
    pub fn head(&self, h: &Var<T>, gap: f64) -> Result<DecodeComponents<T>> {
        let stages = self.cfg.stages();
        let mut y = h.clone();
        for (s, &slot) in self.layout.head.iter().enumerate() {
            if s < stages {
                y = y.upsample2x()?;
            }
            y = conv(&y, &self.vars, slot)?;
            if s + 1 < self.layout.head.len() {
                y = y.tanh();
            }
        }
        let c = self.cfg.channels;
        let flow = y.slice(1, 0, 2)?.tanh().mul_scalar(T::lit(self.cfg.max_speed * gap));
        let mask = y.slice(1, 2, 3)?.sigmoid();
        let residual = y.slice(1, 3, 3 + c)?.tanh();
        Ok(DecodeComponents { flow, mask, residual })
    }

    pub fn zero_latent(&self) -> Var<T> {
        let (h, w) = self.cfg.latent_hw();
        Var::constant(crate::numerics::Tensor::zeros(&[1, self.cfg.latent_channels, h, w]))
    }
}

/// Convolutional GRU update on `[1, Ch, h, w]` state and `[1, E, h, w]` input.
pub(crate) fn conv_gru_step<T: Real>(vars: &[Var<T>], gates: Slot, candidate: Slot, h: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
    let hs = h.shape();
    let xs = x.shape();
    if hs.len() != 4 || xs.len() != 4 || hs[0] != xs[0] || hs[2..] != xs[2..] {
        return Err(Error::shape("conv_gru_step", hs, xs));
    }
    let ch = hs[1];
    let zr = conv(&concat(&[h, x], 1)?, vars, gates)?.sigmoid();
    let z = zr.slice(1, 0, ch)?;
    let r = zr.slice(1, ch, 2 * ch)?;
    let cand = conv(&concat(&[&r.mul(h)?, x], 1)?, vars, candidate)?.tanh();
    z.one_minus().mul(h)?.add(&z.mul(&cand)?)
}

/// `x' = mask * warp(prev, flow) + (1 - mask) * residual`.
pub fn compose<T: Real>(prev: &Var<T>, c: &DecodeComponents<T>) -> Result<Var<T>> {
    let warped = prev.bilinear_warp(&c.flow)?;
    c.mask.mul(&warped)?.add(&c.mask.one_minus().mul(&c.residual)?)
}

/// Learned autonomous latent dynamics.
pub(crate) struct LatentDynamics<'a, T: Real>(pub &'a Net<T>);

impl<T: Real> Dynamics<T> for LatentDynamics<'_, T> {
    fn eval(&self, h: &Var<T>, _t: f64) -> Result<Var<T>> {
        self.0.dynamics(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(ch: usize, e: usize) -> (Vec<Var<f64>>, Slot, Slot) {
        let vars = vec![
            Var::constant(Tensor::zeros(&[2 * ch, ch + e, 3, 3])),
            Var::constant(Tensor::zeros(&[2 * ch, 1, 1])),
            Var::constant(Tensor::zeros(&[ch, ch + e, 3, 3])),
            Var::constant(Tensor::zeros(&[ch, 1, 1])),
        ];
        (vars, Slot { w: 0, b: 1 }, Slot { w: 2, b: 3 })
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Var<f64> {
        Var::constant(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (vars, g, c) = zero_gru(3, 2);
        let h = random(&[1, 3, 4, 4], &mut rng);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let next = conv_gru_step(&vars, g, c, &h, &x).unwrap();
        assert_eq!(next.value(), &h.value().map(|v| 0.5 * v));
        let zero = Var::constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(conv_gru_step(&vars, g, c, &zero, &x).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_gates_stay_in_range() {
        let cfg = ModelConfig::default();
        let net = Net::bind(&cfg, &init(&cfg, 3).cast::<f64>(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ch, e) = (cfg.latent_channels, cfg.embed_channels);
        let h = random(&[1, ch, 8, 8], &mut rng);
        let x = random(&[1, e, 8, 8], &mut rng);
        let zr = conv(&concat(&[&h, &x], 1).unwrap(), &net.vars, net.layout.gru_gates).unwrap().sigmoid();
        assert!(zr.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let next = net.gru_step(&h, &x).unwrap();
        assert!(next.value().all_finite());
        assert!(net.gru_step(&h, &random(&[1, e, 4, 4], &mut rng)).is_err());
    }

    #[test]
    fn head_shapes_and_ranges() {
        let cfg = ModelConfig::default();
        let net = Net::bind(&cfg, &init(&cfg, 5).cast::<f64>(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(&[1, cfg.latent_channels, 8, 8], &mut rng);
        let c = net.head(&h.mul_scalar(30.0), 1.0).unwrap();
        assert_eq!(c.flow.shape(), &[1, 2, 32, 32]);
        assert_eq!(c.mask.shape(), &[1, 1, 32, 32]);
        assert_eq!(c.residual.shape(), &[1, 1, 32, 32]);
        assert!(c.mask.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(c.flow.value().data().iter().all(|&v| v.abs() <= cfg.max_speed));
        let still = net.head(&h, 0.0).unwrap();
        assert!(still.flow.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composition_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prev = random(&[1, 1, 6, 6], &mut rng);
        let resid = random(&[1, 1, 6, 6], &mut rng);
        let ones = Var::constant(Tensor::ones(&[1, 1, 6, 6]));
        let zeros = Var::constant(Tensor::zeros(&[1, 1, 6, 6]));
        let no_flow = Var::constant(Tensor::zeros(&[1, 2, 6, 6]));
        let copy = compose(&prev, &DecodeComponents { flow: no_flow.clone(), mask: ones, residual: resid.clone() }).unwrap();
        assert_eq!(copy.value(), prev.value());
        let pure = compose(&prev, &DecodeComponents { flow: no_flow.clone(), mask: zeros, residual: resid.clone() }).unwrap();
        assert_eq!(pure.value(), resid.value());
        let half = compose(
            &Var::constant(Tensor::full(&[1, 1, 6, 6], 0.2)),
            &DecodeComponents {
                flow: no_flow,
                mask: Var::constant(Tensor::full(&[1, 1, 6, 6], 0.5)),
                residual: Var::constant(Tensor::full(&[1, 1, 6, 6], 0.6)),
            },
        )
        .unwrap();
        assert!(half.value().data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn composition_is_exact_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let prev = random(&[1, 2, 5, 7], &mut rng);
            let flow = random(&[1, 2, 5, 7], &mut rng).mul_scalar(2.0);
            let mask = random(&[1, 1, 5, 7], &mut rng).sigmoid();
            let residual = random(&[1, 2, 5, 7], &mut rng);
            let out = compose(&prev, &DecodeComponents { flow: flow.clone(), mask: mask.clone(), residual: residual.clone() }).unwrap();
            let warped = prev.bilinear_warp(&flow).unwrap();
            let expect = mask.mul(&warped).unwrap().add(&mask.one_minus().mul(&residual).unwrap()).unwrap();
            assert_eq!(out.value(), expect.value());
        }
    }
}
