//! Encoding, query planning, autoregressive decoding and the training loss.

use super::net::{compose, DecodeComponents, Net};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{concat, Real, Tensor, Var};
use crate::odesolve::{ode_solve, solve_at_times, Dynamics, SolveTelemetry, SolverConfig};
use crate::synthdata::Mode;

/// Median spacing of the sorted distinct times; 1 when there is no spacing.
pub fn time_unit(times: &[f64]) -> f64 {
    let mut all = times.to_vec();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut gaps: Vec<f64> = all.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect();
    if gaps.is_empty() {
        return 1.0;
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    }
}

/// `[H, W, C]` frame as a `[1, C, H, W]` constant.
pub fn frame_var<T: Real>(f: &Tensor<f32>) -> Result<Var<T>> {
    let chw = f.hwc_to_chw()?;
    let s = chw.shape().to_vec();
    Ok(Var::constant(chw.cast::<T>().into_reshaped(&[1, s[0], s[1], s[2]])?))
}

/// `[1, C, H, W]` (or `[1, 2, H, W]`) value back to `[H, W, C]`.
pub fn frame_tensor<T: Real>(v: &Var<T>) -> Result<Tensor<f32>> {
    let s = v.shape();
    v.value().cast::<f32>().into_reshaped(&s[1..])?.chw_to_hwc()
}

/// Forward consolidation: ODE evolution between observations, a GRU update at each.
/// `times` are normalized and strictly monotone in processing order.
pub(crate) fn encode<T: Real, G: Dynamics<T>>(
    net: &Net<T>,
    g: &G,
    frames: &[Var<T>],
    times: &[f64],
    solver: &SolverConfig,
) -> Result<(Var<T>, SolveTelemetry)> {
    if frames.is_empty() {
        return Err(Error::data("encoding needs at least one observed frame"));
    }
    if frames.len() != times.len() {
        return Err(Error::shape("encode", &[frames.len()], &[times.len()]));
    }
    let mut h = net.zero_latent();
    let mut tel = SolveTelemetry::default();
    for (i, (frame, &t)) in frames.iter().zip(times).enumerate() {
        if i > 0 {
            let (next, step) = ode_solve(g, &h, times[i - 1], t, solver)?;
            tel += step;
            h = next;
        }
        h = net.gru_step(&h, &net.embed(frame)?)?;
    }
    Ok((h, tel))
}

/// Source of a predecessor frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Known {
    Observed(usize),
    Query(usize),
}

pub(crate) struct Generated<T: Real> {
    /// First query index with this time.
    pub query: usize,
    pub pred: Known,
    pub frame: Var<T>,
    pub components: DecodeComponents<T>,
}

pub(crate) struct Decoded<T: Real> {
    /// In generation order.
    pub generated: Vec<Generated<T>>,
    /// Observation index for each query that coincides with an observation.
    pub exact: Vec<Option<usize>>,
    pub telemetry: SolveTelemetry,
}

pub(crate) struct Request<'a, T: Real> {
    pub frames: &'a [Var<T>],
    pub times: &'a [f64],
    pub queries: &'a [f64],
    pub mode: Mode,
    pub reverse_order: bool,
    pub solver: &'a SolverConfig,
}

fn check_request<T: Real>(req: &Request<'_, T>) -> Result<Vec<Option<usize>>> {
    let times = req.times;
    if times.is_empty() || req.frames.len() != times.len() {
        return Err(Error::data("imputation needs observed frames with matching times"));
    }
    if !times.windows(2).all(|w| w[0] < w[1]) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::data("observed times must be finite and strictly increasing"));
    }
    if req.reverse_order && req.mode != Mode::Interpolation {
        return Err(Error::config("reverse-order generation applies to interpolation only"));
    }
    let (first, last) = (times[0], times[times.len() - 1]);
    req.queries
        .iter()
        .map(|&m| {
            if !m.is_finite() {
                return Err(Error::data(format!("query time {m} is not finite")));
            }
            if let Some(i) = times.iter().position(|&t| t == m) {
                return Ok(Some(i));
            }
            let ok = match req.mode {
                Mode::Interpolation => first < m && m < last,
                Mode::Extrapolation => m > last,
                Mode::Retrospective => m < first,
            };
            if ok {
                Ok(None)
            } else {
                Err(Error::contract(format!(
                    "query time {m} violates {} mode for observations in [{first}, {last}]",
                    req.mode
                )))
            }
        })
        .collect()
}

/// Encodes the observations and generates every non-observed query.
pub(crate) fn decode<T, G, H>(net: &Net<T>, g: &G, head: &H, req: &Request<'_, T>) -> Result<Decoded<T>>
where
    T: Real,
    G: Dynamics<T>,
    H: Fn(&Var<T>, f64) -> Result<DecodeComponents<T>>,
{
    let exact = check_request(req)?;
    let mut open: Vec<(f64, usize)> = Vec::new();
    for (q, (&m, e)) in req.queries.iter().zip(&exact).enumerate() {
        if e.is_none() && !open.iter().any(|&(t, _)| t == m) {
            open.push((m, q));
        }
    }
    if open.is_empty() {
        return Ok(Decoded {
            generated: Vec::new(),
            exact,
            telemetry: SolveTelemetry::default(),
        });
    }

    let mut all: Vec<f64> = req.times.to_vec();
    all.extend(req.queries);
    let unit = time_unit(&all);
    let origin = req.times[0];
    let norm = |t: f64| (t - origin) / unit;
    let obs: Vec<f64> = req.times.iter().map(|&t| norm(t)).collect();

    let retro = req.mode == Mode::Retrospective;
    let (h_end, t_end, mut telemetry) = if retro {
        let frames: Vec<Var<T>> = req.frames.iter().rev().cloned().collect();
        let times: Vec<f64> = obs.iter().rev().copied().collect();
        let (h, tel) = encode(net, g, &frames, &times, req.solver)?;
        (h, obs[0], tel)
    } else {
        let (h, tel) = encode(net, g, req.frames, &obs, req.solver)?;
        (h, obs[obs.len() - 1], tel)
    };

    // latents, solved outward from the consolidation time
    let mut targets: Vec<f64> = open.iter().map(|&(m, _)| norm(m)).collect();
    let ascending = req.mode == Mode::Extrapolation;
    targets.sort_by(|a, b| if ascending { a.total_cmp(b) } else { b.total_cmp(a) });
    let (latents, tel) = solve_at_times(g, &h_end, t_end, &targets, req.solver)?;
    telemetry += tel;
    let latent_at = |t: f64| -> &Var<T> {
        let i = targets.iter().position(|&x| x == t).expect("latent solved for every open query");
        &latents[i]
    };

    let forward = !(retro || req.reverse_order);
    open.sort_by(|a, b| if forward { a.0.total_cmp(&b.0) } else { b.0.total_cmp(&a.0) });
    let mut known: Vec<(f64, Var<T>, Known)> = obs
        .iter()
        .zip(req.frames)
        .enumerate()
        .map(|(i, (&t, f))| (t, f.clone(), Known::Observed(i)))
        .collect();
    let mut generated = Vec::with_capacity(open.len());
    for &(m, q) in &open {
        let tm = norm(m);
        let pred = known
            .iter()
            .filter(|(t, _, _)| if forward { *t < tm } else { *t > tm })
            .min_by(|a, b| (a.0 - tm).abs().total_cmp(&(b.0 - tm).abs()))
            .ok_or_else(|| Error::contract(format!("query {m} has no predecessor frame")))?;
        let components = head(latent_at(tm), tm - pred.0)?;
        let frame = compose(&pred.1, &components)?;
        let pred_tag = pred.2;
        known.push((tm, frame.clone(), Known::Query(q)));
        generated.push(Generated {
            query: q,
            pred: pred_tag,
            frame,
            components,
        });
    }
    Ok(Decoded {
        generated,
        exact,
        telemetry,
    })
}

/// Mean over pixels of `l^2 / (1 + exp(a (c - l)))` with `l = |pred - target|`.
pub fn shrinkage_loss<T: Real>(pred: &Var<T>, target: &Var<T>, a: f64, c: f64) -> Result<Var<T>> {
    let l = pred.sub(target)?.abs();
    let weight = l.add_scalar(T::lit(-c)).mul_scalar(T::lit(a)).sigmoid();
    Ok(l.square().mul(&weight)?.mean())
}

fn mse<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    Ok(a.sub(b)?.square().mean())
}

/// Weighted sum of the shrinkage, residual and content terms over all generated frames.
pub fn loss<T: Real>(
    pred: &[Var<T>],
    truth: &[Var<T>],
    residual_pred: &[Var<T>],
    residual_truth: &[Var<T>],
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let n = pred.len();
    if n == 0 || truth.len() != n || residual_pred.len() != n || residual_truth.len() != n {
        return Err(Error::shape(
            "loss",
            &[pred.len(), residual_pred.len()],
            &[truth.len(), residual_truth.len()],
        ));
    }
    let stack = |v: &[Var<T>]| -> Result<Var<T>> {
        let refs: Vec<&Var<T>> = v.iter().collect();
        concat(&refs, 0)
    };
    let (p, t) = (stack(pred)?, stack(truth)?);
    let (rp, rt) = (stack(residual_pred)?, stack(residual_truth)?);
    if p.shape() != t.shape() || rp.shape() != rt.shape() {
        return Err(Error::shape("loss", p.shape(), t.shape()));
    }
    let shrink = shrinkage_loss(&p, &t, cfg.shrinkage_a, cfg.shrinkage_c)?;
    let residual = mse(&rp, &rt)?;
    let content = mse(&p, &t)?;
    shrink
        .mul_scalar(T::lit(cfg.lambda_shrinkage))
        .add(&residual.mul_scalar(T::lit(cfg.lambda_residual)))?
        .add(&content.mul_scalar(T::lit(cfg.lambda_content)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(l: f64, a: f64, c: f64) -> f64 {
        let p = Var::constant(Tensor::scalar(l));
        let t = Var::constant(Tensor::scalar(0.0));
        shrinkage_loss(&p, &t, a, c).unwrap().value().item()
    }

    #[test]
    fn shrinkage_examples() {
        assert_eq!(scalar_loss(0.0, 10.0, 0.2), 0.0);
        assert!((scalar_loss(0.2, 10.0, 0.2) - 0.02).abs() < 1e-15);
        let closed = 1.0 / (1.0 + (-8.0f64).exp());
        assert!((scalar_loss(1.0, 10.0, 0.2) - closed).abs() < 1e-12);
        assert!((closed - 0.99966).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn shrinkage_bounded_and_monotone(l in 0.0f64..2.0, dl in 0.0f64..0.5) {
            let v = scalar_loss(l, 10.0, 0.2);
            prop_assert!(v >= 0.0 && v <= l * l);
            prop_assert!(scalar_loss(l + dl, 10.0, 0.2) >= v);
        }
    }

    #[test]
    fn time_unit_is_median_gap() {
        assert_eq!(time_unit(&[0.0, 1.0, 3.0, 4.0]), 1.0);
        assert!((time_unit(&[0.0, 0.1, 0.3]) - 0.15).abs() < 1e-12);
        assert_eq!(time_unit(&[2.0]), 1.0);
    }

    fn rand_frames(n: usize, rng: &mut ChaCha8Rng) -> Vec<Var<f64>> {
        (0..n)
            .map(|_| Var::constant(Tensor::from_fn(&[1, 1, 32, 32], |_| rng.gen_range(0.0..1.0))))
            .collect()
    }

    #[test]
    fn zero_dynamics_encoder_is_plain_recurrence() {
        let cfg = ModelConfig::default();
        let zero = |h: &Var<f64>, _t: f64| -> Result<Var<f64>> { Ok(Var::constant(Tensor::zeros(h.shape()))) };
        for seed in 0..5 {
            let net = Net::bind(&cfg, &init(&cfg, seed).cast::<f64>(), None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..5);
            let frames = rand_frames(n, &mut rng);
            let times: Vec<f64> = (0..n).map(|i| i as f64 * 1.3 + rng.gen_range(0.0..0.5)).collect();
            let (h, _) = encode(&net, &zero, &frames, &times, &SolverConfig::rk4(0.25)).unwrap();
            let mut oracle = net.zero_latent();
            for f in &frames {
                oracle = net.gru_step(&oracle, &net.embed(f).unwrap()).unwrap();
            }
            assert_eq!(h.value(), oracle.value());
        }
    }

    #[test]
    fn encoder_is_time_translation_invariant() {
        let cfg = ModelConfig::default();
        let net = Net::bind(&cfg, &init(&cfg, 2).cast::<f64>(), None).unwrap();
        let g = super::super::net::LatentDynamics(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = rand_frames(3, &mut rng);
        let solver = SolverConfig::rk4(0.25);
        let (a, _) = encode(&net, &g, &frames, &[0.0, 1.0, 2.5], &solver).unwrap();
        let (b, _) = encode(&net, &g, &frames, &[10.0, 11.0, 12.5], &solver).unwrap();
        assert!(a.value().max_abs_diff(b.value()) < 1e-12);
        assert!(encode(&net, &g, &[], &[], &solver).is_err());
    }

    #[test]
    fn loss_terms_sum() {
        let mut cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_frames(2, &mut rng);
        let t = rand_frames(2, &mut rng);
        let rp = rand_frames(2, &mut rng);
        let rt = rand_frames(2, &mut rng);
        let mut shrink = 0.0;
        let mut resid = 0.0;
        let mut content = 0.0;
        let n = 2.0 * 1024.0;
        for k in 0..2 {
            for i in 0..1024 {
                let d = p[k].value().data()[i] - t[k].value().data()[i];
                let l = d.abs();
                shrink += l * l / (1.0 + (10.0 * (0.2 - l)).exp()) / n;
                content += d * d / n;
                let r = rp[k].value().data()[i] - rt[k].value().data()[i];
                resid += r * r / n;
            }
        }
        let got = loss(&p, &t, &rp, &rt, &cfg).unwrap().value().item();
        assert!((got - (0.05 * shrink + 0.5 * resid + content)).abs() < 1e-12);
        assert_eq!(loss(&t, &t, &rt, &rt, &cfg).unwrap().value().item(), 0.0);
        cfg.lambda_shrinkage = 0.0;
        cfg.lambda_residual = 0.0;
        cfg.lambda_content = 2.0;
        assert!((loss(&p, &t, &rp, &rt, &cfg).unwrap().value().item() - 2.0 * content).abs() < 1e-12);
    }
}
