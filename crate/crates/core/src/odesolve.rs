//! Initial value problem solving on tensors, forward or backward in time.
//!
//! Every solver step is built from differentiable [`Var`] ops, so the solution
//! can be backpropagated to the initial state and to any parameters the
//! dynamics close over. Adaptive step control is not differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

/// Right-hand side `dh/dt = g(h, t)`.
pub trait Dynamics<T: Real> {
    fn eval(&self, h: &Var<T>, t: f64) -> Result<Var<T>>;
}

impl<T: Real, F> Dynamics<T> for F
where
    F: Fn(&Var<T>, f64) -> Result<Var<T>>,
{
    fn eval(&self, h: &Var<T>, t: f64) -> Result<Var<T>> {
        self(h, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Rk4,
    Adaptive,
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            "adaptive" | "dopri5" => Ok(Self::Adaptive),
            other => Err(Error::config(format!("unknown solver method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Fixed step for Euler and RK4.
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_evals: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Adaptive,
            step: 0.25,
            rtol: 1e-5,
            atol: 1e-5,
            max_evals: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn euler(step: f64) -> Self {
        Self {
            method: SolverMethod::Euler,
            step,
            ..Self::default()
        }
    }

    pub fn rk4(step: f64) -> Self {
        Self {
            method: SolverMethod::Rk4,
            step,
            ..Self::default()
        }
    }

    /// Adaptive solver with `rtol = atol = tol`.
    pub fn adaptive(tol: f64) -> Self {
        Self {
            method: SolverMethod::Adaptive,
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config(format!("solver step must be positive, got {}", self.step)));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config(format!(
                "solver tolerances must be positive, got rtol={} atol={}",
                self.rtol, self.atol
            )));
        }
        if self.max_evals == 0 {
            return Err(Error::config("solver max_evals must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveTelemetry {
    pub evaluations: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl std::ops::AddAssign for SolveTelemetry {
    fn add_assign(&mut self, rhs: Self) {
        self.evaluations += rhs.evaluations;
        self.accepted += rhs.accepted;
        self.rejected += rhs.rejected;
    }
}

/// `h + sum(coef * k)`, skipping zero coefficients.
fn combine<T: Real>(h: &Var<T>, terms: &[(f64, &Var<T>)]) -> Result<Var<T>> {
    let mut acc: Option<Var<T>> = None;
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let scaled = k.mul_scalar(T::lit(c));
        acc = Some(match acc {
            None => scaled,
            Some(a) => a.add(&scaled)?,
        });
    }
    match acc {
        None => Ok(h.clone()),
        Some(a) => h.add(&a),
    }
}

fn checked_eval<T: Real, G: Dynamics<T>>(g: &G, h: &Var<T>, t: f64) -> Result<Var<T>> {
    let d = g.eval(h, t)?;
    if d.shape() != h.shape() {
        return Err(Error::shape("dynamics output", h.shape(), d.shape()));
    }
    Ok(d)
}

/// Solves `dh/dt = g(h, t)` from `(t0, h0)` to `t1`. `t1 < t0` integrates backward.
pub fn ode_solve<T: Real, G: Dynamics<T>>(
    g: &G,
    h0: &Var<T>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Var<T>, SolveTelemetry)> {
    cfg.validate()?;
    if t1 == t0 {
        return Ok((h0.clone(), SolveTelemetry::default()));
    }
    match cfg.method {
        SolverMethod::Euler => fixed_step(g, h0, t0, t1, cfg.step, euler_step),
        SolverMethod::Rk4 => fixed_step(g, h0, t0, t1, cfg.step, rk4_step),
        SolverMethod::Adaptive => dopri5(g, h0, t0, t1, cfg),
    }
}

type StepFn<T, G> = fn(&G, &Var<T>, f64, f64, &mut SolveTelemetry) -> Result<Var<T>>;

fn fixed_step<T: Real, G: Dynamics<T>>(
    g: &G,
    h0: &Var<T>,
    t0: f64,
    t1: f64,
    step: f64,
    stepper: StepFn<T, G>,
) -> Result<(Var<T>, SolveTelemetry)> {
    let span = t1 - t0;
    let n = ((span.abs() / step) - 1e-9).ceil().max(1.0) as usize;
    let dt = span / n as f64;
    let mut tel = SolveTelemetry::default();
    let mut h = h0.clone();
    for i in 0..n {
        let t = t0 + dt * i as f64;
        h = stepper(g, &h, t, dt, &mut tel)?;
        tel.accepted += 1;
    }
    Ok((h, tel))
}

fn euler_step<T: Real, G: Dynamics<T>>(
    g: &G,
    h: &Var<T>,
    t: f64,
    dt: f64,
    tel: &mut SolveTelemetry,
) -> Result<Var<T>> {
    let k = checked_eval(g, h, t)?;
    tel.evaluations += 1;
    combine(h, &[(dt, &k)])
}

fn rk4_step<T: Real, G: Dynamics<T>>(
    g: &G,
    h: &Var<T>,
    t: f64,
    dt: f64,
    tel: &mut SolveTelemetry,
) -> Result<Var<T>> {
    let k1 = checked_eval(g, h, t)?;
    let k2 = checked_eval(g, &combine(h, &[(dt / 2.0, &k1)])?, t + dt / 2.0)?;
    let k3 = checked_eval(g, &combine(h, &[(dt / 2.0, &k2)])?, t + dt / 2.0)?;
    let k4 = checked_eval(g, &combine(h, &[(dt, &k3)])?, t + dt)?;
    tel.evaluations += 4;
    combine(
        h,
        &[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)],
    )
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights minus embedded 4th-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

fn error_norm<T: Real>(h: &Tensor<T>, ks: &[Var<T>], dt: f64, cfg: &SolverConfig) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &y) in h.data().iter().enumerate() {
        let err: f64 = ks
            .iter()
            .zip(E)
            .map(|(k, e)| e * k.value().data()[i].as_f64())
            .sum::<f64>()
            * dt;
        let scale = cfg.atol + cfg.rtol * y.as_f64().abs();
        worst = worst.max(err.abs() / scale);
    }
    worst
}

fn rms_scaled<T: Real>(v: &Tensor<T>, y: &Tensor<T>, cfg: &SolverConfig) -> f64 {
    let sum: f64 = v
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let r = a.as_f64() / (cfg.atol + cfg.rtol * b.as_f64().abs());
            r * r
        })
        .sum();
    (sum / v.len() as f64).sqrt()
}

/// Tolerance-aware first step (Hairer, Nørsett & Wanner, II.4); one extra evaluation.
fn initial_step<T: Real, G: Dynamics<T>>(
    g: &G,
    h: &Var<T>,
    f0: &Var<T>,
    t: f64,
    span: f64,
    cfg: &SolverConfig,
    tel: &mut SolveTelemetry,
) -> Result<f64> {
    let y = h.value();
    let d0 = rms_scaled(y, y, cfg);
    let d1 = rms_scaled(f0.value(), y, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span.abs());
    let dir = span.signum();
    let y1 = combine(&h.detach(), &[(dir * h0, &f0.detach())])?;
    let f1 = checked_eval(g, &y1, t + dir * h0)?;
    tel.evaluations += 1;
    let diff = Tensor::from_fn(y.shape(), |i| f1.value().data()[i] - f0.value().data()[i]);
    let d2 = rms_scaled(&diff, y, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok(dir * (100.0 * h0).min(h1).min(span.abs()))
}

fn dopri5<T: Real, G: Dynamics<T>>(
    g: &G,
    h0: &Var<T>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Var<T>, SolveTelemetry)> {
    let span = t1 - t0;
    let dir = span.signum();
    let mut tel = SolveTelemetry::default();
    let mut t = t0;
    let mut h = h0.clone();
    let min_step = span.abs() * 1e-12;

    let budget = |tel: &SolveTelemetry, need: usize| -> Result<()> {
        if tel.evaluations + need > cfg.max_evals {
            Err(Error::SolverBudget {
                limit: cfg.max_evals,
                telemetry: *tel,
            })
        } else {
            Ok(())
        }
    };

    budget(&tel, 2)?;
    let mut k1 = checked_eval(g, &h, t)?;
    tel.evaluations += 1;
    let mut dt = initial_step(g, &h, &k1, t, span, cfg, &mut tel)?;

    while (t1 - t) * dir > 0.0 {
        if (t + dt - t1) * dir > 0.0 {
            dt = t1 - t;
        }
        budget(&tel, 6)?;
        let mut ks = vec![k1.clone()];
        for stage in 1..7 {
            let terms: Vec<(f64, &Var<T>)> = A[stage][..stage].iter().map(|&a| a * dt).zip(ks.iter()).collect();
            let y = combine(&h, &terms)?;
            ks.push(checked_eval(g, &y, t + C[stage] * dt)?);
        }
        tel.evaluations += 6;
        let norm = error_norm(h.value(), &ks, dt, cfg);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite error estimate at t={t}")));
        }
        let factor = if norm == 0.0 {
            5.0
        } else {
            (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        if norm <= 1.0 {
            // stage 7 evaluates at the 5th-order solution (FSAL)
            let terms: Vec<(f64, &Var<T>)> = A[6][..6].iter().map(|&a| a * dt).zip(ks.iter()).collect();
            h = combine(&h, &terms)?;
            k1 = ks.pop().expect("seven stages");
            let landed = (t + dt - t1) * dir >= 0.0;
            t = if landed { t1 } else { t + dt };
            tel.accepted += 1;
        } else {
            tel.rejected += 1;
        }
        dt *= factor;
        if dt.abs() < min_step && (t1 - t) * dir > 0.0 {
            return Err(Error::Numeric(format!("step size underflow at t={t}")));
        }
    }
    Ok((h, tel))
}

/// Chained solves through monotone `targets`; the state at each target seeds the next.
pub fn solve_at_times<T: Real, G: Dynamics<T>>(
    g: &G,
    h0: &Var<T>,
    t0: f64,
    targets: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<Var<T>>, SolveTelemetry)> {
    let ascending = targets.windows(2).all(|w| w[0] <= w[1]);
    let descending = targets.windows(2).all(|w| w[0] >= w[1]);
    if !(ascending || descending) {
        return Err(Error::contract(format!("solve targets are not monotone: {targets:?}")));
    }
    let mut out = Vec::with_capacity(targets.len());
    let mut tel = SolveTelemetry::default();
    let mut h = h0.clone();
    let mut t = t0;
    for &target in targets {
        let (next, step_tel) = ode_solve(g, &h, t, target, cfg)?;
        tel += step_tel;
        out.push(next.clone());
        h = next;
        t = target;
    }
    Ok((out, tel))
}
