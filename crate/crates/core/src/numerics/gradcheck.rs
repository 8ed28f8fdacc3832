//! Central-difference gradient checking in `f64`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Analytic gradient of scalar `f` at `x` via the tape.
pub fn analytic_gradient<F>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&leaf)?;
    let grads = tape.backward(&loss)?;
    Ok(grads.get_or_zeros(&leaf))
}

/// Central-difference gradient of scalar `f` at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let out = f(&Var::constant(t))?;
        if out.value().len() != 1 {
            return Err(Error::contract("grad_check needs a scalar-valued function"));
        }
        Ok(out.value().item())
    };
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Tensor::new(x.shape(), grad)
}

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, FD_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Names of the operations covered by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "exp", "sigmoid", "tanh", "relu", "abs", "square", "add_scalar",
    "mul_scalar", "one_minus", "sum", "mean", "reshape", "slice", "concat", "upsample2x", "avg_pool2x",
    "conv2d.input", "conv2d.kernel", "conv2d.bias", "bilinear_warp.image", "bilinear_warp.flow",
];

/// Checks every differentiable operation on inputs drawn from `seed`; returns
/// the max relative error per operation. Each op output is contracted with a
/// random weight tensor so that every output element affects the scalar.
/// Inputs are kept away from kinks (|x| >= 0.1, non-integer sample offsets).
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let away = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::from_fn(shape, |_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
    };
    let contract = |y: Var<f64>, w: &Tensor<f64>| -> Result<Var<f64>> { Ok(y.mul(&Var::constant(w.clone()))?.sum()) };
    let mut out = Vec::new();
    let mut check = |name: &'static str, x: Tensor<f64>, out_shape: &[usize], f: &dyn Fn(&Var<f64>) -> Result<Var<f64>>, rng: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
        let w = Tensor::from_fn(out_shape, |_| rng.gen_range(-1.0..1.0));
        out.push((name, grad_check(|v| contract(f(v)?, &w), &x)?));
        Ok(())
    };
    let s = [2, 3, 4];
    let other = Var::constant(away(&s, &mut rng));
    let pos = Var::constant(Tensor::from_fn(&s, |_| rng.gen_range(0.5..1.5)));
    let x = away(&s, &mut rng);
    check("add", x.clone(), &s, &|v| v.add(&other), &mut rng)?;
    check("sub", x.clone(), &s, &|v| other.sub(v), &mut rng)?;
    check("mul", x.clone(), &s, &|v| v.mul(&other), &mut rng)?;
    check("div", x.clone(), &s, &|v| v.div(&pos)?.add(&other.div(&v.square().add_scalar(0.5))?), &mut rng)?;
    check("neg", x.clone(), &s, &|v| Ok(v.neg()), &mut rng)?;
    check("exp", x.clone(), &s, &|v| Ok(v.exp()), &mut rng)?;
    check("sigmoid", x.clone(), &s, &|v| Ok(v.sigmoid()), &mut rng)?;
    check("tanh", x.clone(), &s, &|v| Ok(v.tanh()), &mut rng)?;
    check("relu", x.clone(), &s, &|v| Ok(v.relu()), &mut rng)?;
    check("abs", x.clone(), &s, &|v| Ok(v.abs()), &mut rng)?;
    check("square", x.clone(), &s, &|v| Ok(v.square()), &mut rng)?;
    check("add_scalar", x.clone(), &s, &|v| Ok(v.add_scalar(0.7)), &mut rng)?;
    check("mul_scalar", x.clone(), &s, &|v| Ok(v.mul_scalar(-1.3)), &mut rng)?;
    check("one_minus", x.clone(), &s, &|v| Ok(v.one_minus()), &mut rng)?;
    check("sum", x.clone(), &[1], &|v| Ok(v.square().sum()), &mut rng)?;
    check("mean", x.clone(), &[1], &|v| Ok(v.square().mean()), &mut rng)?;
    check("reshape", x.clone(), &[6, 4], &|v| v.reshape(&[6, 4]), &mut rng)?;
    check("slice", x.clone(), &[2, 2, 4], &|v| v.slice(1, 1, 3), &mut rng)?;
    let tail = Var::constant(away(&[2, 1, 4], &mut rng));
    check("concat", x.clone(), &[2, 4, 4], &|v| crate::numerics::concat(&[&tail, v], 1), &mut rng)?;
    let img = away(&[1, 2, 4, 6], &mut rng);
    check("upsample2x", img.clone(), &[1, 2, 8, 12], &|v| v.upsample2x(), &mut rng)?;
    check("avg_pool2x", img.clone(), &[1, 2, 2, 3], &|v| v.avg_pool2x(), &mut rng)?;
    let kernel = away(&[3, 2, 3, 3], &mut rng);
    let bias = away(&[3, 1, 1], &mut rng);
    let k = Var::constant(kernel.clone());
    let im = Var::constant(img.clone());
    check("conv2d.input", img.clone(), &[1, 3, 4, 6], &|v| v.conv2d(&k, 1, 1), &mut rng)?;
    check("conv2d.kernel", kernel, &[1, 3, 4, 6], &|v| im.conv2d(v, 1, 1), &mut rng)?;
    check("conv2d.bias", bias, &[1, 3, 4, 6], &|v| im.conv2d(&k, 1, 1)?.add(v), &mut rng)?;
    let flow = Tensor::from_fn(&[1, 2, 4, 6], |_| {
        let whole = rng.gen_range(-1i32..=1) as f64;
        whole + rng.gen_range(0.1..0.9)
    });
    let fl = Var::constant(flow.clone());
    check("bilinear_warp.image", img, &[1, 2, 4, 6], &|v| v.bilinear_warp(&fl), &mut rng)?;
    check("bilinear_warp.flow", flow, &[1, 2, 4, 6], &|v| im.bilinear_warp(v), &mut rng)?;
    Ok(out)
}
