//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::process::Command;
use std::time::{Duration, Instant};

use npfx::baselines::{displacement_interpolate, fit_gmm, sinkhorn, GmmParams, LocfImputer, MeanImputer, OpticalFlowImputer};
use npfx::eval::{run_benchmark, run_elasticity, run_zero_shot, BenchmarkReport, MaskConfig};
use npfx::metrics::MetricConfig;
use npfx::model::{compose, shrinkage_loss, train_with, DecodeComponents, ImputeOptions, Model, ModelConfig, ModelImputer, TrainConfig};
use npfx::numerics::gradcheck::op_suite;
use npfx::numerics::{max_relative_error, Tensor, Var};
use npfx::odesolve::{ode_solve, SolverConfig};
use npfx::synthdata::{self, generate, mask, DomainSpec, FrameSequence, Mode};
use npfx::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// 1. gradient suite

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        embed_channels: 2,
        latent_channels: 3,
        downsample: 2,
        dynamics_hidden: 4,
        head_channels: 3,
        ..ModelConfig::default()
    }
}

fn tiny_domain() -> DomainSpec {
    DomainSpec {
        height: 8,
        width: 8,
        blob_size: 1.0,
        speed_min: 0.3,
        speed_max: 0.6,
        ..DomainSpec::domain_a()
    }
}

fn end_to_end_error(seed: u64) -> Result<f64> {
    let model = Model::new(tiny_model_config(), seed)?;
    let w = generate(&tiny_domain(), 1, 2, 100 + seed)?.remove(0);
    let inter = mask(&w, 0.5, Mode::Extrapolation, seed)?;
    let solver = SolverConfig::rk4(0.5);
    let flat = model.params.cast::<f64>().flatten();
    let (_, analytic) = model.loss_and_gradient_f64(&w, &inter, &solver, &flat)?;
    let step = 1e-6;
    let mut numeric = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] += step;
        let up = model.loss_f64(&w, &inter, &solver, &p)?;
        p[i] -= 2.0 * step;
        let down = model.loss_f64(&w, &inter, &solver, &p)?;
        numeric.push((up - down) / (2.0 * step));
    }
    let n = flat.len();
    Ok(max_relative_error(&Tensor::new(&[n], analytic)?, &Tensor::new(&[n], numeric)?))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    let mut worst_e2e = 0.0f64;
    for seed in 0..10 {
        for (name, err) in op_suite(seed).map_err(fail)? {
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
        worst_e2e = worst_e2e.max(end_to_end_error(seed).map_err(fail)?);
    }
    let elapsed = start.elapsed();
    ensure(
        worst_op.1 <= 1e-4 && worst_e2e <= 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "worst op {} {:.2e} (<= 1e-4), worst end-to-end {:.2e} (<= 1e-3), {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_e2e,
            elapsed.as_secs_f64()
        ),
    )
}

// 2. solver orders

fn decay_error(cfg: &SolverConfig) -> Result<f64> {
    let g = |h: &Var<f64>, _t: f64| Ok(h.neg());
    let (h, _) = ode_solve(&g, &Var::constant(Tensor::full(&[1], 1.0)), 0.0, 1.0, cfg)?;
    Ok((h.value().item() - (-1.0f64).exp()).abs())
}

fn solver_orders() -> Outcome {
    let start = Instant::now();
    let order = |make: fn(f64) -> SolverConfig| -> Result<f64> {
        Ok((decay_error(&make(0.02))? / decay_error(&make(0.01))?).log2())
    };
    let euler = order(SolverConfig::euler).map_err(fail)?;
    let rk4 = order(SolverConfig::rk4).map_err(fail)?;
    let tol = 1e-6;
    let cfg = SolverConfig::adaptive(tol);
    let g = |h: &Var<f64>, _t: f64| Ok(h.neg());
    let h0 = Var::constant(Tensor::new(&[3], vec![1.0, -0.5, 0.25]).map_err(fail)?);
    let (h1, _) = ode_solve(&g, &h0, 0.0, 2.0, &cfg).map_err(fail)?;
    let (back, _) = ode_solve(&g, &h1, 2.0, 0.0, &cfg).map_err(fail)?;
    let recovery = back.value().max_abs_diff(h0.value());
    ensure(
        (euler - 1.0).abs() <= 0.2 && (rk4 - 4.0).abs() <= 0.5 && recovery <= 10.0 * tol && start.elapsed().as_secs() < 10,
        format!("Euler order {euler:.3}, RK4 order {rk4:.3}, backward recovery {recovery:.2e} (<= {:.0e})", 10.0 * tol),
    )
}

// 3. composition identities

fn composition_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |shape: &[usize]| Var::constant(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0f64)));
    let prev = rand(&[1, 2, 9, 7]);
    let residual = rand(&[1, 2, 9, 7]);
    let no_flow = Var::constant(Tensor::zeros(&[1, 2, 9, 7]));
    let with = |m: f64| DecodeComponents {
        flow: no_flow.clone(),
        mask: Var::constant(Tensor::full(&[1, 1, 9, 7], m)),
        residual: residual.clone(),
    };
    let anchor = compose(&prev, &with(1.0)).map_err(fail)?;
    let pure = compose(&prev, &with(0.0)).map_err(fail)?;
    let warped = prev.bilinear_warp(&no_flow).map_err(fail)?;
    let bits = |a: &Var<f64>, b: &Var<f64>| a.value().data().iter().zip(b.value().data()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(
        bits(&anchor, &prev) && bits(&pure, &residual) && bits(&warped, &prev),
        "mask 1 + zero flow gives the anchor, mask 0 gives the residual, zero-flow warp is the identity (bitwise)".into(),
    )
}

// 4. shrinkage loss

fn shrinkage_properties() -> Outcome {
    let (a, c) = (10.0, 0.2);
    let pointwise = |l: f64| -> Result<f64> {
        let zero = Var::constant(Tensor::zeros(&[1]));
        Ok(shrinkage_loss(&Var::constant(Tensor::full(&[1], l)), &zero, a, c)?.value().item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = String::new();
    for _ in 0..10_000 {
        let l: f64 = rng.gen_range(0.0..2.0);
        let dl: f64 = rng.gen_range(0.0..0.5);
        let (v, v2) = (pointwise(l).map_err(fail)?, pointwise(l + dl).map_err(fail)?);
        if !(0.0 <= v && v <= l * l && v2 >= v) {
            worst = format!("violated at l={l}, dl={dl}: L={v}, L(l+dl)={v2}");
            break;
        }
    }
    let at_c = pointwise(c).map_err(fail)?;
    ensure(
        worst.is_empty() && (at_c - c * c / 2.0).abs() < 1e-15,
        if worst.is_empty() {
            format!("10000 random l: 0 <= L <= l^2 and monotone; L(c) = {at_c} (c^2/2 = {})", c * c / 2.0)
        } else {
            worst
        },
    )
}

// 5. baseline oracles

fn gaussian(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Tensor<f32> {
    Tensor::from_fn(&[h, w, 1], |p| {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp() as f32
    })
}

fn centroid_x(f: &Tensor<f32>) -> f64 {
    let w = f.shape()[1];
    let (m, sx) = f
        .data()
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(m, sx), (p, &v)| (m + v as f64, sx + v as f64 * (p % w) as f64));
    sx / m
}

fn baseline_oracles() -> Outcome {
    let truth = GmmParams {
        weights: vec![0.5, 0.5],
        means: vec![0.0, 1.0],
        variances: vec![0.05 * 0.05, 0.05 * 0.05],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = (0..500).map(|_| truth.sample(&mut rng)).collect();
    let fit = fit_gmm(&values, 2, 200, 0.0, 1e-6, 1);
    let mut means = fit.params.means.clone();
    means.sort_by(f64::total_cmp);
    let em_ok = (means[0] - 0.0).abs() <= 0.05 && (means[1] - 1.0).abs() <= 0.05;
    let monotone = fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9);

    let (h, w) = (8, 8);
    let p: Vec<f64> = (0..h * w).map(|i| 1.0 + (i % 5) as f64).collect();
    let q: Vec<f64> = (0..h * w).map(|i| 1.0 + ((i * 3) % 7) as f64).collect();
    let norm = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    let plan = sinkhorn(&p, &q, h, w, 0.5, 5000, 1e-9).map_err(fail)?;
    let residual = plan
        .row_sums()
        .iter()
        .zip(&p)
        .chain(plan.col_sums().iter().zip(&q))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut a = vec![0.0; 5];
    let mut b = vec![0.0; 5];
    a[0] = 1.0;
    b[4] = 1.0;
    let two = sinkhorn(&a, &b, 1, 5, 0.1, 1000, 1e-10).map_err(fail)?;
    let mid = displacement_interpolate(&two, 0.5);

    let f0 = gaussian(16, 16, 8.0, 7.0, 2.0);
    let f1 = gaussian(16, 16, 8.0, 8.0, 2.0);
    let between = OpticalFlowImputer::default().between(&f0, &f1, 0.5).map_err(fail)?;
    let shift = centroid_x(&between) - centroid_x(&f0);

    ensure(
        em_ok && monotone && residual <= 1e-6 && (mid[2] - 1.0).abs() < 1e-6 && (shift - 0.5).abs() <= 0.25,
        format!(
            "EM means {:.3}/{:.3}, log-likelihood monotone {monotone}; Sinkhorn residual {residual:.1e}, midpoint mass {:.6}; HS shift {shift:.3} px",
            means[0], means[1], mid[2]
        ),
    )
}

// 6-10. desk-scale model

struct Desk {
    model: Model,
    train_seconds: f64,
    held_a: Vec<FrameSequence>,
    held_b: Vec<FrameSequence>,
    interp: BenchmarkReport,
    interp_seconds: f64,
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn desk() -> Result<Desk> {
    let train = generate(&DomainSpec::domain_a(), 500, 10, 1)?;
    let start = Instant::now();
    let outcome = train_with(&train, &ModelConfig::default(), &desk_train_config(), |s| {
        eprintln!("  epoch {} loss {:.6}", s.epoch, s.loss);
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let held_a = generate(&DomainSpec::domain_a(), 50, 10, 1001)?;
    let held_b = generate(&DomainSpec::domain_b(), 50, 10, 2001)?;
    let model = outcome.model;
    let imputer = ModelImputer {
        model: std::sync::Arc::new(model.clone()),
        options: ImputeOptions::default(),
    };
    let start = Instant::now();
    let interp = run_benchmark(
        &[&imputer, &LocfImputer],
        &held_a,
        &MaskConfig::default(),
        &MetricConfig::default(),
        &DomainSpec::domain_a().calibration,
    )?;
    Ok(Desk {
        model,
        train_seconds,
        held_a,
        held_b,
        interp,
        interp_seconds: start.elapsed().as_secs_f64(),
    })
}

fn desk_training(d: &Desk) -> Outcome {
    let m = d.interp.row("model").unwrap();
    let l = d.interp.row("locf").unwrap();
    let total = d.train_seconds + d.interp_seconds;
    ensure(
        m.failures.is_empty() && m.metrics.ssim > l.metrics.ssim && m.metrics.ssim >= 0.85 && total <= 1800.0,
        format!(
            "interpolation SSIM {:.4} vs LOCF {:.4} (need > LOCF and >= 0.85), {} epochs, {:.0}s",
            m.metrics.ssim,
            l.metrics.ssim,
            desk_train_config().epochs,
            total
        ),
    )
}

fn extrapolation(d: &Desk) -> Outcome {
    let imputer = ModelImputer {
        model: std::sync::Arc::new(d.model.clone()),
        options: ImputeOptions::default(),
    };
    let cfg = MaskConfig {
        mode: Mode::Extrapolation,
        ..MaskConfig::default()
    };
    let r = run_benchmark(&[&imputer, &MeanImputer], &d.held_a, &cfg, &MetricConfig::default(), &DomainSpec::domain_a().calibration)
        .map_err(fail)?;
    let (m, b) = (r.row("model").unwrap(), r.row("mean").unwrap());
    ensure(
        m.failures.is_empty() && m.metrics.ssim > b.metrics.ssim,
        format!("extrapolation SSIM {:.4} vs Mean {:.4}", m.metrics.ssim, b.metrics.ssim),
    )
}

fn zero_shot(d: &Desk) -> Outcome {
    let z = run_zero_shot(
        &d.model,
        &d.held_b,
        &d.held_a,
        &MaskConfig::default(),
        &MetricConfig::default(),
        &DomainSpec::domain_b().calibration,
        &ImputeOptions::default(),
    )
    .map_err(fail)?;
    ensure(
        d.held_b.len() >= 50 && !z.below_locf && z.degradation.abs() <= 0.15,
        format!(
            "domain-B SSIM {:.4} vs LOCF {:.4} over {} windows; in-domain {:.4}, gap {:.4} (<= 0.15)",
            z.unseen.metrics.ssim,
            z.locf_unseen.metrics.ssim,
            d.held_b.len(),
            z.reference.metrics.ssim,
            z.degradation
        ),
    )
}

fn elasticity(d: &Desk) -> Outcome {
    let r = run_elasticity(&d.model, &d.held_a, &[1e-5, 1e-3, 0.5], &MaskConfig::default(), &MetricConfig::default(), true)
        .map_err(fail)?;
    let evals: Vec<usize> = r.rows.iter().map(|x| x.telemetry.evaluations).collect();
    let ssim: Vec<f64> = r.rows.iter().map(|x| x.metrics.ssim).collect();
    let saving = 1.0 - evals[1] as f64 / evals[0] as f64;
    ensure(
        evals.windows(2).all(|w| w[0] > w[1]) && saving >= 0.10 && (ssim[1] - ssim[0]).abs() <= 0.05,
        format!(
            "evaluations {evals:?} ({:.1}% fewer at 1e-3), SSIM {:.4}/{:.4}/{:.4}",
            100.0 * saving,
            ssim[0],
            ssim[1],
            ssim[2]
        ),
    )
}

fn tracking(d: &Desk) -> Outcome {
    let m = d.interp.row("model").unwrap();
    let l = d.interp.row("locf").unwrap();
    ensure(
        m.tracking.median < l.tracking.median,
        format!(
            "median polar error {:.4} m vs LOCF {:.4} m ({} vs {} frames, {} missed)",
            m.tracking.median,
            l.tracking.median,
            m.tracking.errors.len(),
            l.tracking.errors.len(),
            m.tracking.missed
        ),
    )
}

// 11. reproducibility through the executable

fn npfx(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_npfx"))
        .args(args)
        .env_remove("NPFX_SEED")
        .output()
        .map_err(fail)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("npfx {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(
        p("run.json"),
        r#"{"train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.003}, "model": {"solver": {"method": "rk4", "step": 0.5}}}"#,
    )
    .map_err(fail)?;
    npfx(&["gen", "--out", &p("data"), "--windows", "6", "--seed", "7", "--no-timestamps"])?;
    let outputs = ["model.npfxm", "model.loss.csv", "train.json", "report.json"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        npfx(&[
            "train",
            "--config",
            &p("run.json"),
            "--data",
            &p("data"),
            "--out",
            &p("model.npfxm"),
            "--seed",
            "3",
            "--report",
            &p("train.json"),
            "--no-timestamps",
        ])?;
        npfx(&[
            "bench",
            "--baselines",
            &format!("mean,locf,em,of,ot,model:{}", p("model.npfxm")),
            "--data",
            &p("data"),
            "--seed",
            "5",
            "--report",
            &p("report.json"),
            "--no-timestamps",
        ])?;
        let bytes = outputs.iter().map(|f| std::fs::read(p(f))).collect::<std::io::Result<Vec<_>>>().map_err(fail)?;
        runs.push(bytes);
    }
    let differing: Vec<&str> = outputs.iter().enumerate().filter(|(i, _)| runs[0][*i] != runs[1][*i]).map(|(_, f)| *f).collect();
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            "model file, loss history, train report and bench report byte-identical across two runs".into()
        } else {
            format!("differs across runs: {}", differing.join(", "))
        },
    )
}

// 12. formats

fn formats() -> Outcome {
    let seq = generate(&DomainSpec::domain_b(), 1, 10, 12).map_err(fail)?.remove(0);
    let bytes = synthdata::encode(&seq).map_err(fail)?;
    let seq_ok = synthdata::decode(&bytes).map_err(fail)? == seq;
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let magic_msg = synthdata::decode(&bad).err().map(|e| e.to_string()).unwrap_or_default();
    let trunc_msg = synthdata::decode(&bytes[..bytes.len() / 2]).err().map(|e| e.to_string()).unwrap_or_default();
    let seq_diag = magic_msg.contains("not an NPFX container") && trunc_msg.contains("expected") && trunc_msg.contains("found");

    let model = Model::new(ModelConfig::default(), 12).map_err(fail)?;
    let mb = model.to_bytes().map_err(fail)?;
    let back = Model::from_bytes(&mb).map_err(fail)?;
    let model_ok = back == model && back.to_bytes().map_err(fail)? == mb;
    let mut bad = mb.clone();
    bad[1] = b'?';
    let m_magic = Model::from_bytes(&bad).err().map(|e| e.to_string()).unwrap_or_default();
    let m_trunc = Model::from_bytes(&mb[..mb.len() - 1]).err().map(|e| e.to_string()).unwrap_or_default();
    let model_diag = m_magic.contains("not an NPFXM1 model container") && m_trunc.contains("truncated NPFXM1 container");
    ensure(
        seq_ok && seq_diag && model_ok && model_diag,
        format!(
            "NPFX1 round-trip {seq_ok}, diagnostics {seq_diag}; NPFXM1 round-trip {model_ok}, diagnostics {model_diag}"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag}  {name}: {detail}");
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "solver orders", solver_orders());
    report(3, "composition identities", composition_identities());
    report(4, "shrinkage loss", shrinkage_properties());
    report(5, "baseline oracles", baseline_oracles());
    match desk() {
        Ok(d) => {
            report(6, "desk-scale training", desk_training(&d));
            report(7, "extrapolation", extrapolation(&d));
            report(8, "zero-shot", zero_shot(&d));
            report(9, "elasticity", elasticity(&d));
            report(10, "downstream tracking", tracking(&d));
        }
        Err(e) => {
            for (n, name) in [(6, "desk-scale training"), (7, "extrapolation"), (8, "zero-shot"), (9, "elasticity"), (10, "downstream tracking")] {
                report(n, name, Err(fail(&e)));
            }
        }
    }
    report(11, "reproducibility", reproducibility());
    report(12, "formats", formats());
    println!("acceptance: {} of 12 criteria passed in {:.0}s", 12 - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
