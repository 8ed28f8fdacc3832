mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use npfx::baselines::{parse_baselines, Imputer};
use npfx::eval::{dump_flow, run_benchmark, run_elasticity, run_zero_shot};
use npfx::metrics::evaluate;
use npfx::model::{train_with, ImputeOptions, Model, ModelImputer};
use npfx::odesolve::SolverMethod;
use npfx::synthdata::{self, generate, load_dataset, save_dataset, DomainSpec, FrameSequence, Mode};
use npfx::{Error, Result};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "npfx", version, about = "Imputation of missing frames in intermittent heatmap sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (falls back to the config, then NPFX_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Leave wall-clock times out of reports so they are byte-reproducible.
    #[arg(long, global = true)]
    no_timestamps: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of NPFX1 windows plus a manifest.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Domain preset `a` or `b` (replaces the config's domain section).
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        window_len: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes the model container and a loss-history CSV.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Mask one sequence, impute it, and write the completed sequence.
    Impute {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        inference: Inference,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a model on a dataset, optionally as zero-shot against a reference dataset.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// In-domain reference dataset; makes the run a zero-shot comparison.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        inference: Inference,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare imputers on identical masks.
    Bench {
        /// Comma list of mean, locf, em, of, ot and model:PATH.
        #[arg(long)]
        baselines: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Quality and solver cost across adaptive tolerances.
    Elasticity {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma list of tolerances.
        #[arg(long)]
        tols: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the decoder flow fields of one imputed sequence.
    Flow {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        inference: Inference,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Inference {
    /// interp, extrap or retro.
    #[arg(long)]
    mode: Option<String>,
    /// Generate interpolated frames from the latest gap backwards.
    #[arg(long)]
    reverse_order: bool,
    /// Solver tolerance (rtol = atol).
    #[arg(long)]
    ode_tol: Option<f64>,
    /// euler, rk4 or adaptive.
    #[arg(long)]
    solver: Option<String>,
}

#[derive(Serialize)]
struct Report<'a, R: Serialize> {
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<u64>,
    config: &'a RunConfig,
    result: R,
}

struct Run {
    cfg: RunConfig,
    seed: u64,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if common.no_timestamps {
            cfg.timestamps = false;
        }
        if common.jobs.is_some() {
            cfg.jobs = common.jobs;
        }
        let seed = cfg.resolve_seed(common.seed)?;
        Ok(Self { cfg, seed })
    }

    fn start(&self) -> Result<()> {
        self.cfg.validate()?;
        if let Some(n) = self.cfg.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
        }
        Ok(())
    }

    fn report<R: Serialize>(&self, command: &str, path: Option<&Path>, result: R) -> Result<()> {
        let Some(path) = path else {
            return Ok(());
        };
        let generated_at = self
            .cfg
            .timestamps
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
        let doc = Report {
            command,
            seed: self.seed,
            generated_at,
            config: &self.cfg,
            result,
        };
        write_text(path, &(serde_json::to_string_pretty(&doc)? + "\n"))
    }

    fn inference(&mut self, inf: &Inference, model: &Model) -> Result<ImputeOptions> {
        if let Some(m) = &inf.mode {
            self.cfg.mask.mode = m.parse()?;
        }
        if inf.reverse_order {
            self.cfg.impute.reverse_order = true;
        }
        if inf.solver.is_some() || inf.ode_tol.is_some() {
            let mut s = self.cfg.impute.solver.unwrap_or(model.config.solver);
            if let Some(name) = &inf.solver {
                s.method = name.parse::<SolverMethod>()?;
            }
            if let Some(t) = inf.ode_tol {
                s.rtol = t;
                s.atol = t;
            }
            s.validate()?;
            self.cfg.impute.solver = Some(s);
        }
        Ok(ImputeOptions {
            solver: self.cfg.impute.solver,
            reverse_order: self.cfg.impute.reverse_order,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("missing --{flag} (or paths.{flag} in the config)")))
}

fn pick(flag: &Option<PathBuf>, cfg: &mut Option<PathBuf>) {
    if flag.is_some() {
        cfg.clone_from(flag);
    }
}

fn parse_tolerances(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("bad tolerance `{t}`"))))
        .collect()
}

/// Masks a complete sequence with the run's mask settings.
fn masked(run: &Run, seq: &FrameSequence) -> Result<synthdata::IntermittentSequence> {
    synthdata::mask(seq, run.cfg.mask.drop_rate, run.cfg.mask.mode, run.cfg.mask.seed)
}

#[derive(Serialize)]
struct GenResult {
    manifest: PathBuf,
    windows: usize,
}

#[derive(Serialize)]
struct TrainResult {
    model: PathBuf,
    loss_history: PathBuf,
    checksum: String,
    final_loss: f64,
}

#[derive(Serialize)]
struct ImputeResult {
    output: PathBuf,
    mode: Mode,
    observed_indices: Vec<usize>,
    masked_indices: Vec<usize>,
    telemetry: npfx::odesolve::SolveTelemetry,
    metrics: npfx::metrics::MetricReport,
}

#[derive(Serialize)]
struct FlowResult {
    files: Vec<PathBuf>,
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            out,
            domain,
            windows,
            window_len,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&out, &mut run.cfg.paths.out);
            if let Some(d) = domain {
                run.cfg.domain = match d.as_str() {
                    "a" | "A" => DomainSpec::domain_a(),
                    "b" | "B" => DomainSpec::domain_b(),
                    other => return Err(Error::Config(format!("unknown domain preset `{other}`"))),
                };
            }
            if let Some(n) = windows {
                run.cfg.generate.windows = n;
            }
            if let Some(n) = window_len {
                run.cfg.generate.window_len = n;
            }
            run.start()?;
            let out = required(run.cfg.paths.out.clone(), "out")?;
            let data = generate(&run.cfg.domain, run.cfg.generate.windows, run.cfg.generate.window_len, run.seed)?;
            let manifest = save_dataset(&out, &run.cfg.domain, run.seed, &data)?;
            println!("wrote {} windows to {}", data.len(), out.display());
            run.report(
                "gen",
                run.cfg.paths.report.clone().as_deref(),
                GenResult {
                    manifest,
                    windows: data.len(),
                },
            )
        }
        Command::Train {
            data,
            out,
            epochs,
            report,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&data, &mut run.cfg.paths.data);
            pick(&out, &mut run.cfg.paths.out);
            pick(&report, &mut run.cfg.paths.report);
            if let Some(e) = epochs {
                run.cfg.train.epochs = e;
            }
            run.start()?;
            let data_dir = required(run.cfg.paths.data.clone(), "data")?;
            let out = required(run.cfg.paths.out.clone(), "out")?;
            let (_, windows) = load_dataset(&data_dir)?;
            let outcome = train_with(&windows, &run.cfg.model, &run.cfg.train, |s| {
                eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}", s.epoch, s.loss, s.learning_rate);
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            outcome.model.save(&out)?;
            let csv_path = out.with_extension("loss.csv");
            let mut csv = String::from("epoch,loss,learning_rate\n");
            for s in &outcome.history {
                csv.push_str(&format!("{},{},{}\n", s.epoch, s.loss, s.learning_rate));
            }
            write_text(&csv_path, &csv)?;
            let checksum = format!("{:016x}", outcome.model.checksum()?);
            println!("wrote {} (checksum {checksum})", out.display());
            run.report(
                "train",
                run.cfg.paths.report.clone().as_deref(),
                TrainResult {
                    model: out,
                    loss_history: csv_path,
                    checksum,
                    final_loss: outcome.history.last().map_or(f64::NAN, |s| s.loss),
                },
            )
        }
        Command::Impute {
            model,
            input,
            inference,
            out,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&model, &mut run.cfg.paths.model);
            pick(&input, &mut run.cfg.paths.input);
            pick(&out, &mut run.cfg.paths.out);
            let model = Model::load(&required(run.cfg.paths.model.clone(), "model")?)?;
            let opts = run.inference(&inference, &model)?;
            run.start()?;
            let seq = synthdata::load(required(run.cfg.paths.input.clone(), "input")?)?;
            let out = required(run.cfg.paths.out.clone(), "out")?;
            let inter = masked(&run, &seq)?;
            let imputed = model.impute(&inter, &opts)?;
            let mut frames = seq.frames.clone();
            let per = frames.len() / seq.len();
            for (&k, f) in inter.masked_indices.iter().zip(&imputed.frames) {
                frames.data_mut()[k * per..(k + 1) * per].copy_from_slice(f.data());
            }
            let completed = FrameSequence::new(frames, seq.timestamps.clone())?;
            fs::create_dir_all(&out).map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
            let output = out.join("imputed.npfx");
            synthdata::save(&completed, &output)?;
            let truth = synthdata::masked_truth(&seq, &inter);
            let metrics = evaluate(&imputed.frames, &truth, &inter.masked_indices, &run.cfg.metrics)?;
            println!(
                "imputed {} frames, {} dynamics evaluations, SSIM {:.4}",
                imputed.frames.len(),
                imputed.telemetry.evaluations,
                metrics.ssim
            );
            let report = out.join("report.json");
            run.report(
                "impute",
                Some(&report),
                ImputeResult {
                    output,
                    mode: inter.mode,
                    observed_indices: inter.observed_indices.clone(),
                    masked_indices: inter.masked_indices.clone(),
                    telemetry: imputed.telemetry,
                    metrics,
                },
            )
        }
        Command::Eval {
            model,
            data,
            reference,
            inference,
            report,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&model, &mut run.cfg.paths.model);
            pick(&data, &mut run.cfg.paths.data);
            pick(&reference, &mut run.cfg.paths.reference);
            pick(&report, &mut run.cfg.paths.report);
            let model = Model::load(&required(run.cfg.paths.model.clone(), "model")?)?;
            let opts = run.inference(&inference, &model)?;
            run.start()?;
            let (manifest, windows) = load_dataset(required(run.cfg.paths.data.clone(), "data")?)?;
            let cal = manifest.domain.calibration;
            let report_path = run.cfg.paths.report.clone();
            match run.cfg.paths.reference.clone() {
                Some(r) => {
                    let (_, reference) = load_dataset(r)?;
                    let z = run_zero_shot(&model, &windows, &reference, &run.cfg.mask, &run.cfg.metrics, &cal, &opts)?;
                    println!(
                        "zero-shot SSIM {:.4}  in-domain {:.4}  LOCF {:.4}{}",
                        z.unseen.metrics.ssim,
                        z.reference.metrics.ssim,
                        z.locf_unseen.metrics.ssim,
                        if z.below_locf { "  (below LOCF)" } else { "" }
                    );
                    run.report("eval", report_path.as_deref(), z)
                }
                None => {
                    let imputer = ModelImputer {
                        model: Arc::new(model),
                        options: opts,
                    };
                    let b = run_benchmark(&[&imputer], &windows, &run.cfg.mask, &run.cfg.metrics, &cal)?;
                    print!("{}", b.to_table());
                    run.report("eval", report_path.as_deref(), b)
                }
            }
        }
        Command::Bench {
            baselines,
            data,
            mode,
            report,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&data, &mut run.cfg.paths.data);
            pick(&report, &mut run.cfg.paths.report);
            if let Some(b) = baselines {
                run.cfg.bench.baselines = b;
            }
            if let Some(m) = mode {
                run.cfg.mask.mode = m.parse()?;
            }
            run.start()?;
            let mut imputers: Vec<Box<dyn Imputer>> = Vec::new();
            for entry in run.cfg.bench.baselines.split(',').map(str::trim).filter(|e| !e.is_empty()) {
                match entry.strip_prefix("model:") {
                    Some(path) => imputers.push(Box::new(ModelImputer {
                        model: Arc::new(Model::load(Path::new(path))?),
                        options: ImputeOptions {
                            solver: run.cfg.impute.solver,
                            reverse_order: run.cfg.impute.reverse_order,
                        },
                    })),
                    None => imputers.extend(parse_baselines(entry, run.seed)?),
                }
            }
            if imputers.is_empty() {
                return Err(Error::Config("no imputers selected".into()));
            }
            let (manifest, windows) = load_dataset(required(run.cfg.paths.data.clone(), "data")?)?;
            let refs: Vec<&dyn Imputer> = imputers.iter().map(|b| b.as_ref()).collect();
            let b = run_benchmark(&refs, &windows, &run.cfg.mask, &run.cfg.metrics, &manifest.domain.calibration)?;
            print!("{}", b.to_table());
            let path = run.cfg.paths.report.clone();
            if let Some(p) = &path {
                write_text(&p.with_extension("txt"), &b.to_table())?;
            }
            run.report("bench", path.as_deref(), b)
        }
        Command::Elasticity {
            model,
            data,
            tols,
            mode,
            report,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&model, &mut run.cfg.paths.model);
            pick(&data, &mut run.cfg.paths.data);
            pick(&report, &mut run.cfg.paths.report);
            if let Some(t) = tols {
                run.cfg.elasticity.tolerances = parse_tolerances(&t)?;
            }
            if let Some(m) = mode {
                run.cfg.mask.mode = m.parse()?;
            }
            run.start()?;
            let model = Model::load(&required(run.cfg.paths.model.clone(), "model")?)?;
            let (_, windows) = load_dataset(required(run.cfg.paths.data.clone(), "data")?)?;
            let r = run_elasticity(
                &model,
                &windows,
                &run.cfg.elasticity.tolerances,
                &run.cfg.mask,
                &run.cfg.metrics,
                run.cfg.timestamps,
            )?;
            for row in &r.rows {
                println!(
                    "tol {:<8e}  evaluations {:>8}  SSIM {:.4}",
                    row.tolerance, row.telemetry.evaluations, row.metrics.ssim
                );
            }
            run.report("elasticity", run.cfg.paths.report.clone().as_deref(), r)
        }
        Command::Flow {
            model,
            input,
            inference,
            out,
            common,
        } => {
            let mut run = Run::new(&common)?;
            pick(&model, &mut run.cfg.paths.model);
            pick(&input, &mut run.cfg.paths.input);
            pick(&out, &mut run.cfg.paths.out);
            let model = Model::load(&required(run.cfg.paths.model.clone(), "model")?)?;
            let opts = run.inference(&inference, &model)?;
            run.start()?;
            let seq = synthdata::load(required(run.cfg.paths.input.clone(), "input")?)?;
            let out = required(run.cfg.paths.out.clone(), "out")?;
            let files = dump_flow(&model, &masked(&run, &seq)?, &opts, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            run.report("flow", Some(&out.join("report.json")), FlowResult { files })
        }
    }
}

/// 1 usage or configuration, 2 data, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Numeric(_) | Error::SolverBudget { .. } | Error::SinkhornDivergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
