use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use btnv::data::{load_columns, load_csv, write_csv, Dataset};
use btnv::persist::{load_model, save_model, FitInfo, ModelArtifact};
use btnv::pipeline::{evaluate_dataset, fit_dataset, predict_signal, FitOptions};
use btnv::synth::{fading_memory_factors, gaussian_input, synthesize, SyntheticSystem};
use btnv::{Exec, FitConfig, FitTrace, ModelState, Priors};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

/// Bayesian tensor-network Volterra system identification.
#[derive(Parser)]
#[command(name = "btnv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a `u,y` CSV and save it as a model directory.
    Identify(IdentifyArgs),
    /// Write Student-t predictions for the inputs of a CSV (`y` optional).
    Predict(PredictArgs),
    /// Score a saved model on a `u,y` CSV and print metrics JSON.
    Evaluate(EvaluateArgs),
    /// Generate data from a random low-rank Volterra system.
    Simulate(SimulateArgs),
    /// Export the ELBO trace or the lag-precision profile of a saved model.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Volterra order D.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    order: u32,
    /// Memory length M (window length M + 1 with the constant).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    memory: u32,
    /// Initial CPD rank.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    rank: u32,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
    max_iter: u32,
    /// Relative ELBO change that ends the sweeps.
    #[arg(long, default_value_t = 1e-6, value_parser = positive)]
    tol: f64,
    /// Relative column-RMS below which a CPD column is removed.
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    truncation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learn the lag precisions, or keep them at their initial value.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    delta: Switch,
    /// Gamma hyperprior constants a0,b0,c0,d0,g0,h0.
    #[arg(long, value_parser = parse_priors)]
    priors: Option<Priors>,
    /// Use samples 0..SPLIT for estimation; later samples are scored as validation.
    #[arg(long)]
    split: Option<usize>,
    /// Leading estimation samples left out of the likelihood.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Run this many seeds (SEED, SEED+1, ...) and keep the fit with the highest ELBO.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    seeds: u32,
    /// Model directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// First sample to predict; earlier inputs still fill the lag window.
    #[arg(long, default_value_t = 0)]
    from: usize,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// First sample to score; earlier inputs still fill the lag window.
    #[arg(long, visible_alias = "split", default_value_t = 0)]
    from: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    order: u32,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    memory: u32,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    rank: u32,
    /// Per-lag decay of the factor rows; 1 keeps all lags equally strong.
    #[arg(long, default_value_t = 1.0)]
    decay: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("what").required(true).multiple(true))]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Per-sweep CSV: iter, elbo, rank, e_tau.
    #[arg(long, group = "what")]
    trace: Option<PathBuf>,
    /// Per-lag CSV: index, e_delta, row_norm_1..D.
    #[arg(long, group = "what")]
    delta_profile: Option<PathBuf>,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn parse_priors(s: &str) -> std::result::Result<Priors, String> {
    let v = s.split(',').map(positive).collect::<std::result::Result<Vec<f64>, _>>()?;
    let [a0, b0, c0, d0, g0, h0] = v[..] else {
        return Err(format!("expected six values a0,b0,c0,d0,g0,h0, got {}", v.len()));
    };
    Ok(Priors { a0, b0, c0, d0, g0, h0 })
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load(path: &Path) -> Result<ModelArtifact> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn mean_std(v: &[f64]) -> Value {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    json!({ "mean": mean, "std": std })
}

struct Run {
    seed: u64,
    state: ModelState,
    trace: FitTrace,
    validation: Option<(f64, f64)>,
}

fn fit_one(ds: &Dataset, opts: &FitOptions) -> Result<Run> {
    let seed = opts.config.seed;
    let (state, trace) = fit_dataset(ds, opts).with_context(|| format!("identification with seed {seed}"))?;
    let validation = match opts.split {
        Some(s) if s < ds.len() => {
            let r = evaluate_dataset(&state, ds, s, opts.config.exec)?;
            Some((r.rmse, r.nll))
        }
        _ => None,
    };
    Ok(Run { seed, state, trace, validation })
}

fn run_json(r: &Run) -> Value {
    let mut v = json!({
        "seed": r.seed,
        "final_rank": r.state.rank(),
        "elbo": r.trace.final_elbo(),
        "iterations": r.trace.records.len(),
        "converged": r.trace.converged,
        "runtime_s": r.trace.runtime_s,
    });
    if let Some((rmse, nll)) = r.validation {
        v["rmse"] = json!(rmse);
        v["nll"] = json!(nll);
    }
    v
}

#[cfg(feature = "parallel")]
fn fit_all(ds: &Dataset, opts: &[FitOptions]) -> Vec<Result<Run>> {
    use rayon::prelude::*;
    opts.par_iter().map(|o| fit_one(ds, o)).collect()
}

#[cfg(not(feature = "parallel"))]
fn fit_all(ds: &Dataset, opts: &[FitOptions]) -> Vec<Result<Run>> {
    opts.iter().map(|o| fit_one(ds, o)).collect()
}

fn identify(a: IdentifyArgs) -> Result<()> {
    let ds = load_csv(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let opts: Vec<FitOptions> = (0..u64::from(a.seeds))
        .map(|k| FitOptions {
            memory: a.memory as usize,
            config: FitConfig {
                order: a.order as usize,
                init_rank: a.rank as usize,
                max_iter: a.max_iter as usize,
                elbo_rel_tol: a.tol,
                truncation_threshold: a.truncation,
                delta_enabled: matches!(a.delta, Switch::On),
                seed: a.seed.wrapping_add(k),
                ..FitConfig::default()
            },
            priors: a.priors.unwrap_or_default(),
            split: a.split,
            warmup: a.warmup,
        })
        .collect();
    let runs = fit_all(&ds, &opts).into_iter().collect::<Result<Vec<Run>>>()?;

    let best = runs
        .iter()
        .enumerate()
        .max_by(|(_, x), (_, y)| {
            let e = |r: &Run| r.trace.final_elbo().unwrap_or(f64::NEG_INFINITY);
            e(x).total_cmp(&e(y))
        })
        .map(|(k, _)| k)
        .expect("at least one seed");
    let artifact = ModelArtifact {
        state: runs[best].state.clone(),
        fit: Some(FitInfo {
            config: opts[best].config.clone(),
            trace: runs[best].trace.clone(),
        }),
    };
    save_model(&artifact, &a.out).with_context(|| format!("saving model to {}", a.out.display()))?;

    let report = if runs.len() == 1 {
        run_json(&runs[0])
    } else {
        let pick = |f: &dyn Fn(&Run) -> Option<f64>| runs.iter().filter_map(f).collect::<Vec<f64>>();
        let mut summary = json!({
            "final_rank": mean_std(&pick(&|r| Some(r.state.rank() as f64))),
            "elbo": mean_std(&pick(&|r| r.trace.final_elbo())),
            "runtime_s": mean_std(&pick(&|r| Some(r.trace.runtime_s))),
        });
        if runs.iter().all(|r| r.validation.is_some()) {
            summary["rmse"] = mean_std(&pick(&|r| r.validation.map(|v| v.0)));
            summary["nll"] = mean_std(&pick(&|r| r.validation.map(|v| v.1)));
        }
        json!({
            "runs": runs.iter().map(run_json).collect::<Vec<_>>(),
            "summary": summary,
            "saved_seed": runs[best].seed,
        })
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load(&a.model)?;
    let cols = load_columns(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if a.from >= cols.u.len() {
        bail!("--from {} is past the end of {} samples", a.from, cols.u.len());
    }
    let preds = predict_signal(&model.state, &cols.u, a.from, Exec::default())?;
    let mut w = writer(a.out.as_deref())?;
    writeln!(w, "index,mean,variance,scale,dof")?;
    for (k, p) in preds.iter().enumerate() {
        let var = p.variance().map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", a.from + k, p.location, var, p.scale, p.dof)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load(&a.model)?;
    let ds = load_csv(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if a.from >= ds.len() {
        bail!("--from {} is past the end of {} samples", a.from, ds.len());
    }
    let report = evaluate_dataset(&model.state, &ds, a.from, Exec::default())?;
    let fit = model.fit.as_ref();
    let metrics = json!({
        "rmse": report.rmse,
        "nll": report.nll,
        "final_rank": model.state.rank(),
        "elbo": fit.and_then(|f| f.trace.final_elbo()),
        "runtime_s": fit.map(|f| f.trace.runtime_s),
        "seed": fit.map(|f| f.config.seed),
        "samples": ds.len() - a.from,
    });
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if !(a.noise_std >= 0.0) || !a.decay.is_finite() {
        bail!("--noise-std must be non-negative and --decay finite");
    }
    let factors = fading_memory_factors(a.order as usize, a.memory as usize, a.rank as usize, a.decay, a.seed)?;
    let u = gaussian_input(a.n, a.seed.wrapping_add(1));
    let ds = synthesize(&SyntheticSystem::Cpd { factors, noise_std: a.noise_std }, &u, a.seed.wrapping_add(2))?;
    let mut w = writer(a.out.as_deref())?;
    write_csv(&mut w, &ds)?;
    w.flush()?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let model = load(&a.model)?;
    if let Some(path) = &a.trace {
        let Some(fit) = &model.fit else {
            bail!("model {} carries no fit trace", a.model.display());
        };
        let mut w = writer(Some(path))?;
        writeln!(w, "iter,elbo,rank,e_tau")?;
        for r in &fit.trace.records {
            writeln!(w, "{},{},{},{}", r.iter, r.elbo, r.rank, r.e_tau)?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.delta_profile {
        let state = &model.state;
        let mut w = writer(Some(path))?;
        let norms: Vec<String> = (1..=state.order()).map(|d| format!("row_norm_{d}")).collect();
        writeln!(w, "index,e_delta,{}", norms.join(","))?;
        for (i, delta) in state.delta_means().iter().enumerate() {
            let row: Vec<String> = state.factors.iter().map(|f| f.mean.row(i).norm().to_string()).collect();
            writeln!(w, "{i},{delta},{}", row.join(","))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Identify(a) => identify(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
