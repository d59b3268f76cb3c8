//! Command-line entry point wiring training, conversion, evaluation, and
//! error analysis into reproducible runs.
//!
//! Every command materializes its resolved configuration into
//! `manifest.json` under `--out` before any computation, so a run can be
//! reproduced from the manifest alone. Exit codes: 0 success, 2 usage
//! error, 1 runtime error. `SNNFORGE_THREADS` caps the worker count.

use clap::{Args, Parser, Subcommand};
use snnforge_core::analysis::{
    error_decompose, emit_report, theorem1_mc, ReportFormat, HIST_BINS,
};
use snnforge_core::ann::{evaluate_accuracy, TrainConfig};
use snnforge_core::calibrate::{
    history_csv, split_validation, train_with_compensation, CalibrationConfig,
};
use snnforge_core::convert::convert;
use snnforge_core::io::{load_csv, load_idx, load_model, save_model, synth, DatasetHandle, Model};
use snnforge_core::snn::snn_accuracy;
use snnforge_core::{Error, RandomSource};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "snnforge", version, about = "Noise-compensated ANN-to-SNN conversion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source network with layer-wise residual-error compensation
    Train(TrainArgs),
    /// Convert a trained source model into a spiking model
    Convert(ConvertArgs),
    /// Evaluate a model: source accuracy, or spiking accuracy over a T sweep
    Eval(EvalArgs),
    /// Residual, expectation, decomposition, and overhead studies
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset: synth:NAME[:N], idx:IMAGES:LABELS, or csv:PATH
    #[arg(long)]
    data: String,
    /// Architecture, e.g. mlp-64-64 or conv-8-16-32
    #[arg(long)]
    arch: String,
    /// Quantization steps per activation layer
    #[arg(long = "L", default_value_t = 4)]
    steps: u32,
    /// Noise-induction time step (defaults to L)
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    #[arg(long, default_value_t = 5e-4)]
    wd: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long = "val-frac", default_value_t = 0.05)]
    val_frac: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pin noise intensities to zero (plain quantized-activation baseline)
    #[arg(long = "no-calibrate", default_value_t = false)]
    no_calibrate: bool,
    /// Initial activation threshold
    #[arg(long = "lambda-init", default_value_t = 8.0)]
    lambda_init: f32,
    /// Held-out test set; defaults to a derived synthetic set or a
    /// stratified 25% carve-out for file datasets
    #[arg(long = "test-data")]
    test_data: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset: synth:NAME[:N], idx:IMAGES:LABELS, or csv:PATH
    #[arg(long)]
    data: String,
    /// Time steps to sweep for spiking models
    #[arg(long = "T-list", value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    t_list: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    which: AnalyzeCommand,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-layer residual histograms of a source model vs its conversion
    Residual {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        /// Time steps for the converted run (defaults to the model's L)
        #[arg(long)]
        tau: Option<usize>,
        /// Samples to pool
        #[arg(long, default_value_t = 64)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte Carlo check that the conversion error has zero expectation
    Theorem1 {
        /// Sweep the full {T, L} x delta grid
        #[arg(long, default_value_t = false)]
        grid: bool,
        #[arg(long, default_value_t = 1.0)]
        theta: f32,
        #[arg(long = "L", default_value_t = 4)]
        steps: u32,
        #[arg(long = "T", default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 0.0)]
        delta: f32,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Three-way error decomposition report (clip/quantization/residual)
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long, default_value_t = 64)]
        limit: usize,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Per-epoch wall time with and without calibration
    Overhead {
        #[arg(long)]
        data: String,
        #[arg(long)]
        arch: String,
        #[arg(long = "L", default_value_t = 4)]
        steps: u32,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Fixed label mixed into the seed for derived test sets.
const TEST_SEED_LABEL: u64 = 0x5eed_7e57;

fn default_synth_size(name: &str) -> usize {
    match name {
        "blobs" => 400,
        "spirals" => 600,
        "xor_grid" => 600,
        "digits" => 1200,
        _ => 400,
    }
}

fn load_data_spec(spec: &str, seed: u64) -> CliResult<DatasetHandle> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts[0] {
        "synth" => {
            if parts.len() < 2 || parts.len() > 3 {
                return Err(usage(format!("bad synth spec {spec:?}, expected synth:NAME[:N]")));
            }
            let n = match parts.get(2) {
                Some(s) => s
                    .parse::<usize>()
                    .map_err(|_| usage(format!("bad sample count {s:?} in {spec:?}")))?,
                None => default_synth_size(parts[1]),
            };
            Ok(synth(parts[1], n, seed)?)
        }
        "idx" => {
            if parts.len() != 3 {
                return Err(usage(format!(
                    "bad idx spec {spec:?}, expected idx:IMAGES:LABELS"
                )));
            }
            Ok(load_idx(Path::new(parts[1]), Path::new(parts[2]))?)
        }
        "csv" => {
            if parts.len() != 2 {
                return Err(usage(format!("bad csv spec {spec:?}, expected csv:PATH")));
            }
            Ok(load_csv(Path::new(parts[1]))?)
        }
        other => Err(usage(format!(
            "unknown dataset scheme {other:?} in {spec:?} (synth/idx/csv)"
        ))),
    }
}

/// Train/test pair: synthetic test sets derive from the seed and a fixed
/// label; file datasets carve out a stratified quarter when no explicit
/// test set is given.
fn load_train_test(
    spec: &str,
    test_spec: Option<&str>,
    seed: u64,
) -> CliResult<(DatasetHandle, DatasetHandle)> {
    if let Some(ts) = test_spec {
        return Ok((load_data_spec(spec, seed)?, load_data_spec(ts, seed ^ TEST_SEED_LABEL)?));
    }
    if spec.starts_with("synth:") {
        let train = load_data_spec(spec, seed)?;
        let test_n = (train.len() / 4).max(50);
        let parts: Vec<&str> = spec.split(':').collect();
        let test = synth(parts[1], test_n, seed ^ TEST_SEED_LABEL)?;
        Ok((train, test))
    } else {
        let all = load_data_spec(spec, seed)?;
        let (train, test) = split_validation(&all, 0.25, seed ^ TEST_SEED_LABEL)?;
        Ok((train, test))
    }
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    outputs: &[&str],
) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "command": command,
        "created_unix": created,
        "seed": seed,
        "config": config,
        "outputs": outputs,
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest is serializable"),
    )
    .map_err(Error::from)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let tau = args.tau.unwrap_or(args.steps as usize);
    if tau < 1 {
        return Err(usage("--tau must be >= 1"));
    }
    if args.steps < 1 {
        return Err(usage("--L must be >= 1"));
    }
    if args.epochs < 1 {
        return Err(usage("--epochs must be >= 1"));
    }
    if !(args.val_frac > 0.0 && args.val_frac < 0.5) {
        return Err(usage("--val-frac must be in (0, 0.5)"));
    }
    let config = serde_json::json!({
        "data": args.data,
        "test_data": args.test_data,
        "arch": args.arch,
        "L": args.steps,
        "tau": tau,
        "epochs": args.epochs,
        "lr": args.lr,
        "wd": args.wd,
        "momentum": args.momentum,
        "batch": args.batch,
        "val_frac": args.val_frac,
        "seed": args.seed,
        "no_calibrate": args.no_calibrate,
        "lambda_init": args.lambda_init,
    });
    write_manifest(
        &args.out,
        "train",
        args.seed,
        config,
        &["history.csv", "best_ann.snnf", "best_snn.snnf"],
    )?;

    let (train, test) = load_train_test(&args.data, args.test_data.as_deref(), args.seed)?;
    let cfg = TrainConfig {
        lr0: args.lr,
        epochs: args.epochs,
        weight_decay: args.wd,
        momentum: args.momentum,
        batch_size: args.batch,
        steps: args.steps,
        tau,
        seed: args.seed,
        val_fraction: args.val_frac,
        threshold_init: args.lambda_init,
    };
    let cal = CalibrationConfig {
        tau,
        val_fraction: args.val_frac,
        recalibrate_every: 1,
        enabled: !args.no_calibrate,
    };
    let outcome = train_with_compensation(&train, &test, &args.arch, &cfg, &cal)?;

    std::fs::write(args.out.join("history.csv"), history_csv(&outcome.history))
        .map_err(Error::from)?;
    save_model(&Model::Ann(outcome.best_ann), &args.out.join("best_ann.snnf"))?;
    save_model(&Model::Snn(outcome.best_snn), &args.out.join("best_snn.snnf"))?;
    println!(
        "best source accuracy {:.4} at epoch {}",
        outcome.best_ann_acc, outcome.best_ann_epoch
    );
    println!(
        "best converted accuracy {:.4} at epoch {} (T={tau})",
        outcome.best_snn_acc, outcome.best_snn_epoch
    );
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> CliResult<()> {
    let config = serde_json::json!({ "model": args.model.display().to_string() });
    write_manifest(&args.out, "convert", 0, config, &["converted_snn.snnf"])?;
    let model = load_model(&args.model)?;
    let ann = match model {
        Model::Ann(net) => net,
        Model::Snn(_) => {
            return Err(CliError::Run(Error::Config(
                "model is already a spiking network".into(),
            )))
        }
    };
    let snn = convert(&ann)?;
    save_model(&Model::Snn(snn), &args.out.join("converted_snn.snnf"))?;
    println!("converted model written to {}", args.out.join("converted_snn.snnf").display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if args.t_list.is_empty() || args.t_list.iter().any(|&t| t < 1) {
        return Err(usage("--T-list entries must be >= 1"));
    }
    let config = serde_json::json!({
        "model": args.model.display().to_string(),
        "data": args.data,
        "T_list": args.t_list,
        "seed": args.seed,
    });
    write_manifest(&args.out, "eval", args.seed, config, &["eval.csv"])?;
    let data = load_data_spec(&args.data, args.seed)?;
    let mut csv = String::new();
    match load_model(&args.model)? {
        Model::Ann(net) => {
            let acc = evaluate_accuracy(&net, &data.samples)?;
            csv.push_str("kind,accuracy\n");
            csv.push_str(&format!("ann,{acc}\n"));
            println!("source accuracy {acc:.4}");
        }
        Model::Snn(snn) => {
            csv.push_str("kind");
            for t in &args.t_list {
                csv.push_str(&format!(",t_{t}"));
            }
            csv.push('\n');
            csv.push_str("snn");
            for &t in &args.t_list {
                let acc = snn_accuracy(&snn, &data.samples, t)?;
                csv.push_str(&format!(",{acc}"));
                println!("T={t}: accuracy {acc:.4}");
            }
            csv.push('\n');
        }
    }
    std::fs::write(args.out.join("eval.csv"), csv).map_err(Error::from)?;
    Ok(())
}

fn model_default_steps(model: &Model) -> usize {
    match model {
        Model::Ann(net) => net
            .activation_params()
            .first()
            .map(|p| p.steps as usize)
            .unwrap_or(4),
        Model::Snn(_) => 4,
    }
}

fn cmd_analyze_residual(
    model_path: PathBuf,
    data: String,
    tau: Option<usize>,
    limit: usize,
    seed: u64,
    out: PathBuf,
) -> CliResult<()> {
    if let Some(t) = tau {
        if t < 1 {
            return Err(usage("--tau must be >= 1"));
        }
    }
    let config = serde_json::json!({
        "model": model_path.display().to_string(),
        "data": data,
        "tau": tau,
        "limit": limit,
        "seed": seed,
    });
    write_manifest(&out, "analyze residual", seed, config, &["residual_hist.csv"])?;
    let model = load_model(&model_path)?;
    let tau = tau.unwrap_or_else(|| model_default_steps(&model));
    let ann = match model {
        Model::Ann(net) => net,
        Model::Snn(_) => {
            return Err(CliError::Run(Error::Config(
                "residual analysis needs a source model".into(),
            )))
        }
    };
    let dataset = load_data_spec(&data, seed)?;
    let slice = &dataset.samples[..limit.min(dataset.len())];
    let mut snn = convert(&ann)?;
    let mut rs = RandomSource::new(seed, 0xa7a);
    let report = error_decompose(&ann, &mut snn, slice, tau, &mut rs)?;

    let mut csv = String::from("layer,bin_index,bin_lo,bin_hi,count\n");
    for layer in &report.layers {
        let width = (layer.hist_hi - layer.hist_lo) / HIST_BINS as f32;
        for (i, count) in layer.hist_counts.iter().enumerate() {
            let lo = layer.hist_lo + width * i as f32;
            let hi = lo + width;
            csv.push_str(&format!("{},{i},{lo},{hi},{count}\n", layer.layer));
        }
    }
    std::fs::write(out.join("residual_hist.csv"), csv).map_err(Error::from)?;
    for layer in &report.layers {
        println!(
            "layer {}: residual mean {:+.6} std {:.6}",
            layer.layer, layer.residual_mean, layer.residual_std
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze_theorem1(
    grid: bool,
    theta: f32,
    steps: u32,
    t: usize,
    delta: f32,
    n: usize,
    seed: u64,
    out: PathBuf,
) -> CliResult<()> {
    if !grid && (t < 1 || steps < 1) {
        return Err(usage("--T and --L must be >= 1"));
    }
    if n < 10_000 {
        return Err(usage("--n must be >= 10000"));
    }
    let config = serde_json::json!({
        "grid": grid,
        "theta": theta,
        "L": steps,
        "T": t,
        "delta": delta,
        "n": n,
        "seed": seed,
    });
    write_manifest(&out, "analyze theorem1", seed, config, &["theorem1.csv"])?;
    let mut csv = String::from("t,l,delta,mean,stderr,pass\n");
    let configs: Vec<(usize, u32, f32)> = if grid {
        let mut v = Vec::new();
        for &tt in &[1usize, 2, 4, 8] {
            for &ll in &[1u32, 2, 4, 8] {
                for &dd in &[0.0f32, 0.1, 0.5] {
                    v.push((tt, ll, dd));
                }
            }
        }
        v
    } else {
        vec![(t, steps, delta)]
    };
    let mut all_pass = true;
    for (i, (tt, ll, dd)) in configs.iter().enumerate() {
        let mut rs = RandomSource::new(seed, 0x7e0 + i as u64);
        let (mean, stderr) = theorem1_mc(theta, *ll, *tt, *dd, n, &mut rs)?;
        let pass = mean.abs() <= 4.0 * stderr;
        all_pass &= pass;
        csv.push_str(&format!("{tt},{ll},{dd},{mean},{stderr},{pass}\n"));
    }
    std::fs::write(out.join("theorem1.csv"), csv).map_err(Error::from)?;
    println!(
        "{} configuration(s), zero-expectation {}",
        configs.len(),
        if all_pass { "holds" } else { "VIOLATED" }
    );
    if !all_pass {
        return Err(CliError::Run(Error::Config(
            "zero-expectation check failed".into(),
        )));
    }
    Ok(())
}

fn cmd_analyze_decompose(
    model_path: PathBuf,
    data: String,
    t: Option<usize>,
    limit: usize,
    format: String,
    seed: u64,
    out: PathBuf,
) -> CliResult<()> {
    let format: ReportFormat = format
        .parse()
        .map_err(|_| usage(format!("--format must be csv or json, got {format:?}")))?;
    let config = serde_json::json!({
        "model": model_path.display().to_string(),
        "data": data,
        "T": t,
        "limit": limit,
        "format": match format { ReportFormat::Csv => "csv", ReportFormat::Json => "json" },
        "seed": seed,
    });
    let filename = match format {
        ReportFormat::Csv => "decompose.csv",
        ReportFormat::Json => "decompose.json",
    };
    write_manifest(&out, "analyze decompose", seed, config, &[filename])?;
    let model = load_model(&model_path)?;
    let t = t.unwrap_or_else(|| model_default_steps(&model));
    if t < 1 {
        return Err(usage("--T must be >= 1"));
    }
    let ann = match model {
        Model::Ann(net) => net,
        Model::Snn(_) => {
            return Err(CliError::Run(Error::Config(
                "decomposition needs a source model".into(),
            )))
        }
    };
    let dataset = load_data_spec(&data, seed)?;
    let slice = &dataset.samples[..limit.min(dataset.len())];
    let mut snn = convert(&ann)?;
    let mut rs = RandomSource::new(seed, 0xdec);
    let report = error_decompose(&ann, &mut snn, slice, t, &mut rs)?;
    emit_report(&report, &out.join(filename), format)?;
    for layer in &report.layers {
        println!(
            "layer {}: clip {:.4} quant {:.6} residual std {:.6}",
            layer.layer, layer.clip_fraction, layer.quant_grid_deviation, layer.residual_std
        );
    }
    Ok(())
}

fn cmd_analyze_overhead(
    data: String,
    arch: String,
    steps: u32,
    epochs: usize,
    seed: u64,
    out: PathBuf,
) -> CliResult<()> {
    if epochs < 1 {
        return Err(usage("--epochs must be >= 1"));
    }
    let config = serde_json::json!({
        "data": data,
        "arch": arch,
        "L": steps,
        "epochs": epochs,
        "seed": seed,
    });
    write_manifest(&out, "analyze overhead", seed, config, &["overhead.csv"])?;
    let (train, test) = load_train_test(&data, None, seed)?;
    let cfg = TrainConfig {
        epochs,
        steps,
        tau: steps as usize,
        seed,
        threshold_init: 1.0,
        ..TrainConfig::default()
    };
    let run = |enabled: bool| -> Result<Vec<f64>, Error> {
        let cal = CalibrationConfig {
            tau: steps as usize,
            enabled,
            ..CalibrationConfig::default()
        };
        let outcome = train_with_compensation(&train, &test, &arch, &cfg, &cal)?;
        Ok(outcome.history.iter().map(|r| r.wall_seconds).collect())
    };
    let baseline = run(false)?;
    let calibrated = run(true)?;
    let mut csv = String::from("epoch,baseline_seconds,calibrated_seconds\n");
    for (i, (b, c)) in baseline.iter().zip(&calibrated).enumerate() {
        csv.push_str(&format!("{},{b},{c}\n", i + 1));
    }
    std::fs::write(out.join("overhead.csv"), csv).map_err(Error::from)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&calibrated) / mean(&baseline);
    println!(
        "mean epoch: baseline {:.4}s calibrated {:.4}s ratio={ratio:.3}",
        mean(&baseline),
        mean(&calibrated)
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Convert(args) => cmd_convert(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => match args.which {
            AnalyzeCommand::Residual {
                model,
                data,
                tau,
                limit,
                seed,
                out,
            } => cmd_analyze_residual(model, data, tau, limit, seed, out),
            AnalyzeCommand::Theorem1 {
                grid,
                theta,
                steps,
                t,
                delta,
                n,
                seed,
                out,
            } => cmd_analyze_theorem1(grid, theta, steps, t, delta, n, seed, out),
            AnalyzeCommand::Decompose {
                model,
                data,
                t,
                limit,
                format,
                seed,
                out,
            } => cmd_analyze_decompose(model, data, t, limit, format, seed, out),
            AnalyzeCommand::Overhead {
                data,
                arch,
                steps,
                epochs,
                seed,
                out,
            } => cmd_analyze_overhead(data, arch, steps, epochs, seed, out),
        },
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SNNFORGE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SNNFORGE_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
