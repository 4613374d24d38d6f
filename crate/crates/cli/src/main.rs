//! `pcgp`: generate data, train, evaluate and predict with the physics-constrained
//! deep-kernel GP.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcgp::datagen::{self, Dataset};
use pcgp::deepnet::{load_network, save_network};
use pcgp::physics::ScalarField;
use pcgp::trainer::{self, evaluate, histogram, history_csv, Surrogate, TrainConfig};

const CHECKPOINT_FILE: &str = "checkpoint.pcgpnet";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "pcgp", version, about = "Physics-constrained deep-kernel GP surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample diffusivity fields and solve for reference solutions.
    Generate(GenerateArgs),
    /// Train the encoder/decoder on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set and export plot data.
    Eval(EvalArgs),
    /// Predict the solution for one diffusivity field.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 16)]
    nx: usize,
    #[arg(long, default_value_t = 16)]
    ny: usize,
    /// Correlation length of the log-diffusivity field.
    #[arg(long = "l", default_value_t = 0.2)]
    length: f64,
    /// Number of Karhunen-Loeve modes kept.
    #[arg(long, default_value_t = 64)]
    kl: usize,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// File of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-epoch progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained network; its directory's config.txt is used unless --config is given.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training set the surrogate conditions on.
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    test: PathBuf,
    /// Test instances exported as field grids.
    #[arg(long, default_value_t = 4)]
    fields: usize,
    #[arg(long, default_value_t = 30)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Diffusivity grid as CSV, one line per grid row from y = 0.
    #[arg(long, conflicts_with_all = ["dataset", "index"])]
    input_csv: Option<PathBuf>,
    #[arg(long, requires = "index")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    index: Option<usize>,
    /// Also report the posterior variance.
    #[arg(long)]
    variance: bool,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<pcgp::Error> for Failure {
    fn from(e: pcgp::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load(path: &Path) -> CliResult<Dataset> {
    datagen::load_dataset(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn build_config(args: &ConfigArgs, fallback: Option<&Path>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let file = args.config.as_deref().or(fallback.filter(|p| p.exists()));
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k, v).map_err(usage)?;
    }
    Ok(cfg)
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let basis = datagen::build_kl_basis(a.nx, a.ny, a.length, a.kl).map_err(usage)?;
    let ds = datagen::generate_with_basis(&basis, a.count, a.seed)?;
    datagen::save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} records on a {}x{} grid to {} (retained KL mass {:.4})",
        ds.len(),
        ds.nx(),
        ds.ny(),
        a.out.display(),
        basis.retained_mass()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = build_config(&a.config, None)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    cfg.validate().map_err(usage)?;
    let (train_set, val_set) = (load(&a.train)?, load(&a.val)?);
    fs::create_dir_all(&a.out)?;
    let quiet = a.quiet;
    let outcome = trainer::train_with(&train_set, &val_set, &cfg, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  train_loss {:.6e}  val_mse {:.6e}",
                r.epoch, r.train_loss, r.val_mse
            );
        }
    })?;
    save_network(&outcome.best.params, a.out.join(CHECKPOINT_FILE))?;
    fs::write(a.out.join("history.csv"), history_csv(&outcome.history))?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;
    println!(
        "best_epoch={} val_mse={:.10e}",
        outcome.best.epoch, outcome.best.val_mse
    );
    Ok(())
}

/// Loads the network and the configuration it was trained with.
fn load_model(a: &ModelArgs) -> CliResult<(pcgp::deepnet::NetworkParams, TrainConfig, Dataset)> {
    let sidecar = a.checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    let cfg = build_config(&a.config, sidecar.as_deref())?;
    cfg.validate().map_err(usage)?;
    let params = load_network(&a.checkpoint)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.checkpoint.display())))?;
    Ok((params, cfg, load(&a.train)?))
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let (params, cfg, train_set) = load_model(&a.model)?;
    let test = load(&a.test)?;
    let ev = evaluate(&params, &train_set, &test, &cfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("metrics.txt"), ev.report())?;
    for (k, (pred, rec)) in ev.predictions.iter().zip(test.records()).take(a.fields).enumerate() {
        let diff = pred.with_values(
            pred.values().iter().zip(rec.solution.values()).map(|(p, t)| p - t).collect(),
        )?;
        output::write_field(&a.out, &format!("instance{k}_prediction"), pred)?;
        output::write_field(&a.out, &format!("instance{k}_truth"), &rec.solution)?;
        output::write_field(&a.out, &format!("instance{k}_difference"), &diff)?;
    }
    for (k, p) in ev.probes.iter().enumerate() {
        let h = histogram(&p.predicted, &p.reference, a.bins);
        fs::write(a.out.join(format!("probe{k}_histogram.csv")), output::histogram_csv(&h))?;
    }
    println!("test_mse={:.10e} baseline_mse={:.10e}", ev.test_mse, ev.baseline_mse);
    Ok(())
}

fn predict(a: &PredictArgs) -> CliResult<()> {
    let (params, cfg, train_set) = load_model(&a.model)?;
    let field = match (&a.input_csv, &a.dataset, a.index) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path)?;
            let (nx, ny, values) = output::parse_grid_csv(&text)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            if values.iter().any(|v| *v <= 0.0) {
                return Err(Failure::Runtime("diffusivity must be strictly positive".into()));
            }
            ScalarField::new(nx, ny, 1.0 / (nx.max(2) - 1) as f64, values)?
        }
        (None, Some(path), Some(i)) => {
            let ds = load(path)?;
            ds.records()
                .get(i)
                .ok_or_else(|| usage(format!("--index {i} out of range for {} records", ds.len())))?
                .diffusivity
                .clone()
        }
        _ => return Err(usage("give --input-csv or --dataset with --index")),
    };
    let surrogate = Surrogate::new(&params, &train_set, &cfg)?;
    let pred = surrogate.predict(&field)?;
    fs::write(&a.out, output::field_csv(&pred))?;
    if a.variance {
        println!("variance={:.10e}", surrogate.variance([&field])?[0]);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
