use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transcc::config::Variant;
use transcc::data::{generate_dataset, pgm, Dataset, PhantomConfig, Split};
use transcc::gradcheck::suite::{run_suite, SUITE_HEADER};
use transcc::metrics::Mask;
use transcc::run_config::RunConfig;
use transcc::tensor::Tensor;
use transcc::train::{checkpoint, evaluate, train, THRESHOLD};
use transcc::TransCC;

/// File name of the effective configuration inside a run directory.
const EFFECTIVE_CONFIG: &str = "config.txt";

#[derive(Parser)]
#[command(name = "transcc", version, about = "Train and evaluate TransCC vessel segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic vessel phantoms and a manifest.
    GenerateData(GenerateArgs),
    /// Train a model on the training split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print per-module parameter counts.
    CountParams(CountArgs),
}

#[derive(Args)]
struct Overrides {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.depth=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    /// Default configuration with the file and `--set` overrides applied.
    /// Returns the configuration and every key set explicitly.
    fn resolve(&self) -> Result<(RunConfig, Vec<String>), String> {
        let mut cfg = RunConfig::default();
        let mut keys = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            keys = cfg.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v).map_err(|e| e.to_string())?;
            keys.push(k.to_string());
        }
        Ok((cfg, keys))
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Seeds both the phantoms and the train/test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    /// Per-sample CSV; defaults to `metrics_<split>.csv` beside the checkpoint.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random draws per case (seeds 0..N).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct CountArgs {
    /// Count the parameters of a saved model instead of a configuration.
    #[arg(long, conflicts_with_all = ["config", "set", "variant"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::CountParams(a) => count_params_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type CmdResult = Result<(), String>;

fn err(e: transcc::Error) -> String {
    e.to_string()
}

fn generate_data(a: GenerateArgs) -> CmdResult {
    let (cfg, _) = a.overrides.resolve()?;
    let phantoms = PhantomConfig {
        image_size: a.size,
        seed: a.seed,
        ..cfg.data
    };
    let ds = generate_dataset(&a.out, &phantoms, a.count).map_err(err)?;
    let train = ds.split(Split::Train).len();
    println!(
        "wrote {} phantoms ({train} train, {} test) at {}x{} to {}",
        ds.entries.len(),
        ds.entries.len() - train,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let (mut cfg, mut keys) = a.overrides.resolve()?;
    let flags = [
        ("train.iterations", a.iterations.map(|v| v.to_string())),
        ("model.variant", a.variant.map(|v| v.to_string())),
        ("train.seed", a.seed.map(|v| v.to_string())),
        ("train.batch_size", a.batch_size.map(|v| v.to_string())),
        ("train.learning_rate", a.learning_rate.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v).map_err(err)?;
            keys.push(key.to_string());
        }
    }
    let data = Dataset::load(&a.data).map_err(err)?;
    let samples = data.read_split(Split::Train).map_err(err)?;
    if !keys.iter().any(|k| k == "model.image_size") {
        if let Some(s) = samples.first() {
            cfg.model.image_size = s.image.height;
        }
    }
    cfg.validate().map_err(err)?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    let echo = a.out.join(EFFECTIVE_CONFIG);
    fs::write(&echo, cfg.to_text()).map_err(|e| format!("{}: {e}", echo.display()))?;

    let mut model = TransCC::<f32>::new(&cfg.model, cfg.train.seed).map_err(err)?;
    println!(
        "training {} ({} parameters) on {} samples for {} iterations",
        cfg.model.variant,
        model.count_params().total,
        samples.len(),
        cfg.train.iterations
    );
    let every = (cfg.train.iterations / 20).max(1);
    let total = cfg.train.iterations;
    let losses = train(&mut model, &samples, &cfg.train, Some(&a.out), |it, loss| {
        if it % every == 0 || it == total {
            println!("iteration {it:>6}  loss {loss:.6}");
        }
    })
    .map_err(err)?;
    if let Some(last) = losses.last() {
        println!("final loss {last:.6}");
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let mut model = checkpoint::load(&a.checkpoint).map_err(err)?;
    let data = Dataset::load(&a.data).map_err(err)?;
    let samples = data.read_split(a.split).map_err(err)?;
    let report = evaluate(&mut model, &samples, a.batch_size).map_err(err)?;
    println!("{report}");
    let csv = a.csv.unwrap_or_else(|| {
        let dir = a.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("metrics_{}.csv", a.split))
    });
    fs::write(&csv, report.to_csv()).map_err(|e| format!("{}: {e}", csv.display()))?;
    println!("per-sample metrics written to {}", csv.display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> CmdResult {
    let mut model = checkpoint::load(&a.checkpoint).map_err(err)?;
    let image = pgm::read_image(&a.image).map_err(err)?;
    let (h, w) = (image.height, image.width);
    let x = Tensor::from_vec(&[1, 1, h, w], image.data).map_err(err)?;
    let probs = model.predict(&x).map_err(err)?;
    let mask = Mask::threshold(h, w, probs.data(), THRESHOLD).map_err(err)?;
    pgm::write_mask(&a.out, &mask).map_err(err)?;
    println!("{} of {} pixels labelled vessel; mask written to {}", mask.count(), h * w, a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let seeds: Vec<u64> = (0..a.seeds.max(1)).collect();
    let entries = run_suite(&seeds).map_err(err)?;
    println!("{SUITE_HEADER}");
    for e in &entries {
        println!("{e}");
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("gradient check failed for {}", failed.join(", ")))
    }
}

fn count_params_cmd(a: CountArgs) -> CmdResult {
    let model = match &a.checkpoint {
        Some(path) => checkpoint::load(path).map_err(err)?,
        None => {
            let (mut cfg, _) = a.overrides.resolve()?;
            if let Some(v) = a.variant {
                cfg.model.variant = v;
            }
            TransCC::<f32>::new(&cfg.model, 0).map_err(err)?
        }
    };
    println!("variant {}", model.config.variant);
    println!("{}", model.count_params());
    Ok(())
}
