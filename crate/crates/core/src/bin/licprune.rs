use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use licprune::codec::CodecPreset;
use licprune::config::{ConfigOverrides, ExperimentConfig, PruneMode, OUTPUT_ROOT_ENV};
use licprune::criteria::Criterion;
use licprune::data::write_synthetic_corpus;
use licprune::eval::{bd_rate, emit_plot, read_curves_csv};
use licprune::pipeline::{evaluate_checkpoint, Pipeline, RunSpec};
use licprune::{Error, Result};

#[derive(Parser)]
#[command(name = "licprune", version, about = "Prune and quantize learned image compression models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Nas,
    Fixed,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config; command-line flags take precedence over it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Output directory (overrides the config file and the environment).
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    calib_dir: Option<PathBuf>,
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    /// l2, hrank or chip.
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    s_target: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Prune filters only (no filter channels).
    #[arg(long)]
    filters_only: bool,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    baseline_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let criterion = self.criterion.as_deref().map(str::parse::<Criterion>).transpose()?;
        let o = ConfigOverrides {
            preset: self.preset.map(|p| match p {
                PresetArg::Desk => CodecPreset::Desk,
                PresetArg::Full => CodecPreset::Full,
            }),
            lambdas: self.lambdas.clone(),
            output_dir: self.output.clone(),
            train_dir: self.train_dir.clone(),
            calib_dir: self.calib_dir.clone(),
            eval_dir: self.eval_dir.clone(),
            criterion,
            s_target: self.s_target,
            mode: self.mode.map(|m| match m {
                ModeArg::Nas => PruneMode::Nas,
                ModeArg::Fixed => PruneMode::Fixed,
            }),
            channels: if self.filters_only { Some(false) } else { None },
            group_size: self.group_size,
            bits: self.bits,
            seed: self.seed,
            baseline_steps: self.baseline_steps,
            finetune_steps: self.finetune_steps,
            batch_size: self.batch_size,
            crop_size: self.crop_size,
        };
        o.apply(&mut cfg);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one baseline codec per lambda.
    Train(ConfigArgs),
    /// Search pruning ratios (plans and traces only).
    Search(ConfigArgs),
    /// Prune, finetune, compact and evaluate.
    Prune(ConfigArgs),
    /// Prune, finetune, quantize and finetune with quantization in the loop.
    JointPq(ConfigArgs),
    /// Evaluate a checkpoint on an image directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate (%) of a test curve against a reference curve (CSV files).
    Bdrate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Write the tables and RD plot for every finished run.
    Report(ConfigArgs),
    /// Plot RD curves from CSV files as an SVG.
    Plot {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic image corpus (for smoke runs without a dataset).
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Train(a) => {
            let mut p = Pipeline::open(a.load()?)?;
            let ckpts = p.train_baselines()?;
            Ok(json!({ "checkpoints": ckpts }))
        }
        Command::Search(a) => {
            let cfg = a.load()?;
            let spec = RunSpec::from_config(&cfg, false);
            let mut p = Pipeline::open(cfg)?;
            let plans = p.search(&spec)?;
            Ok(json!({ "run": spec.name, "plans": plans.len(), "dir": p.run_dir(&spec.name) }))
        }
        Command::Prune(a) => run_spec(a.load()?, false),
        Command::JointPq(a) => {
            let cfg = a.load()?;
            let quantized = cfg.quant.enabled;
            run_spec(cfg, quantized)
        }
        Command::Eval { checkpoint, eval_dir, out } => {
            let (bpp, psnr) = evaluate_checkpoint(&checkpoint, &eval_dir, &out)?;
            Ok(json!({ "bpp": bpp, "psnr_db": psnr, "csv": out }))
        }
        Command::Bdrate { reference, test } => {
            let r = first_curve(&reference)?;
            let t = first_curve(&test)?;
            Ok(json!({ "bd_rate_percent": bd_rate(&r, &t)? }))
        }
        Command::Report(a) => {
            let mut p = Pipeline::open(a.load()?)?;
            let tables = p.report()?;
            print!("{}", std::fs::read_to_string(&tables)?);
            Ok(json!({ "tables": tables }))
        }
        Command::Plot { curves, out } => {
            let mut all = Vec::new();
            for c in &curves {
                all.extend(read_curves_csv(c)?);
            }
            let csv = emit_plot(&all, &out)?;
            Ok(json!({ "svg": out, "csv": csv }))
        }
        Command::Synth { dir, count, height, width, seed } => {
            let files = write_synthetic_corpus(&dir, count, height, width, seed)?;
            Ok(json!({ "images": files.len(), "dir": dir }))
        }
    }
}

fn run_spec(cfg: ExperimentConfig, quantized: bool) -> Result<serde_json::Value> {
    let spec = RunSpec::from_config(&cfg, quantized);
    let mut p = Pipeline::open(cfg)?;
    let s = p.run(&spec)?;
    Ok(json!({
        "run": spec.name,
        "bd_rate_percent": s.bd_rate,
        "sparsity": s.mean_s(),
        "compression_ratio": s.mean_ratio(),
        "converged": s.converged(),
    }))
}

fn first_curve(path: &std::path::Path) -> Result<licprune::eval::RDCurve> {
    read_curves_csv(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Evaluation(format!("{} holds no curve", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{}", v);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "error": e.kind(), "message": e.to_string(), "output_root_env": OUTPUT_ROOT_ENV });
            eprintln!("{}", record);
            ExitCode::from(2)
        }
    }
}
