//! `rdc`: generate synthetic datasets, train, evaluate and run ablation grids.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdc_core::harness::{
    ablate, evaluate, generate, load_config, parse_axis, train, write_report, METRICS_HEADER,
    REPORT_FILE,
};
use rdc_core::par::Executor;
use rdc_core::synthworld::{LabelSetting, WorldConfig};
use rdc_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rdc",
    version,
    about = "Region-aware distributional contrast experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train one model.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval(EvalArgs),
    /// Train a grid of configurations over several seeds.
    Ablate(AblateArgs),
    /// Rebuild report.csv from an ablation directory's runs.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long = "num-classes", alias = "num_classes", default_value_t = 5)]
    num_classes: usize,
    #[arg(long, default_value = "onelabel")]
    setting: String,
    #[arg(long = "color-noise", alias = "color_noise")]
    color_noise: Option<f64>,
    #[arg(long)]
    shading: Option<f64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Run-config keys as flags; each overrides the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "data-dir", alias = "data_dir")]
    data_dir: Option<String>,
    #[arg(long = "out-dir", alias = "out_dir")]
    out_dir: Option<String>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    extraction: Option<String>,
    #[arg(long = "patch-size", alias = "patch_size")]
    patch_size: Option<String>,
    #[arg(long)]
    distance: Option<String>,
    #[arg(long = "cov-mode", alias = "cov_mode")]
    cov_mode: Option<String>,
    #[arg(long = "negative-source", alias = "negative_source")]
    negative_source: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long = "lambda-rc", alias = "lambda_rc")]
    lambda_rc: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    threads: Option<String>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let pairs = [
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("setting", &self.setting),
            ("strategy", &self.strategy),
            ("extraction", &self.extraction),
            ("patch_size", &self.patch_size),
            ("distance", &self.distance),
            ("cov_mode", &self.cov_mode),
            ("negative_source", &self.negative_source),
            ("tau", &self.tau),
            ("eps", &self.eps),
            ("lambda_rc", &self.lambda_rc),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("threads", &self.threads),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "data-dir", alias = "data_dir")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Grid axis: an enumerated key (`strategy`) or `key=v1,v2`. Repeatable.
    #[arg(long = "axis", required = true)]
    axes: Vec<String>,
    /// Comma-separated run seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Ablation output directory holding runs.csv.
    dir: PathBuf,
}

fn run_gen(a: &GenArgs) -> Result<()> {
    let setting: LabelSetting = a.setting.parse().map_err(config_error)?;
    let mut world = WorldConfig {
        height: a.height,
        width: a.width,
        num_classes: a.num_classes,
        seed: a.seed,
        ..WorldConfig::default()
    };
    if let Some(v) = a.color_noise {
        world.color_noise = v;
    }
    if let Some(v) = a.shading {
        world.shading = v;
    }
    generate(
        &world,
        a.count,
        setting,
        &a.out,
        &Executor::with_threads(a.threads),
    )?;
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

fn run_train(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a.flags.config.as_deref(), &a.flags.overrides())?;
    let out = train(&cfg)?;
    println!("{METRICS_HEADER}");
    for r in out.records.iter().rev().take(2).rev() {
        println!("{}", r.csv_row());
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let rec = evaluate(&a.checkpoint, &a.data_dir, a.threads)?;
    println!("{METRICS_HEADER}");
    println!("{}", rec.csv_row());
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid seed '{s}' in '{text}'")))
        })
        .collect()
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(a.flags.config.as_deref(), &a.flags.overrides())?;
    let axes = a
        .axes
        .iter()
        .map(|s| parse_axis(s))
        .collect::<Result<Vec<_>>>()?;
    let seeds = parse_seeds(&a.seeds)?;
    let report = ablate(&cfg, &axes, &seeds)?;
    println!("wrote {}", report.display());
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let cells = write_report(&a.dir)?;
    println!("cell,runs,miou,aerr,merr");
    for c in &cells {
        println!(
            "{},{},{:.4}±{:.4},{:.4}±{:.4},{:.2}±{:.2}",
            c.values.join("/"),
            c.runs,
            c.mean[0],
            c.std[0],
            c.mean[1],
            c.std[1],
            c.mean[2],
            c.std[2]
        );
    }
    println!("wrote {}", a.dir.join(REPORT_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
