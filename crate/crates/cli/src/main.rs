use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use laber_cli::commands::{
    cmd_bench, cmd_train, cmd_train_sweep, cmd_tv_study, cmd_variance_study,
};
use laber_cli::config::{load_file, parse_seed_range, resolve, FileConfig, Overrides};
use laber_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "laber",
    version,
    about = "Importance-sampled experience replay experiments on tabular tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent (or a seed sweep) and write run artifacts.
    Train(RunArgs),
    /// Check the worked two-sample variance example against exact values.
    VarianceStudy {
        /// Directory for variance_study.csv (printed only when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with dual norm tracking and compare selection distributions.
    TvStudy(RunArgs),
    /// Time forward-only versus forward+backward passes across batch sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root seed for all random streams.
    #[arg(long)]
    seed: Option<u64>,

    /// Half-open seed range "a..b" for a parallel sweep (train only).
    #[arg(long, conflicts_with = "seed")]
    seeds: Option<String>,

    /// Environment steps to run.
    #[arg(long)]
    steps: Option<u64>,

    /// Sampler tag: uniform, per, ger, laber-<scaling>, per-laber-<scaling>,
    /// ger-laber-<scaling>.
    #[arg(long)]
    sampler: Option<String>,

    /// Large-batch factor (large batch = m * batch_size).
    #[arg(long)]
    m: Option<usize>,

    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,

    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated batch sizes to time.
    #[arg(long, default_value = "32,128,512")]
    batch_sizes: String,

    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "64,64")]
    hidden: String,

    /// Network input dimension.
    #[arg(long, default_value_t = 16)]
    input_dim: usize,

    /// Number of outputs (actions).
    #[arg(long, default_value_t = 4)]
    actions: usize,

    /// Timed passes per batch size (after 2 warmup passes).
    #[arg(long, default_value_t = 50)]
    passes: usize,

    /// Directory for bench.csv (printed only when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_usize_list(text: &str, flag: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{flag}: \"{s}\" is not a positive integer")))
        })
        .collect()
}

fn load_run_config(args: &RunArgs) -> CliResult<(FileConfig, Overrides)> {
    let file = match &args.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let overrides = Overrides {
        seed: args.seed,
        steps: args.steps,
        sampler: args.sampler.clone(),
        m: args.m,
        batch_size: args.batch_size,
        out: args.out.clone(),
    };
    Ok((file, overrides))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let sweep = args.seeds.as_deref().map(parse_seed_range).transpose()?;
            let (file, overrides) = load_run_config(&args)?;
            let resolved = resolve(file, &overrides, "runs/train")?;
            match sweep {
                Some(range) => cmd_train_sweep(&resolved, range),
                None => cmd_train(&resolved),
            }
        }
        Command::VarianceStudy { out } => cmd_variance_study(out.as_deref()),
        Command::TvStudy(args) => {
            if args.seeds.is_some() {
                return Err(CliError::Usage(
                    "tv-study runs a single seed; use --seed".into(),
                ));
            }
            let (file, overrides) = load_run_config(&args)?;
            let resolved = resolve(file, &overrides, "runs/tv-study")?;
            cmd_tv_study(&resolved).map(|_| ())
        }
        Command::Bench(args) => {
            let batch_sizes = parse_usize_list(&args.batch_sizes, "--batch-sizes")?;
            let hidden = parse_usize_list(&args.hidden, "--hidden")?;
            cmd_bench(
                &hidden,
                args.input_dim,
                args.actions,
                &batch_sizes,
                args.passes,
                args.out.as_deref(),
            )
            .map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LABER_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
