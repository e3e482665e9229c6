use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use boxadapt::cli::{cmd_adapt, cmd_eval, cmd_gen_data, cmd_train_source, AdaptArgs, CommonArgs};
use boxadapt::synthdata::DomainTag;

#[derive(Parser)]
#[command(name = "boxadapt", version, about = "Sim-to-real adaptation of a 3D box refinement stage")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for parallel inference (0: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_parser = parse_domain)]
        domain: DomainTag,
        /// Number of frames (default from the config).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Supervised training on a labeled (source) dataset.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the 7-value box uncertainty instead of per-corner variances.
        #[arg(long)]
        bf_au: bool,
    },
    /// Mean-teacher adaptation to an unlabeled target dataset.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Source-trained checkpoint both networks start from.
        #[arg(long)]
        init: PathBuf,
        /// Labeled target split used only for per-epoch metrics.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Disable frame-level curriculum sampling.
        #[arg(long)]
        no_fl_na: bool,
        /// Disable object-level uncertainty weighting.
        #[arg(long)]
        no_ol_na: bool,
        #[arg(long)]
        bf_au: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Average precision and uncertainty diagnostics on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the ground truth itself (debugging aid).
        #[arg(long)]
        oracle: bool,
    },
}

fn parse_domain(s: &str) -> Result<DomainTag, String> {
    s.parse().map_err(|e: boxadapt::Error| e.to_string())
}

fn run(cli: Cli) -> boxadapt::Result<()> {
    let common = CommonArgs {
        config: cli.common.config,
        seed: cli.common.seed,
        out: cli.common.out,
        threads: cli.common.threads,
        set: cli.common.set,
    };
    let threads = common.resolve()?.threads;
    if threads > 0 {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::GenData { domain, frames, split } => {
            let m = cmd_gen_data(&common, domain, frames, &split)?;
            println!("wrote {} {} frames to {}", m.frames.len(), m.domain.as_str(), common.out.display());
        }
        Command::TrainSource { data, epochs, bf_au } => {
            println!("{}", cmd_train_source(&common, &data, epochs, bf_au)?);
        }
        Command::Adapt { source, target, init, heldout, no_fl_na, no_ol_na, bf_au, epochs } => {
            let args = AdaptArgs { source, target, init, heldout, no_fl_na, no_ol_na, bf_au, epochs };
            println!("{}", cmd_adapt(&common, &args)?);
        }
        Command::Eval { checkpoint, data, oracle } => {
            let (_, summary) = cmd_eval(&common, checkpoint.as_deref(), &data, oracle)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
