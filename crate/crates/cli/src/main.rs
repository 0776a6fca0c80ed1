use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdii_cli::{
    cmd_evaluate, cmd_full, cmd_generate, cmd_size, cmd_train, data_dir, eval_dir, exit_code,
    final_checkpoint_dir, train_dir,
};
use cdii_core::config::ExperimentConfig;
use cdii_core::trainer::{HistoryRow, LogHook};
use cdii_core::Result;

/// Conductivity and voltage reconstruction from interior current-density data.
#[derive(Parser)]
#[command(name = "cdii", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `--set train.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for sharded loss evaluation and grid work.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward problem and write a dataset with ground truth.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: <output_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the two networks on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: <output_dir>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training output directory [default: <output_dir>/train].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a checkpoint with the ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory [default: <output_dir>/train/final].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory [default: <output_dir>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory [default: <output_dir>/eval].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print network-size prescriptions and the rate exponent as JSON.
    Size {
        #[arg(long)]
        n: f64,
        #[arg(long, default_value_t = 2)]
        d: u32,
        #[arg(long, default_value_t = 1)]
        s: u32,
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
    },
    /// generate, train and evaluate in one go.
    Full {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let seed = ExperimentConfig::seed_from_env()?;
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides, seed)?;
    cfg.train.threads = common.threads;
    cfg.validate()?;
    Ok(cfg)
}

fn progress() -> Option<LogHook<'static>> {
    Some(Box::new(|row: &HistoryRow| {
        eprintln!(
            "epoch {:>6}  total {:.6e}  misfit {:.3e}  pde {:.3e}  bc {:.3e}  {:.1}s",
            row.epoch,
            row.values.total,
            row.values.misfit,
            row.values.pde_residual,
            row.values.boundary,
            row.wall_time
        );
    }))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load(&common)?;
            let out = out.unwrap_or_else(|| data_dir(&cfg));
            let ds = cmd_generate(&cfg, &out)?;
            eprintln!(
                "wrote {} interior samples to {}",
                ds.interior.len(),
                out.display()
            );
        }
        Command::Train { common, data, out } => {
            let cfg = load(&common)?;
            let data = data.unwrap_or_else(|| data_dir(&cfg));
            let out = out.unwrap_or_else(|| train_dir(&cfg));
            let outcome = cmd_train(&cfg, &data, &out, progress())?;
            eprintln!(
                "{} steps, history and checkpoints in {}",
                outcome.steps,
                out.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = load(&common)?;
            let checkpoint = checkpoint.unwrap_or_else(|| final_checkpoint_dir(&cfg));
            let data = data.unwrap_or_else(|| data_dir(&cfg));
            let out = out.unwrap_or_else(|| eval_dir(&cfg));
            print_json(&cmd_evaluate(&cfg, &checkpoint, &data, &out)?);
        }
        Command::Size { n, d, s, mu } => print_json(&cmd_size(n, d, s, mu)?),
        Command::Full { common } => {
            let cfg = load(&common)?;
            print_json(&cmd_full(&cfg, progress())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
