//! Subcommands of the `cdii` binary.
//!
//! Directory layout under `output_dir`:
//!
//! ```text
//! config.json               echoed configuration, defaults filled in
//! data/                     interior.csv boundary.csv provenance.json
//!                           gamma_true.csv u_true.csv a_true.csv
//! train/history.csv
//! train/checkpoints/ckpt_*  periodic checkpoints
//! train/final/              final networks
//! eval/                     metrics.json and grid CSVs
//! ```

use std::path::{Path, PathBuf};

use cdii_core::config::ExperimentConfig;
use cdii_core::data::{build_dataset_with, Dataset, GroundTruth};
use cdii_core::eval::{evaluate, write_report, Metrics};
use cdii_core::grid::GridField;
use cdii_core::sizing::{prescribe, SizingInput, SizingOutput};
use cdii_core::trainer::{
    read_checkpoint, train_with, write_checkpoint, LogHook, TrainOptions, TrainOutcome,
};
use cdii_core::{Error, Result};

pub const GAMMA_TRUE_CSV: &str = "gamma_true.csv";
pub const U_TRUE_CSV: &str = "u_true.csv";
pub const A_TRUE_CSV: &str = "a_true.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const CONFIG_JSON: &str = "config.json";

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const IO: i32 = 4;
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        exit::NUMERICAL
    } else if err.is_io() || matches!(err, Error::Parse { .. }) {
        exit::IO
    } else {
        exit::CONFIG
    }
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

pub fn train_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("train")
}

pub fn final_checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    train_dir(cfg).join("final")
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("eval")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_echo(cfg: &ExperimentConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(CONFIG_JSON);
    std::fs::write(&path, cfg.to_json_pretty() + "\n").map_err(|source| Error::Io { path, source })
}

pub fn write_ground_truth(truth: &GroundTruth, dir: &Path) -> Result<()> {
    truth.gamma.write_csv(&dir.join(GAMMA_TRUE_CSV))?;
    truth.u.write_csv(&dir.join(U_TRUE_CSV))?;
    truth.a.write_csv(&dir.join(A_TRUE_CSV))
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    Ok(GroundTruth {
        gamma: GridField::read_csv(&dir.join(GAMMA_TRUE_CSV))?,
        u: GridField::read_csv(&dir.join(U_TRUE_CSV))?,
        a: GridField::read_csv(&dir.join(A_TRUE_CSV))?,
    })
}

/// Builds the dataset and ground-truth grids into `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let id = cfg.example_id()?;
    let (dataset, truth) = build_dataset_with(
        &id,
        cfg.n,
        &cfg.noise_spec(),
        cfg.grid_res,
        cfg.seed,
        cfg.data_options(),
    )?;
    write_echo(cfg)?;
    create_dir(out)?;
    dataset.write(out)?;
    write_ground_truth(&truth, out)?;
    Ok(dataset)
}

/// Trains on the dataset in `data`, writing history and checkpoints into
/// `out`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    on_log: Option<LogHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::read(data)?;
    write_echo(cfg)?;
    create_dir(out)?;
    let train_cfg = cfg.train_config();
    let outcome = train_with(
        &dataset,
        &train_cfg,
        TrainOptions {
            checkpoint_dir: Some(out.join("checkpoints")),
            on_log,
        },
    )?;
    outcome.history.write_csv(&out.join(HISTORY_CSV))?;
    write_checkpoint(&out.join("final"), &outcome.gamma, &outcome.u)?;
    Ok(outcome)
}

/// Evaluates a checkpoint against the ground truth stored in `data`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
) -> Result<Metrics> {
    cfg.validate()?;
    let (gamma, u) = read_checkpoint(checkpoint)?;
    for (field, want, got) in [
        (
            "train.widths_gamma",
            &cfg.train.widths_gamma,
            gamma.widths(),
        ),
        ("train.widths_u", &cfg.train.widths_u, u.widths()),
    ] {
        if want.as_slice() != got {
            return Err(Error::Config {
                field: field.into(),
                message: format!(
                    "checkpoint {} has widths {got:?}, config has {want:?}",
                    checkpoint.display()
                ),
            });
        }
    }
    let truth = read_ground_truth(data)?;
    let report = evaluate(
        &gamma,
        &u,
        &truth,
        cfg.eval_resolution,
        cfg.train_config().parallelism(),
    )?;
    let metrics = cfg.metrics(report.err_gamma, report.err_u, report.err_a);
    write_echo(cfg)?;
    write_report(&report, &metrics, out)?;
    Ok(metrics)
}

pub fn cmd_size(n: f64, d: u32, s: u32, mu: f64) -> Result<SizingOutput> {
    prescribe(&SizingInput { n, d, s, mu })
}

/// generate, train and evaluate with the default layout.
pub fn cmd_full(cfg: &ExperimentConfig, on_log: Option<LogHook<'_>>) -> Result<Metrics> {
    let data = data_dir(cfg);
    cmd_generate(cfg, &data)?;
    cmd_train(cfg, &data, &train_dir(cfg), on_log)?;
    cmd_evaluate(cfg, &final_checkpoint_dir(cfg), &data, &eval_dir(cfg))
}
