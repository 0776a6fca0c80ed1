use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdii_core::eval::relative_l2_error;
use cdii_core::grid::GridField;
use serde_json::Value;

fn cdii(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdii"));
    cmd.args(args).env_remove("CDII_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        stderr(o)
    );
}

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    /// Small run with a config file; `extra` is merged at the top level.
    fn new(extra: Value) -> Run {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let mut doc = serde_json::json!({
            "n": 64,
            "grid_res": 33,
            "eval_resolution": 33,
            "output_dir": root.join("out"),
            "train": {"epochs": 3, "batch_size": 16, "steps_per_epoch": 1, "log_every": 1,
                      "widths_gamma": [2, 6, 1], "widths_u": [2, 6, 1]}
        });
        for (k, v) in extra.as_object().unwrap() {
            doc[k] = v.clone();
        }
        let config = root.join("config.json");
        std::fs::write(&config, serde_json::to_string(&doc).unwrap()).unwrap();
        Run {
            _tmp: tmp,
            root,
            config,
        }
    }

    fn unit_gamma() -> Run {
        let run = Run::new(serde_json::json!({}));
        let grid = run.root.join("gamma1.csv");
        GridField::constant(33, 33, 1.0)
            .unwrap()
            .write_csv(&grid)
            .unwrap();
        let doc = serde_json::json!({
            "example": {"custom": {"path": grid}},
            "noise": {"kind": "multiplicative", "level": 0.0}
        });
        let mut base: Value =
            serde_json::from_str(&std::fs::read_to_string(&run.config).unwrap()).unwrap();
        for (k, v) in doc.as_object().unwrap() {
            base[k] = v.clone();
        }
        std::fs::write(&run.config, serde_json::to_string(&base).unwrap()).unwrap();
        run
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, sub: &str, extra: &[&str]) -> Output {
        let cfg = self.config.to_str().unwrap();
        let mut args = vec![sub, "--config", cfg];
        args.extend_from_slice(extra);
        cdii(&args, &[])
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn grid_values(p: &Path) -> Vec<f64> {
    GridField::read_csv(p).unwrap().values().to_vec()
}

#[test]
fn help_lists_flags() {
    let o = cdii(&["--help"], &[]);
    assert_ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["generate", "train", "evaluate", "size", "full"] {
        assert!(text.contains(sub), "{sub}");
    }
    for sub in ["generate", "train", "evaluate", "full"] {
        let o = cdii(&[sub, "--help"], &[]);
        let text = String::from_utf8_lossy(&o.stdout);
        for flag in ["--config", "--set", "--threads"] {
            assert!(text.contains(flag), "{sub} {flag}");
        }
    }
    let o = cdii(&["size", "--help"], &[]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--n", "--d", "--s", "--mu"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn generate_unit_conductivity() {
    let run = Run::unit_gamma();
    assert_ok(&run.run("generate", &[]));
    let data = run.out().join("data");
    for f in [
        "interior.csv",
        "boundary.csv",
        "provenance.json",
        "gamma_true.csv",
        "u_true.csv",
        "a_true.csv",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    for a in grid_values(&data.join("a_true.csv")) {
        assert!((a - 1.0).abs() <= 1e-8, "{a}");
    }

    let before: Vec<_> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.clone(), read(&p))
        })
        .collect();
    let echo = read(&run.out().join("config.json"));
    assert_ok(&run.run("generate", &[]));
    for (p, bytes) in before {
        assert_eq!(read(&p), bytes, "{}", p.display());
    }
    assert_eq!(read(&run.out().join("config.json")), echo);
}

#[test]
fn echoed_config_has_all_defaults() {
    let run = Run::unit_gamma();
    assert_ok(&run.run("generate", &[]));
    let echo: Value = serde_json::from_slice(&read(&run.out().join("config.json"))).unwrap();
    for key in [
        "example",
        "n",
        "grid_res",
        "gamma_floor",
        "noise",
        "seed",
        "output_dir",
        "eval_resolution",
        "train",
    ] {
        assert!(echo.get(key).is_some(), "{key}");
    }
    for key in [
        "lr",
        "beta1",
        "beta2",
        "eps_adam",
        "reg",
        "widths_gamma",
        "checkpoint_every",
        "shard_size",
    ] {
        assert!(echo["train"].get(key).is_some(), "train.{key}");
    }
}

#[test]
fn example_rows_match_n() {
    let run = Run::new(
        serde_json::json!({"n": 100000, "grid_res": 65, "noise": {"kind": "multiplicative", "level": 0.01}}),
    );
    assert_ok(&run.run("generate", &[]));
    let data = run.out().join("data");
    for f in ["interior.csv", "boundary.csv"] {
        let text = String::from_utf8(read(&data.join(f))).unwrap();
        assert_eq!(text.lines().count(), 100_001, "{f}");
    }
}

#[test]
fn invalid_config_exits_2_before_work() {
    let run = Run::new(serde_json::json!({"bogus": 1}));
    let o = run.run("generate", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bogus"));
    assert!(!run.out().exists());

    let run = Run::new(serde_json::json!({}));
    let o = run.run("full", &["--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr"));
    assert!(!run.out().exists());

    let o = run.run("generate", &["--set", "noise.level=-0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise.level"));
}

#[test]
fn set_overrides_and_seed_env() {
    let run = Run::unit_gamma();
    let cfg = run.config.to_str().unwrap();
    assert_ok(&cdii(
        &[
            "generate", "--config", cfg, "--set", "n=10", "--set", "seed=5",
        ],
        &[("CDII_SEED", "77")],
    ));
    let prov: Value =
        serde_json::from_slice(&read(&run.out().join("data/provenance.json"))).unwrap();
    assert_eq!(prov["n"], 10);
    assert_eq!(prov["seed"], 77);
    let o = cdii(&["generate", "--config", cfg], &[("CDII_SEED", "abc")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_learning_rate_keeps_init() {
    let run = Run::unit_gamma();
    assert_ok(&run.run("generate", &[]));
    assert_ok(&run.run("train", &["--set", "train.lr=0"]));
    let train = run.out().join("train");
    for stem in ["gamma", "u"] {
        let init = std::fs::read_dir(train.join("checkpoints/ckpt_0"))
            .unwrap()
            .count();
        assert!(init > 0);
        for entry in std::fs::read_dir(train.join("checkpoints/ckpt_0")).unwrap() {
            let name = entry.unwrap().file_name();
            if name.to_string_lossy().starts_with(stem) {
                assert_eq!(
                    read(&train.join("checkpoints/ckpt_0").join(&name)),
                    read(&train.join("final").join(&name))
                );
            }
        }
    }
    // 3 epochs, logged every epoch, plus epoch 0.
    let history = String::from_utf8(read(&train.join("history.csv"))).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);
    assert!(train.join("checkpoints/ckpt_3").exists());
}

#[test]
fn history_rows_follow_log_every() {
    let run = Run::unit_gamma();
    assert_ok(&run.run("generate", &[]));
    assert_ok(&run.run(
        "train",
        &["--set", "train.epochs=10", "--set", "train.log_every=5"],
    ));
    let history = String::from_utf8(read(&run.out().join("train/history.csv"))).unwrap();
    assert_eq!(history.lines().count(), 1 + 10 / 5 + 1);
}

#[test]
fn reduced_example_training_lowers_loss() {
    let run =
        Run::new(serde_json::json!({"n": 256, "noise": {"kind": "multiplicative", "level": 0.01}}));
    assert_ok(&run.run("generate", &[]));
    let o = run.run(
        "train",
        &[
            "--set",
            "train.epochs=60",
            "--set",
            "train.lr=0.01",
            "--set",
            "train.log_every=60",
            "--set",
            "train.batch_size=32",
        ],
    );
    assert_ok(&o);
    let history = String::from_utf8(read(&run.out().join("train/history.csv"))).unwrap();
    let totals: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 2);
    assert!(totals[1] < totals[0], "{totals:?}");
}

#[test]
fn evaluate_init_checkpoint() {
    let run = Run::new(serde_json::json!({"noise": {"kind": "additive", "level": 0.05}}));
    assert_ok(&run.run("generate", &[]));
    assert_ok(&run.run("train", &[]));
    let ckpt = run.out().join("train/checkpoints/ckpt_0");
    let ckpt = ckpt.to_str().unwrap();
    assert_ok(&run.run("evaluate", &["--checkpoint", ckpt]));
    let eval = run.out().join("eval");
    let first = read(&eval.join("metrics.json"));
    assert_ok(&run.run("evaluate", &["--checkpoint", ckpt]));
    assert_eq!(read(&eval.join("metrics.json")), first);

    let m: Value = serde_json::from_slice(&first).unwrap();
    for key in ["err_gamma", "err_u", "err_a"] {
        assert!(m[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(m["noise"]["kind"], "additive");
    assert_eq!(m["widths"]["u"], serde_json::json!([2, 6, 1]));

    // Recompute the errors from the written grids.
    let data = run.out().join("data");
    for (hat, truth, key) in [
        ("gamma_hat.csv", "gamma_true.csv", "err_gamma"),
        ("u_hat.csv", "u_true.csv", "err_u"),
        ("a_hat.csv", "a_true.csv", "err_a"),
    ] {
        let hat = GridField::read_csv(&eval.join(hat)).unwrap();
        let truth = GridField::read_csv(&data.join(truth)).unwrap();
        let err = relative_l2_error(&hat, &truth).unwrap();
        let reported = m[key].as_f64().unwrap();
        assert!(
            (err - reported).abs() <= 1e-12 * reported.max(1.0),
            "{key}: {err} vs {reported}"
        );
    }
    let g_hat = grid_values(&eval.join("gamma_hat.csv"));
    let g_true = grid_values(&data.join("gamma_true.csv"));
    let g_err = grid_values(&eval.join("gamma_abs_err.csv"));
    for k in 0..g_hat.len() {
        assert!((g_err[k] - (g_hat[k] - g_true[k]).abs()).abs() <= 1e-12);
    }
}

#[test]
fn evaluate_rejects_width_mismatch() {
    let run = Run::unit_gamma();
    assert_ok(&run.run("generate", &[]));
    assert_ok(&run.run("train", &[]));
    let o = run.run("evaluate", &["--set", "train.widths_u=[2,7,1]"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("widths_u"));
}

#[test]
fn schema_errors_name_file_and_line() {
    let run = Run::unit_gamma();
    assert_ok(&run.run("generate", &[]));
    let interior = run.out().join("data/interior.csv");
    let mut text = String::from_utf8(read(&interior)).unwrap();
    text = text.replacen('\n', "\n0.5,not_a_number,1\n", 1);
    std::fs::write(&interior, text).unwrap();
    let o = run.run("train", &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("interior.csv:2"), "{}", stderr(&o));

    let missing = run.root.join("nowhere");
    let o = run.run("train", &["--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn threads_do_not_change_results() {
    let run = Run::new(serde_json::json!({}));
    assert_ok(&run.run("full", &[]));
    let one = read(&run.out().join("eval/metrics.json"));
    let hist = read(&run.out().join("train/history.csv"));
    assert_ok(&run.run("full", &["--threads", "3"]));
    assert_eq!(read(&run.out().join("eval/metrics.json")), one);
    assert_eq!(read(&run.out().join("train/history.csv")), hist);
}

#[test]
fn size_command() {
    let o = cdii(
        &["size", "--n", "1", "--d", "2", "--s", "1", "--mu", "0.5"],
        &[],
    );
    assert_ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["S"], 1.0);
    assert_eq!(v["B"], 1.0);
    assert_eq!(v["log_base"], "natural");

    let o = cdii(&["size", "--n", "1000000"], &[]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    // Values computed with mpmath at 30 digits.
    let close = |k: &str, want: f64| {
        let got = v[k].as_f64().unwrap();
        assert!(
            (got - want).abs() <= 1e-12 * want.abs(),
            "{k}: {got} vs {want}"
        );
    };
    close("S", 1.090_271_748_995_059_6);
    close("B", 3.656_127_922_026_117);
    close("rate_exponent", -0.001_340_527_101_409_332_8);

    let small: Value = serde_json::from_slice(&cdii(&["size", "--n", "1000"], &[]).stdout).unwrap();
    assert!(small["S"].as_f64().unwrap() < v["S"].as_f64().unwrap());

    let o = cdii(&["size", "--n", "0"], &[]);
    assert_eq!(o.status.code(), Some(2));
}
