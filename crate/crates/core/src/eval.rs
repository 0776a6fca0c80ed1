//! Grid reconstructions, relative L2 errors and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Plain;
use crate::data::{GroundTruth, NoiseKind};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::io::write_json;
use crate::loss::{predicted_data, RegularizerKind, RegularizerSpec};
use crate::network::MlpParams;
use crate::parallel::Parallelism;

pub const GAMMA_HAT_CSV: &str = "gamma_hat.csv";
pub const U_HAT_CSV: &str = "u_hat.csv";
pub const A_HAT_CSV: &str = "a_hat.csv";
pub const GAMMA_ERR_CSV: &str = "gamma_abs_err.csv";
pub const U_ERR_CSV: &str = "u_abs_err.csv";
pub const METRICS_JSON: &str = "metrics.json";

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 3 {
        return Err(Error::Invalid(format!(
            "resolution must be >= 3, got {resolution}"
        )));
    }
    Ok(())
}

fn grid_from_nodes(
    resolution: usize,
    par: Parallelism,
    f: impl Fn([f64; 2]) -> f64 + Sync + Send,
) -> Result<GridField> {
    let d = (resolution - 1) as f64;
    let mut values = vec![0.0; resolution * resolution];
    par.for_each_chunk_mut(&mut values, resolution, |j, row| {
        for (i, v) in row.iter_mut().enumerate() {
            *v = f([i as f64 / d, j as f64 / d]);
        }
    });
    GridField::new(resolution, resolution, values)
}

/// Network values at every node of a `resolution x resolution` grid.
pub fn evaluate_on_grid(net: &MlpParams, resolution: usize, par: Parallelism) -> Result<GridField> {
    check_resolution(resolution)?;
    grid_from_nodes(resolution, par, |x| net.eval(x))
}

/// `gamma_hat |grad u_hat|` at every node, with no smoothing in the norm.
pub fn recovered_data_field(
    gamma: &MlpParams,
    u: &MlpParams,
    resolution: usize,
    par: Parallelism,
) -> Result<GridField> {
    check_resolution(resolution)?;
    let (g, uu) = (gamma.bind_plain(), u.bind_plain());
    grid_from_nodes(resolution, par, |x| {
        let gv = g.forward(&mut Plain, x).expect("plain evaluation");
        let du = uu
            .forward_gradient(&mut Plain, x)
            .expect("plain evaluation");
        predicted_data(&mut Plain, gv, du.grad, 0.0).expect("plain evaluation")
    })
}

fn trapezoid_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k == n - 1 {
        0.5
    } else {
        1.0
    }
}

/// Trapezoidal approximation of the L2 norm over the unit square.
pub fn l2_norm(f: &GridField) -> f64 {
    let (nx, ny) = (f.nx(), f.ny());
    let mut s = 0.0;
    for j in 0..ny {
        let wy = trapezoid_weight(j, ny);
        for i in 0..nx {
            let v = f.get(i, j);
            s += wy * trapezoid_weight(i, nx) * v * v;
        }
    }
    (s * f.hx() * f.hy()).sqrt()
}

/// `||truth - pred|| / ||truth||`.
pub fn relative_l2_error(pred: &GridField, truth: &GridField) -> Result<f64> {
    let diff = pred.zip_with(truth, |a, b| a - b)?;
    let denom = l2_norm(truth);
    if denom == 0.0 {
        return Err(Error::Invalid("reference field has zero norm".into()));
    }
    Ok(l2_norm(&diff) / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub err_gamma: f64,
    pub err_u: f64,
    pub err_a: f64,
    pub gamma_hat: GridField,
    pub u_hat: GridField,
    pub a_hat: GridField,
    pub gamma_abs_err: GridField,
    pub u_abs_err: GridField,
}

/// Compares the reconstructions with the ground truth on a
/// `resolution x resolution` grid; the truth is resampled if needed.
pub fn evaluate(
    gamma: &MlpParams,
    u: &MlpParams,
    truth: &GroundTruth,
    resolution: usize,
    par: Parallelism,
) -> Result<EvalReport> {
    let gamma_hat = evaluate_on_grid(gamma, resolution, par)?;
    let u_hat = evaluate_on_grid(u, resolution, par)?;
    let a_hat = recovered_data_field(gamma, u, resolution, par)?;
    let g_true = truth.gamma.resample(resolution)?;
    let u_true = truth.u.resample(resolution)?;
    let a_true = truth.a.resample(resolution)?;
    Ok(EvalReport {
        err_gamma: relative_l2_error(&gamma_hat, &g_true)?,
        err_u: relative_l2_error(&u_hat, &u_true)?,
        err_a: relative_l2_error(&a_hat, &a_true)?,
        gamma_abs_err: gamma_hat.zip_with(&g_true, |a, b| (a - b).abs())?,
        u_abs_err: u_hat.zip_with(&u_true, |a, b| (a - b).abs())?,
        gamma_hat,
        u_hat,
        a_hat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEcho {
    pub kind: NoiseKind,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegEcho {
    pub kind: RegularizerKind,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zeta: Option<f64>,
}

impl From<&RegularizerSpec> for RegEcho {
    fn from(r: &RegularizerSpec) -> Self {
        RegEcho {
            kind: r.kind,
            alpha: r.alpha,
            zeta: (r.kind == RegularizerKind::TvHuber).then_some(r.zeta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthsEcho {
    pub gamma: Vec<usize>,
    pub u: Vec<usize>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub example: String,
    pub noise: NoiseEcho,
    pub reg: RegEcho,
    pub err_gamma: f64,
    pub err_u: f64,
    pub err_a: f64,
    pub epochs: usize,
    pub n: usize,
    pub widths: WidthsEcho,
    pub seed: u64,
}

/// Writes `metrics.json` and the five grid CSVs into `out_dir`.
pub fn write_report(report: &EvalReport, metrics: &Metrics, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(METRICS_JSON), metrics)?;
    for (name, grid) in [
        (GAMMA_HAT_CSV, &report.gamma_hat),
        (U_HAT_CSV, &report.u_hat),
        (A_HAT_CSV, &report.a_hat),
        (GAMMA_ERR_CSV, &report.gamma_abs_err),
        (U_ERR_CSV, &report.u_abs_err),
    ] {
        grid.write_csv(&out_dir.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ground_truth, DataOptions, ExampleId};
    use proptest::prelude::*;

    fn field(seed: u64) -> GridField {
        GridField::from_fn(17, 17, |[x, y]| {
            1.0 + (3.0 * x + seed as f64).sin() * (2.0 * y).cos()
        })
        .unwrap()
    }

    #[test]
    fn zero_network_gives_zero_grid() {
        let z = MlpParams::zeros(&[2, 4, 1]).unwrap();
        let g = evaluate_on_grid(&z, 9, Parallelism::Sequential).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        assert!(evaluate_on_grid(&z, 2, Parallelism::Sequential).is_err());
    }

    #[test]
    fn grid_matches_pointwise_forward() {
        let p = MlpParams::init_xavier(&[2, 8, 8, 1], 4).unwrap();
        let g = evaluate_on_grid(&p, 11, Parallelism::Threads(2)).unwrap();
        for (i, j) in [(0, 0), (3, 7), (10, 10)] {
            assert_eq!(g.get(i, j), p.eval(g.coord(i, j)));
        }
        assert_eq!(
            g,
            evaluate_on_grid(&p, 11, Parallelism::Sequential).unwrap()
        );
    }

    #[test]
    fn relative_error_examples() {
        let t = field(1);
        assert_eq!(relative_l2_error(&t, &t).unwrap(), 0.0);
        let twice = t.map(|v| 2.0 * v).unwrap();
        assert!((relative_l2_error(&twice, &t).unwrap() - 1.0).abs() < 1e-15);
        let zero = GridField::constant(17, 17, 0.0).unwrap();
        assert!(relative_l2_error(&t, &zero).is_err());
        assert!(relative_l2_error(&t, &GridField::constant(9, 9, 1.0).unwrap()).is_err());
    }

    #[test]
    fn trapezoid_norm_of_constant() {
        let c = GridField::constant(5, 9, 3.0).unwrap();
        assert!((l2_norm(&c) - 3.0).abs() < 1e-15);
        // integral of x^2 over the square is 1/3; trapezoid error O(h^2)
        let x = GridField::from_fn(257, 257, |[x, _]| x).unwrap();
        assert!((l2_norm(&x).powi(2) - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn recovered_data_of_exact_fields() {
        let mut g = MlpParams::zeros(&[2, 1]).unwrap();
        g.set_bias(0, 0, 1.0);
        let mut u = MlpParams::zeros(&[2, 1]).unwrap();
        u.set_weight(0, 0, 1, 1.0);
        let a = recovered_data_field(&g, &u, 9, Parallelism::Sequential).unwrap();
        assert!(a.values().iter().all(|&v| v == 1.0));
        // a = 0 wherever grad u vanishes, with no smoothing
        let a0 = recovered_data_field(
            &g,
            &MlpParams::zeros(&[2, 1]).unwrap(),
            5,
            Parallelism::Sequential,
        )
        .unwrap();
        assert!(a0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovered_data_is_nonnegative_and_matches_misfit_predictions() {
        let g = MlpParams::init_xavier(&[2, 6, 1], 1)
            .unwrap()
            .with_output_shift(2.0);
        let u = MlpParams::init_xavier(&[2, 6, 6, 1], 2).unwrap();
        let a = recovered_data_field(&g, &u, 9, Parallelism::Sequential).unwrap();
        for j in 0..9 {
            for i in 0..9 {
                let x = a.coord(i, j);
                let gj = g.eval_jet(x);
                let uj = u.eval_jet(x);
                assert!(gj.val > 0.0);
                let pred = gj.val * (uj.grad[0].powi(2) + uj.grad[1].powi(2)).sqrt();
                assert!(a.get(i, j) >= 0.0);
                assert!((a.get(i, j) - pred).abs() <= 1e-14 * pred.abs().max(1.0));
            }
        }
    }

    fn metrics() -> Metrics {
        Metrics {
            example: "four_mode".into(),
            noise: NoiseEcho {
                kind: NoiseKind::Multiplicative,
                level: 0.01,
            },
            reg: (&RegularizerSpec::l2(1e-5)).into(),
            err_gamma: 0.1,
            err_u: 0.01,
            err_a: 0.05,
            epochs: 10,
            n: 100,
            widths: WidthsEcho {
                gamma: vec![2, 4, 1],
                u: vec![2, 4, 1],
            },
            seed: 3,
        }
    }

    #[test]
    fn report_files_round_trip() {
        let truth = ground_truth(&ExampleId::FourMode, 33, DataOptions::default()).unwrap();
        let g = MlpParams::init_xavier(&[2, 5, 1], 1)
            .unwrap()
            .with_output_shift(1.0);
        let u = MlpParams::init_xavier(&[2, 5, 1], 2).unwrap();
        let report = evaluate(&g, &u, &truth, 17, Parallelism::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, &metrics(), dir.path()).unwrap();
        let back = GridField::read_csv(&dir.path().join(GAMMA_HAT_CSV)).unwrap();
        assert_eq!(back, report.gamma_hat);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(METRICS_JSON)).unwrap())
                .unwrap();
        assert!(v["err_gamma"].is_number());
        assert!(v["reg"].get("zeta").is_none());
        assert_eq!(v["noise"]["kind"], "multiplicative");
        // the error grid is the pointwise difference of the written grids
        let gh = GridField::read_csv(&dir.path().join(GAMMA_HAT_CSV)).unwrap();
        let ge = GridField::read_csv(&dir.path().join(GAMMA_ERR_CSV)).unwrap();
        let gt = truth.gamma.resample(17).unwrap();
        let recomputed = gh.zip_with(&gt, |a, b| (a - b).abs()).unwrap();
        assert_eq!(recomputed, ge);
        assert_eq!(relative_l2_error(&gh, &gt).unwrap(), report.err_gamma);
    }

    #[test]
    fn written_csv_header_and_format() {
        let g = field(2).resample(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,value"));
        for l in lines {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(cols.len(), 3);
            assert!(cols
                .iter()
                .all(|c| c.contains('e') && c.parse::<f64>().is_ok()));
        }
    }

    proptest! {
        #[test]
        fn scaling_error_is_exact(c in 0.1f64..5.0) {
            let t = field(3);
            let scaled = t.map(|v| c * v).unwrap();
            prop_assert!((relative_l2_error(&scaled, &t).unwrap() - (c - 1.0).abs()).abs() < 1e-13);
        }

        #[test]
        fn triangle_inequality(s1 in 0u64..50, s2 in 0u64..50, s3 in 0u64..50) {
            let (a, b, c) = (field(s1), field(s2).map(|v| v * 0.7).unwrap(), field(s3));
            let ab = l2_norm(&a.zip_with(&b, |x, y| x - y).unwrap());
            let bc = l2_norm(&b.zip_with(&c, |x, y| x - y).unwrap());
            prop_assert!(relative_l2_error(&a, &c).unwrap() <= (ab + bc) / l2_norm(&c) + 1e-14);
        }
    }
}
