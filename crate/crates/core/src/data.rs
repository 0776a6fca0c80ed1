//! Ground-truth conductivities, sampling, noise and dataset assembly.
//!
//! Random streams are ChaCha8 generators seeded through [`derive_seed`];
//! standard normals come from `rand_distr::StandardNormal`. Interior points,
//! boundary points and noise each use their own stream, so the dataset is a
//! pure function of `(example, n, noise, grid_res, seed)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::io::{read_json, read_numeric_csv, write_json, write_numeric_csv};
use crate::solver;

/// Floor applied to the conductivity before the forward solve.
pub const DEFAULT_GAMMA_FLOOR: f64 = 0.1;
pub const DEFAULT_GRID_RES: usize = 257;

pub const INTERIOR_HEADER: &str = "x,y,a_obs";
pub const BOUNDARY_HEADER: &str = "x,y,f";

/// SplitMix64 finalizer over `seed` and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INTERIOR: u64 = 1;
const STREAM_BOUNDARY: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleId {
    /// Smooth four-mode perturbation of the unit conductivity.
    FourMode,
    /// `1 + 1{x > 1/2} exp(-2 rho^2)`, `rho` the distance to the centre.
    Discontinuous,
    /// `1 + 1{ellipse} - 1{disk}`; zero inside the disk.
    DisjointModes,
    /// Conductivity given on a grid, bilinearly interpolated.
    Custom(GridField),
}

impl ExampleId {
    pub fn name(&self) -> &'static str {
        match self {
            ExampleId::FourMode => "four_mode",
            ExampleId::Discontinuous => "discontinuous",
            ExampleId::DisjointModes => "disjoint_modes",
            ExampleId::Custom(_) => "custom",
        }
    }
}

fn four_mode(x: f64, y: f64) -> f64 {
    let (sx, sy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
    let a = 0.3 * (1.0 - 3.0 * sx).powi(2) * (-9.0 * sx * sx - (6.0 * y - 2.0).powi(2)).exp();
    let b = (3.0 * sx / 5.0 - 27.0 * sx.powi(3) - (3.0 * sy).powi(5))
        * (-(9.0 * sx * sx + 9.0 * sy * sy)).exp();
    let c = (-(3.0 * sx + 1.0).powi(2) - 9.0 * sy * sy).exp();
    1.0 + 0.3 * (a - b - c)
}

fn discontinuous(x: f64, y: f64) -> f64 {
    if x > 0.5 {
        let rho2 = (x - 0.5).powi(2) + (y - 0.5).powi(2);
        1.0 + (-2.0 * rho2).exp()
    } else {
        1.0
    }
}

fn disjoint_modes(x: f64, y: f64) -> f64 {
    let (ex, ey) = (x - 0.3, y - 0.7);
    let in_ellipse = 100.0 * ex * ex + 36.0 * ey * ey - 72.0 * ex * ey < 1.0;
    let (dx, dy) = (x - 0.6, y - 0.4);
    let in_disk = 36.0 * dx * dx + 36.0 * dy * dy < 1.0;
    1.0 + f64::from(u8::from(in_ellipse)) - f64::from(u8::from(in_disk))
}

/// The literal closed-form conductivity (no floor).
pub fn eval_conductivity(id: &ExampleId, p: [f64; 2]) -> Result<f64> {
    let [x, y] = p;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::OutOfDomain { x, y });
    }
    Ok(match id {
        ExampleId::FourMode => four_mode(x, y),
        ExampleId::Discontinuous => discontinuous(x, y),
        ExampleId::DisjointModes => disjoint_modes(x, y),
        ExampleId::Custom(g) => g.interpolate(p)?,
    })
}

/// `n` i.i.d. uniform points in the open unit square.
pub fn sample_interior(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut open01 = move || loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t;
        }
    };
    (0..n).map(|_| [open01(), open01()]).collect()
}

/// `n` uniform points on the perimeter: an edge with probability 1/4 each
/// (bottom, right, top, left), then a uniform position along it.
pub fn sample_boundary(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let edge: u8 = rng.random_range(0..4);
            let t: f64 = rng.random();
            match edge {
                0 => [t, 0.0],
                1 => [1.0, t],
                2 => [t, 1.0],
                _ => [0.0, t],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `a + level * xi`
    Additive,
    /// `a (1 + level * xi)`
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::Multiplicative,
            level: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level >= 0.0 && self.level.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise level must be >= 0, got {}",
                self.level
            )));
        }
        Ok(())
    }
}

pub fn apply_noise(a_true: f64, spec: &NoiseSpec, draw: f64) -> f64 {
    match spec.kind {
        NoiseKind::Additive => a_true + spec.level * draw,
        NoiseKind::Multiplicative => a_true * (1.0 + spec.level * draw),
    }
}

/// One standard normal per sample from the noise seed.
pub fn noise_draws(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorSample {
    pub x: [f64; 2],
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySample {
    pub x: [f64; 2],
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub example: String,
    pub n: usize,
    pub noise: NoiseSpec,
    pub grid_res: usize,
    pub gamma_floor: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interior: Vec<InteriorSample>,
    pub boundary: Vec<BoundarySample>,
    pub provenance: Provenance,
}

/// Grids the dataset was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Conductivity used in the forward solve (after flooring).
    pub gamma: GridField,
    pub u: GridField,
    pub a: GridField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataOptions {
    pub gamma_floor: Option<f64>,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            gamma_floor: Some(DEFAULT_GAMMA_FLOOR),
        }
    }
}

/// Boundary data: the trace of `u(x, y) = y`.
pub fn boundary_potential(p: [f64; 2]) -> f64 {
    p[1]
}

/// Ground-truth grids at `grid_res x grid_res`.
pub fn ground_truth(id: &ExampleId, grid_res: usize, options: DataOptions) -> Result<GroundTruth> {
    let mut gamma = GridField::from_fn(grid_res, grid_res, |p| {
        eval_conductivity(id, p).expect("grid nodes lie in the unit square")
    })?;
    if let Some(floor) = options.gamma_floor {
        gamma = gamma.map(|v| v.max(floor))?;
    }
    let u = solver::solve_dirichlet(&gamma, &boundary_potential)?;
    let a = solver::current_magnitude(&gamma, &u)?;
    Ok(GroundTruth { gamma, u, a })
}

pub fn build_dataset(
    id: &ExampleId,
    n: usize,
    spec: &NoiseSpec,
    grid_res: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(build_dataset_with(id, n, spec, grid_res, seed, DataOptions::default())?.0)
}

pub fn build_dataset_with(
    id: &ExampleId,
    n: usize,
    spec: &NoiseSpec,
    grid_res: usize,
    seed: u64,
    options: DataOptions,
) -> Result<(Dataset, GroundTruth)> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be >= 1".into()));
    }
    if grid_res < 33 {
        return Err(Error::Invalid(format!(
            "grid_res must be >= 33, got {grid_res}"
        )));
    }
    spec.validate()?;
    let truth = ground_truth(id, grid_res, options)?;

    let points = sample_interior(n, derive_seed(seed, STREAM_INTERIOR));
    let draws = noise_draws(n, spec.seed);
    let interior = points
        .into_iter()
        .zip(draws)
        .map(|(x, xi)| {
            let a = truth.a.interpolate(x)?;
            Ok(InteriorSample {
                x,
                y: apply_noise(a, spec, xi),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let boundary = sample_boundary(n, derive_seed(seed, STREAM_BOUNDARY))
        .into_iter()
        .map(|x| BoundarySample {
            x,
            f: boundary_potential(x),
        })
        .collect();

    let dataset = Dataset {
        interior,
        boundary,
        provenance: Provenance {
            example: id.name().to_string(),
            n,
            noise: *spec,
            grid_res,
            gamma_floor: options.gamma_floor,
            seed,
        },
    };
    Ok((dataset, truth))
}

fn on_edge(p: [f64; 2]) -> bool {
    let [x, y] = p;
    let inside = (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y);
    inside && x.min(1.0 - x).min(y).min(1.0 - y) == 0.0
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.interior.is_empty() {
            return Err(Error::Invalid("dataset has no interior samples".into()));
        }
        if self.interior.len() != self.boundary.len() {
            return Err(Error::Invalid(format!(
                "interior ({}) and boundary ({}) sample counts differ",
                self.interior.len(),
                self.boundary.len()
            )));
        }
        if let Some(k) = self
            .interior
            .iter()
            .position(|s| !(s.x[0] > 0.0 && s.x[0] < 1.0 && s.x[1] > 0.0 && s.x[1] < 1.0))
        {
            return Err(Error::Invalid(format!(
                "interior sample {k} is not strictly inside"
            )));
        }
        if let Some(k) = self.boundary.iter().position(|s| !on_edge(s.x)) {
            return Err(Error::Invalid(format!(
                "boundary sample {k} is not on an edge"
            )));
        }
        Ok(())
    }

    /// Writes `interior.csv`, `boundary.csv` and `provenance.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let interior: Vec<[f64; 3]> = self
            .interior
            .iter()
            .map(|s| [s.x[0], s.x[1], s.y])
            .collect();
        write_numeric_csv(
            &dir.join("interior.csv"),
            INTERIOR_HEADER,
            interior.iter().map(|r| &r[..]),
        )?;
        let boundary: Vec<[f64; 3]> = self
            .boundary
            .iter()
            .map(|s| [s.x[0], s.x[1], s.f])
            .collect();
        write_numeric_csv(
            &dir.join("boundary.csv"),
            BOUNDARY_HEADER,
            boundary.iter().map(|r| &r[..]),
        )?;
        write_json(&dir.join("provenance.json"), &self.provenance)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let provenance: Provenance = read_json(&dir.join("provenance.json"))?;
        let interior = read_numeric_csv(&dir.join("interior.csv"), INTERIOR_HEADER)?
            .into_iter()
            .map(|r| InteriorSample {
                x: [r[0], r[1]],
                y: r[2],
            })
            .collect();
        let boundary = read_numeric_csv(&dir.join("boundary.csv"), BOUNDARY_HEADER)?
            .into_iter()
            .map(|r| BoundarySample {
                x: [r[0], r[1]],
                f: r[2],
            })
            .collect();
        let ds = Dataset {
            interior,
            boundary,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Manufactured solution used to check the forward solver:
/// `gamma = 1 + x`, `u = sin(pi x) sin(pi y)` and the matching source.
pub mod manufactured {
    use super::PI;

    pub fn gamma(p: [f64; 2]) -> f64 {
        1.0 + p[0]
    }

    pub fn solution(p: [f64; 2]) -> f64 {
        (PI * p[0]).sin() * (PI * p[1]).sin()
    }

    /// `div((1 + x) grad u)` for the manufactured `u`.
    pub fn source(p: [f64; 2]) -> f64 {
        let [x, y] = p;
        PI * (PI * x).cos() * (PI * y).sin()
            - 2.0 * PI * PI * (1.0 + x) * (PI * x).sin() * (PI * y).sin()
    }
}
