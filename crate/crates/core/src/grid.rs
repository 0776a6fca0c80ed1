//! Scalar fields sampled on a uniform grid over the unit square.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_numeric_csv, write_numeric_csv};

pub const GRID_CSV_HEADER: &str = "x,y,value";

/// Node `(i, j)` sits at `(i / (nx - 1), j / (ny - 1))`; values are stored
/// with `i` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Invalid(format!(
                "grid must be at least 3x3, got {nx}x{ny}"
            )));
        }
        if values.len() != nx * ny {
            return Err(Error::Invalid(format!(
                "grid {nx}x{ny} needs {} values, got {}",
                nx * ny,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value at node ({}, {})",
                k % nx,
                k / nx
            )));
        }
        Ok(GridField { nx, ny, values })
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                values.push(f(node_coord(i, j, nx, ny)));
            }
        }
        Self::new(nx, ny, values)
    }

    pub fn constant(nx: usize, ny: usize, c: f64) -> Result<Self> {
        Self::new(nx, ny, vec![c; nx * ny])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        1.0 / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / (self.ny - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn same_shape(&self, other: &GridField) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[j * self.nx + i] = v;
    }

    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        node_coord(i, j, self.nx, self.ny)
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.nx,
            self.ny,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Pointwise combination of two same-shape fields.
    pub fn zip_with(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::Invalid(format!(
                "grid shapes differ: {}x{} vs {}x{}",
                self.nx, self.ny, other.nx, other.ny
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.nx, self.ny, values)
    }

    /// Bilinear interpolation.
    pub fn interpolate(&self, p: [f64; 2]) -> Result<f64> {
        let [x, y] = p;
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::OutOfDomain { x, y });
        }
        let (i, tx) = cell(x, self.nx);
        let (j, ty) = cell(y, self.ny);
        let v00 = self.get(i, j);
        let v10 = self.get(i + 1, j);
        let v01 = self.get(i, j + 1);
        let v11 = self.get(i + 1, j + 1);
        Ok((1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11))
    }

    /// Resamples onto an `n x n` grid by bilinear interpolation.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n == self.nx && n == self.ny {
            return Ok(self.clone());
        }
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                values.push(self.interpolate(node_coord(i, j, n, n))?);
            }
        }
        Self::new(n, n, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<[f64; 3]> = (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| (i, j)))
            .map(|(i, j)| {
                let [x, y] = self.coord(i, j);
                [x, y, self.get(i, j)]
            })
            .collect();
        write_numeric_csv(path, GRID_CSV_HEADER, rows.iter().map(|r| &r[..]))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_numeric_csv(path, GRID_CSV_HEADER)?;
        let nx = rows.iter().take_while(|r| r[1] == rows[0][1]).count();
        if nx < 3 || rows.len() % nx != 0 {
            return Err(Error::parse(path, 1, "rows do not form a rectangular grid"));
        }
        let ny = rows.len() / nx;
        for (k, r) in rows.iter().enumerate() {
            let [x, y] = node_coord(k % nx, k / nx, nx, ny);
            if (r[0] - x).abs() > 1e-12 || (r[1] - y).abs() > 1e-12 {
                return Err(Error::parse(path, k + 2, "node coordinates out of order"));
            }
        }
        Self::new(nx, ny, rows.into_iter().map(|r| r[2]).collect())
    }
}

fn node_coord(i: usize, j: usize, nx: usize, ny: usize) -> [f64; 2] {
    [i as f64 / (nx - 1) as f64, j as f64 / (ny - 1) as f64]
}

fn cell(t: f64, n: usize) -> (usize, f64) {
    let s = t * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    (i, s - i as f64)
}
