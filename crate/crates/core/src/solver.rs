//! Finite-difference forward model for `div(gamma grad u) = g` on the unit
//! square with Dirichlet data.
//!
//! The 5-point scheme is written in conservative flux form; the coefficient
//! on the edge between two nodes is the harmonic mean of `gamma` at its end
//! points. Dirichlet nodes are eliminated into the right-hand side, which
//! leaves a symmetric positive-definite system over the interior nodes for
//! the operator `-div(gamma grad .)`.

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::parallel::{dot, Parallelism};

pub const DEFAULT_TOL: f64 = 1e-10;

/// Interior-node system in 5-point stencil form.
///
/// Row `k` belongs to interior node `(i, j)` with `k = (j - 1) * (nx - 2) + (i - 1)`.
/// `west`, `east`, `south`, `north` hold the off-diagonal matrix entries;
/// couplings to Dirichlet nodes were moved into `rhs` and are stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    nx: usize,
    ny: usize,
    pub diag: Vec<f64>,
    pub west: Vec<f64>,
    pub east: Vec<f64>,
    pub south: Vec<f64>,
    pub north: Vec<f64>,
    pub rhs: Vec<f64>,
    boundary: GridField,
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles the system for conductivity `gamma`, Dirichlet data `f` and an
/// optional source `g` (zero when `None`).
pub fn assemble(
    gamma: &GridField,
    f: &dyn Fn([f64; 2]) -> f64,
    g: Option<&dyn Fn([f64; 2]) -> f64>,
) -> Result<LinearSystem> {
    let (nx, ny) = (gamma.nx(), gamma.ny());
    for j in 0..ny {
        for i in 0..nx {
            let v = gamma.get(i, j);
            if v <= 0.0 {
                return Err(Error::NonPositiveConductivity { i, j, value: v });
            }
        }
    }
    let (mx, my) = (nx - 2, ny - 2);
    let n = mx * my;
    let ihx2 = 1.0 / (gamma.hx() * gamma.hx());
    let ihy2 = 1.0 / (gamma.hy() * gamma.hy());

    let boundary = GridField::from_fn(nx, ny, |p| {
        let on_edge = p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0;
        if on_edge {
            f(p)
        } else {
            0.0
        }
    })?;

    let mut sys = LinearSystem {
        nx,
        ny,
        diag: vec![0.0; n],
        west: vec![0.0; n],
        east: vec![0.0; n],
        south: vec![0.0; n],
        north: vec![0.0; n],
        rhs: vec![0.0; n],
        boundary,
    };

    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let k = (j - 1) * mx + (i - 1);
            let c = gamma.get(i, j);
            let neighbours = [
                (i - 1, j, harmonic_mean(c, gamma.get(i - 1, j)) * ihx2),
                (i + 1, j, harmonic_mean(c, gamma.get(i + 1, j)) * ihx2),
                (i, j - 1, harmonic_mean(c, gamma.get(i, j - 1)) * ihy2),
                (i, j + 1, harmonic_mean(c, gamma.get(i, j + 1)) * ihy2),
            ];
            let mut rhs = match g {
                Some(g) => -g(gamma.coord(i, j)),
                None => 0.0,
            };
            let mut diag = 0.0;
            for (slot, &(ni, nj, w)) in neighbours.iter().enumerate() {
                diag += w;
                if sys.boundary_node(ni, nj) {
                    rhs += w * sys.boundary.get(ni, nj);
                } else {
                    let entry = match slot {
                        0 => &mut sys.west[k],
                        1 => &mut sys.east[k],
                        2 => &mut sys.south[k],
                        _ => &mut sys.north[k],
                    };
                    *entry = -w;
                }
            }
            sys.diag[k] = diag;
            sys.rhs[k] = rhs;
        }
    }
    Ok(sys)
}

const ROW_CHUNK: usize = 2048;

impl LinearSystem {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn unknowns(&self) -> usize {
        self.diag.len()
    }

    fn boundary_node(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }

    /// Index of interior node `(i, j)` in the unknown vector.
    pub fn index(&self, i: usize, j: usize) -> usize {
        (j - 1) * (self.nx - 2) + (i - 1)
    }

    pub fn matvec(&self, par: Parallelism, x: &[f64], y: &mut [f64]) {
        let mx = self.nx - 2;
        let n = self.unknowns();
        par.for_each_chunk_mut(y, ROW_CHUNK, |c, out| {
            let base = c * ROW_CHUNK;
            for (r, yk) in out.iter_mut().enumerate() {
                let k = base + r;
                let mut s = self.diag[k] * x[k];
                if self.west[k] != 0.0 {
                    s += self.west[k] * x[k - 1];
                }
                if self.east[k] != 0.0 {
                    s += self.east[k] * x[k + 1];
                }
                if self.south[k] != 0.0 {
                    s += self.south[k] * x[k - mx];
                }
                if self.north[k] != 0.0 && k + mx < n {
                    s += self.north[k] * x[k + mx];
                }
                *yk = s;
            }
        });
    }

    fn to_field(&self, x: &[f64]) -> Result<GridField> {
        let mut field = self.boundary.clone();
        for j in 1..self.ny - 1 {
            for i in 1..self.nx - 1 {
                field.set(i, j, x[self.index(i, j)]);
            }
        }
        Ok(field)
    }
}

/// Plain conjugate gradients from a zero initial guess; stops once
/// `|r| <= tol |b|`. Boundary values are copied back exactly.
pub fn solve_cg(system: &LinearSystem, tol: f64, max_iter: usize) -> Result<GridField> {
    solve_cg_with(system, tol, max_iter, Parallelism::Sequential)
}

pub fn solve_cg_with(
    system: &LinearSystem,
    tol: f64,
    max_iter: usize,
    par: Parallelism,
) -> Result<GridField> {
    let n = system.unknowns();
    let mut x = vec![0.0; n];
    let b_norm = dot(par, &system.rhs, &system.rhs).sqrt();
    if b_norm == 0.0 {
        return system.to_field(&x);
    }
    let mut r = system.rhs.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs = dot(par, &r, &r);
    for _ in 0..max_iter {
        system.matvec(par, &p, &mut ap);
        let alpha = rs / dot(par, &p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rs_new = dot(par, &r, &r);
        if rs_new.sqrt() <= tol * b_norm {
            return system.to_field(&x);
        }
        let beta = rs_new / rs;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rs = rs_new;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rs.sqrt() / b_norm,
    })
}

/// Default iteration cap for [`solve_cg`].
pub fn default_max_iter(system: &LinearSystem) -> usize {
    10 * system.unknowns().max(100)
}

/// `gamma |grad u|` per node; central differences inside, second-order
/// one-sided differences on the boundary.
pub fn current_magnitude(gamma: &GridField, u: &GridField) -> Result<GridField> {
    if !gamma.same_shape(u) {
        return Err(Error::Invalid("gamma and u grids differ in shape".into()));
    }
    let (nx, ny) = (u.nx(), u.ny());
    let (hx, hy) = (u.hx(), u.hy());
    let deriv = |at: &dyn Fn(usize) -> f64, k: usize, n: usize, h: f64| -> f64 {
        if k == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else if k == n - 1 {
            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * h)
        }
    };
    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let ux = deriv(&|ii| u.get(ii, j), i, nx, hx);
            let uy = deriv(&|jj| u.get(i, jj), j, ny, hy);
            values.push(gamma.get(i, j) * (ux * ux + uy * uy).sqrt());
        }
    }
    GridField::new(nx, ny, values)
}

/// Solves `div(gamma grad u) = 0`, `u = f` on the boundary, with the default
/// tolerance.
pub fn solve_dirichlet(gamma: &GridField, f: &dyn Fn([f64; 2]) -> f64) -> Result<GridField> {
    let sys = assemble(gamma, f, None)?;
    solve_cg(&sys, DEFAULT_TOL, default_max_iter(&sys))
}
