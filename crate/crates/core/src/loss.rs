//! Empirical risk over a mini-batch: data misfit, regularizer, interior PDE
//! residual and boundary trace misfit.
//!
//! Everything is written against [`Ops`], so the same expressions record
//! onto a [`Tape`] for training or evaluate directly with [`Plain`]. Fields
//! enter through [`Field`], implemented by bound networks and by the
//! grid-based [`GridJetField`].

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Ops, Plain, Tape, TapeError};
use crate::data::{BoundarySample, InteriorSample};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::network::{BoundMlp, GradientJet, LaplacianJet, MlpParams};
use crate::parallel::Parallelism;

/// Smoothing added under the square root of `|grad u|` during training.
pub const TRAIN_EPS_MAG: f64 = 1e-12;
pub const DEFAULT_SHARD_SIZE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    L2,
    TvHuber,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub alpha: f64,
    /// Huber threshold; only read for `tv_huber`.
    #[serde(default = "default_zeta")]
    pub zeta: f64,
}

fn default_zeta() -> f64 {
    1e-3
}

impl RegularizerSpec {
    pub fn none() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::None,
            alpha: 0.0,
            zeta: default_zeta(),
        }
    }

    pub fn l2(alpha: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::L2,
            alpha,
            zeta: default_zeta(),
        }
    }

    pub fn tv_huber(alpha: f64, zeta: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::TvHuber,
            alpha,
            zeta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::Invalid(format!(
                "zeta must be > 0, got {}",
                self.zeta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub reg: RegularizerSpec,
    pub eps_mag: f64,
    pub lambda_pde: f64,
    pub lambda_bc: f64,
}

impl LossSpec {
    pub fn new(reg: RegularizerSpec) -> Self {
        LossSpec {
            reg,
            eps_mag: TRAIN_EPS_MAG,
            lambda_pde: 1.0,
            lambda_bc: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        for (name, v) in [
            ("eps_mag", self.eps_mag),
            ("lambda_pde", self.lambda_pde),
            ("lambda_bc", self.lambda_bc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn combine(&self, v: [f64; 4]) -> f64 {
        v[0] + self.reg.alpha * v[1] + self.lambda_pde * v[2] + self.lambda_bc * v[3]
    }

    /// Means and weighted total from component sums over `n_int` interior
    /// and `n_bnd` boundary samples.
    pub fn values_from_sums(&self, sums: [f64; 4], n_int: usize, n_bnd: usize) -> LossValues {
        let (ni, nb) = (n_int as f64, n_bnd as f64);
        let comps = [sums[0] / ni, sums[1] / ni, sums[2] / ni, sums[3] / nb];
        LossValues {
            misfit: comps[0],
            regularizer: comps[1],
            pde_residual: comps[2],
            boundary: comps[3],
            total: self.combine(comps),
        }
    }
}

/// Detached component values; `total` includes the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub misfit: f64,
    pub regularizer: f64,
    pub pde_residual: f64,
    pub boundary: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<V> {
    pub values: LossValues,
    pub root: V,
}

/// A scalar field on the unit square whose derivatives can be expressed
/// through `O`.
pub trait Field<O: Ops> {
    fn value(&self, o: &mut O, x: [f64; 2]) -> Result<O::Value, TapeError>;
    fn gradient(&self, o: &mut O, x: [f64; 2]) -> Result<GradientJet<O::Value>, TapeError>;
    fn laplacian(&self, o: &mut O, x: [f64; 2]) -> Result<LaplacianJet<O::Value>, TapeError>;
}

impl<O: Ops> Field<O> for BoundMlp<'_, O::Value> {
    fn value(&self, o: &mut O, x: [f64; 2]) -> Result<O::Value, TapeError> {
        self.forward(o, x)
    }

    fn gradient(&self, o: &mut O, x: [f64; 2]) -> Result<GradientJet<O::Value>, TapeError> {
        self.forward_gradient(o, x)
    }

    fn laplacian(&self, o: &mut O, x: [f64; 2]) -> Result<LaplacianJet<O::Value>, TapeError> {
        self.forward_laplacian(o, x)
    }
}

/// `|grad u| = sqrt(ux^2 + uy^2 + eps)`.
pub fn grad_magnitude<O: Ops>(
    o: &mut O,
    grad: [O::Value; 2],
    eps: f64,
) -> Result<O::Value, TapeError> {
    let gx = o.square(grad[0])?;
    let gy = o.square(grad[1])?;
    let s = o.add(gx, gy)?;
    let s = if eps != 0.0 { o.offset(s, eps)? } else { s };
    o.sqrt(s)
}

/// Predicted data `gamma |grad u|`.
pub fn predicted_data<O: Ops>(
    o: &mut O,
    gamma: O::Value,
    grad_u: [O::Value; 2],
    eps: f64,
) -> Result<O::Value, TapeError> {
    let m = grad_magnitude(o, grad_u, eps)?;
    o.mul(gamma, m)
}

/// `div(gamma grad u)` by the product rule.
pub fn divergence<O: Ops>(
    o: &mut O,
    g: &GradientJet<O::Value>,
    u: &LaplacianJet<O::Value>,
) -> Result<O::Value, TapeError> {
    let a = o.mul(g.grad[0], u.grad[0])?;
    let b = o.mul(g.grad[1], u.grad[1])?;
    let c = o.mul(g.val, u.lap)?;
    let ab = o.add(a, b)?;
    o.add(ab, c)
}

/// Huber function of `t = sqrt(t2)`: `t` when `t >= zeta`, otherwise
/// `t^2 / (2 zeta) + zeta / 2`. Taking the squared norm keeps the
/// quadratic branch free of square roots.
pub fn huber<O: Ops>(o: &mut O, t2: O::Value, zeta: f64) -> Result<O::Value, TapeError> {
    if o.value(t2) >= zeta * zeta {
        o.sqrt(t2)
    } else {
        let q = o.scale(t2, 0.5 / zeta)?;
        o.offset(q, 0.5 * zeta)
    }
}

fn regularizer_term<O: Ops>(
    o: &mut O,
    g: &GradientJet<O::Value>,
    spec: &RegularizerSpec,
) -> Result<Option<O::Value>, TapeError> {
    Ok(match spec.kind {
        RegularizerKind::None => None,
        RegularizerKind::L2 => Some(o.square(g.val)?),
        RegularizerKind::TvHuber => {
            let gx = o.square(g.grad[0])?;
            let gy = o.square(g.grad[1])?;
            let t2 = o.add(gx, gy)?;
            Some(huber(o, t2, spec.zeta)?)
        }
    })
}

/// Running sum that starts at the first term.
struct Acc<V>(Option<V>);

impl<V: Copy> Acc<V> {
    fn push<O: Ops<Value = V>>(&mut self, o: &mut O, v: V) -> Result<(), TapeError> {
        self.0 = Some(match self.0 {
            Some(s) => o.add(s, v)?,
            None => v,
        });
        Ok(())
    }

    fn finish<O: Ops<Value = V>>(self, o: &mut O) -> Result<V, TapeError> {
        match self.0 {
            Some(v) => Ok(v),
            None => o.constant(0.0),
        }
    }
}

fn nonempty<T>(batch: &[T], what: &str) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Invalid(format!("{what} batch is empty")))
    } else {
        Ok(())
    }
}

fn mean<O: Ops>(o: &mut O, sum: O::Value, n: usize) -> Result<O::Value, TapeError> {
    o.scale(sum, 1.0 / n as f64)
}

/// `(1/|B|) sum (Y_i - gamma |grad u|)^2`.
pub fn data_misfit<O: Ops, G: Field<O>, U: Field<O>>(
    o: &mut O,
    batch: &[InteriorSample],
    gamma: &G,
    u: &U,
    eps_mag: f64,
) -> Result<O::Value> {
    nonempty(batch, "interior")?;
    let mut acc = Acc(None);
    for s in batch {
        let g = gamma.value(o, s.x)?;
        let du = u.gradient(o, s.x)?;
        let pred = predicted_data(o, g, du.grad, eps_mag)?;
        let y = o.constant(s.y)?;
        let r = o.sub(y, pred)?;
        let r2 = o.square(r)?;
        acc.push(o, r2)?;
    }
    let sum = acc.finish(o)?;
    Ok(mean(o, sum, batch.len())?)
}

/// `(1/|B|) sum div(gamma grad u)(X_i)^2`.
pub fn pde_residual<O: Ops, G: Field<O>, U: Field<O>>(
    o: &mut O,
    batch: &[InteriorSample],
    gamma: &G,
    u: &U,
) -> Result<O::Value> {
    nonempty(batch, "interior")?;
    let mut acc = Acc(None);
    for s in batch {
        let g = gamma.gradient(o, s.x)?;
        let uj = u.laplacian(o, s.x)?;
        let r = divergence(o, &g, &uj)?;
        let r2 = o.square(r)?;
        acc.push(o, r2)?;
    }
    let sum = acc.finish(o)?;
    Ok(mean(o, sum, batch.len())?)
}

/// `(1/|B|) sum (u(Xbar_i) - f_i)^2`.
pub fn boundary_misfit<O: Ops, U: Field<O>>(
    o: &mut O,
    batch: &[BoundarySample],
    u: &U,
) -> Result<O::Value> {
    nonempty(batch, "boundary")?;
    let mut acc = Acc(None);
    for s in batch {
        let v = u.value(o, s.x)?;
        let r = o.offset(v, -s.f)?;
        let r2 = o.square(r)?;
        acc.push(o, r2)?;
    }
    let sum = acc.finish(o)?;
    Ok(mean(o, sum, batch.len())?)
}

/// Monte-Carlo estimate of the regularizer over the interior points.
pub fn regularizer<O: Ops, G: Field<O>>(
    o: &mut O,
    batch: &[InteriorSample],
    gamma: &G,
    spec: &RegularizerSpec,
) -> Result<O::Value> {
    nonempty(batch, "interior")?;
    let mut acc = Acc(None);
    for s in batch {
        let g = gamma.gradient(o, s.x)?;
        if let Some(t) = regularizer_term(o, &g, spec)? {
            acc.push(o, t)?;
        }
    }
    let sum = acc.finish(o)?;
    Ok(mean(o, sum, batch.len())?)
}

/// Unnormalized component sums over a slice of samples.
struct Sums<V> {
    misfit: V,
    reg: V,
    pde: V,
    bc: V,
}

fn component_sums<O: Ops, G: Field<O>, U: Field<O>>(
    o: &mut O,
    interior: &[InteriorSample],
    boundary: &[BoundarySample],
    gamma: &G,
    u: &U,
    spec: &LossSpec,
) -> Result<Sums<O::Value>, TapeError> {
    let (mut mis, mut reg, mut pde, mut bc) = (Acc(None), Acc(None), Acc(None), Acc(None));
    for s in interior {
        let g = gamma.gradient(o, s.x)?;
        let uj = u.laplacian(o, s.x)?;
        let pred = predicted_data(o, g.val, uj.grad, spec.eps_mag)?;
        let y = o.constant(s.y)?;
        let r = o.sub(y, pred)?;
        let r2 = o.square(r)?;
        mis.push(o, r2)?;
        if let Some(t) = regularizer_term(o, &g, &spec.reg)? {
            reg.push(o, t)?;
        }
        let d = divergence(o, &g, &uj)?;
        let d2 = o.square(d)?;
        pde.push(o, d2)?;
    }
    for s in boundary {
        let v = u.value(o, s.x)?;
        let r = o.offset(v, -s.f)?;
        let r2 = o.square(r)?;
        bc.push(o, r2)?;
    }
    Ok(Sums {
        misfit: mis.finish(o)?,
        reg: reg.finish(o)?,
        pde: pde.finish(o)?,
        bc: bc.finish(o)?,
    })
}

/// Weighted root `(mis + alpha reg + l_pde pde) / n_int + l_bc bc / n_bnd`
/// of a set of component sums.
fn weighted_root<O: Ops>(
    o: &mut O,
    sums: &Sums<O::Value>,
    spec: &LossSpec,
    n_int: usize,
    n_bnd: usize,
) -> Result<O::Value, TapeError> {
    let reg = o.scale(sums.reg, spec.reg.alpha)?;
    let pde = o.scale(sums.pde, spec.lambda_pde)?;
    let a = o.add(sums.misfit, reg)?;
    let a = o.add(a, pde)?;
    let a = o.scale(a, 1.0 / n_int as f64)?;
    let b = o.scale(sums.bc, spec.lambda_bc / n_bnd as f64)?;
    o.add(a, b)
}

/// The full empirical risk as a single expression.
pub fn total_loss<O: Ops, G: Field<O>, U: Field<O>>(
    o: &mut O,
    interior: &[InteriorSample],
    boundary: &[BoundarySample],
    gamma: &G,
    u: &U,
    spec: &LossSpec,
) -> Result<LossBreakdown<O::Value>> {
    nonempty(interior, "interior")?;
    nonempty(boundary, "boundary")?;
    let sums = component_sums(o, interior, boundary, gamma, u, spec)?;
    let root = weighted_root(o, &sums, spec, interior.len(), boundary.len())?;
    let raw = [sums.misfit, sums.reg, sums.pde, sums.bc].map(|v| o.value(v));
    Ok(LossBreakdown {
        values: spec.values_from_sums(raw, interior.len(), boundary.len()),
        root,
    })
}

/// Loss values without recording a tape.
pub fn loss_values(
    gamma: &MlpParams,
    u: &MlpParams,
    interior: &[InteriorSample],
    boundary: &[BoundarySample],
    spec: &LossSpec,
) -> Result<LossValues> {
    let (g, uu) = (gamma.bind_plain(), u.bind_plain());
    Ok(total_loss(&mut Plain, interior, boundary, &g, &uu, spec)?.values)
}

/// Unnormalized component sums `[misfit, regularizer, pde, boundary]`
/// without a tape; either slice may be empty.
pub fn loss_sums(
    gamma: &MlpParams,
    u: &MlpParams,
    interior: &[InteriorSample],
    boundary: &[BoundarySample],
    spec: &LossSpec,
) -> Result<[f64; 4]> {
    let (g, uu) = (gamma.bind_plain(), u.bind_plain());
    let s = component_sums(&mut Plain, interior, boundary, &g, &uu, spec)?;
    Ok([s.misfit, s.reg, s.pde, s.bc])
}

/// Loss values and the gradient with respect to `(gamma params, u params)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub values: LossValues,
    pub grad: Vec<f64>,
}

struct ShardOut {
    sums: [f64; 4],
    grad: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<(Tape, Vec<f64>)> = RefCell::new((Tape::new(), Vec::new()));
}

/// Splits the batch into shards of `shard_size` samples, builds one tape per
/// shard and merges shard values and gradients in shard order. The result
/// does not depend on the thread count.
pub fn loss_and_gradient(
    gamma: &MlpParams,
    u: &MlpParams,
    interior: &[InteriorSample],
    boundary: &[BoundarySample],
    spec: &LossSpec,
    shard_size: usize,
    par: Parallelism,
) -> Result<LossGradient> {
    nonempty(interior, "interior")?;
    nonempty(boundary, "boundary")?;
    let shard_size = shard_size.max(1);
    let (ni, nb) = (interior.len(), boundary.len());
    let shards = ni.div_ceil(shard_size).max(nb.div_ceil(shard_size));
    let range = |len: usize, k: usize| (k * shard_size).min(len)..((k + 1) * shard_size).min(len);

    let outs = par.map(shards, |k| -> Result<ShardOut, TapeError> {
        SCRATCH.with(|cell| {
            let (tape, adjoints) = &mut *cell.borrow_mut();
            tape.clear();
            let g = gamma.bind(tape)?;
            let uu = u.bind(tape)?;
            let sums = component_sums(
                tape,
                &interior[range(ni, k)],
                &boundary[range(nb, k)],
                &g,
                &uu,
                spec,
            )?;
            let root = weighted_root(tape, &sums, spec, ni, nb)?;
            tape.backward_into(root, adjoints);
            let grad = g
                .params()
                .iter()
                .chain(uu.params())
                .map(|p| adjoints[p.index()])
                .collect();
            Ok(ShardOut {
                sums: [sums.misfit, sums.reg, sums.pde, sums.bc].map(|v| tape.value(v)),
                grad,
            })
        })
    });

    let mut sums = [0.0; 4];
    let mut grad = vec![0.0; gamma.num_params() + u.num_params()];
    for out in outs {
        let out = out?;
        for (s, v) in sums.iter_mut().zip(out.sums) {
            *s += v;
        }
        for (g, v) in grad.iter_mut().zip(&out.grad) {
            *g += v;
        }
    }
    Ok(LossGradient {
        values: spec.values_from_sums(sums, ni, nb),
        grad,
    })
}

/// Field given by grids: values and derivatives are bilinear interpolants
/// of the field and of its finite-difference derivatives. Derivatives enter
/// as constants, so it yields values but no parameter gradients.
#[derive(Debug, Clone)]
pub struct GridJetField {
    value: GridField,
    dx: GridField,
    dy: GridField,
    lap: GridField,
}

impl GridJetField {
    pub fn new(field: &GridField) -> Result<Self> {
        let (nx, ny) = (field.nx(), field.ny());
        let (hx, hy) = (field.hx(), field.hy());
        let d = |f: &GridField, i: usize, j: usize, axis: usize| -> f64 {
            let (n, h) = if axis == 0 { (nx, hx) } else { (ny, hy) };
            let k = if axis == 0 { i } else { j };
            let at = |k: usize| if axis == 0 { f.get(k, j) } else { f.get(i, k) };
            if k == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if k == n - 1 {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
            } else {
                (at(k + 1) - at(k - 1)) / (2.0 * h)
            }
        };
        let deriv = |f: &GridField, axis: usize| {
            let mut out = f.clone();
            for j in 0..ny {
                for i in 0..nx {
                    out.set(i, j, d(f, i, j, axis));
                }
            }
            out
        };
        let dx = deriv(field, 0);
        let dy = deriv(field, 1);
        let lap = deriv(&dx, 0).zip_with(&deriv(&dy, 1), |a, b| a + b)?;
        Ok(GridJetField {
            lap,
            value: field.clone(),
            dx,
            dy,
        })
    }
}

impl<O: Ops> Field<O> for GridJetField {
    fn value(&self, o: &mut O, x: [f64; 2]) -> Result<O::Value, TapeError> {
        o.constant(interp(&self.value, x))
    }

    fn gradient(&self, o: &mut O, x: [f64; 2]) -> Result<GradientJet<O::Value>, TapeError> {
        Ok(GradientJet {
            val: o.constant(interp(&self.value, x))?,
            grad: [
                o.constant(interp(&self.dx, x))?,
                o.constant(interp(&self.dy, x))?,
            ],
        })
    }

    fn laplacian(&self, o: &mut O, x: [f64; 2]) -> Result<LaplacianJet<O::Value>, TapeError> {
        let g = self.gradient(o, x)?;
        Ok(LaplacianJet {
            val: g.val,
            grad: g.grad,
            lap: o.constant(interp(&self.lap, x))?,
        })
    }
}

fn interp(f: &GridField, x: [f64; 2]) -> f64 {
    let c = [x[0].clamp(0.0, 1.0), x[1].clamp(0.0, 1.0)];
    f.interpolate(c)
        .expect("clamped point lies in the unit square")
}
