//! Tanh multilayer perceptrons and their spatial jets.
//!
//! A network with widths `N_0, ..., N_L` has `L` affine layers; every layer
//! but the last is followed by `tanh`. Parameters are stored flat, layer by
//! layer: the row-major `N_{l+1} x N_l` weight matrix followed by the
//! `N_{l+1}` biases.
//!
//! [`BoundMlp`] is a parameter set registered on an [`Ops`] arena (usually a
//! fresh [`Tape`](crate::autodiff::Tape) per batch). Spatial derivatives are
//! not obtained by nested differentiation: each layer pushes the triple
//! (value, gradient, Hessian) with respect to the input point through the
//! affine map and through `tanh` using
//! `tanh' = 1 - tanh^2` and `tanh'' = -2 tanh (1 - tanh^2)`, so every entry
//! is an ordinary expression of the parameters and can be back-propagated.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ops, Plain, TapeError};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64};

/// Input dimension.
pub const DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    widths: Vec<usize>,
    values: Vec<f64>,
    offsets: Vec<usize>,
    output_shift: f64,
    seed: u64,
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Invalid(format!(
            "network needs at least an input and an output width, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Invalid(format!("zero layer width in {widths:?}")));
    }
    if widths[0] != DIM || *widths.last().unwrap() != 1 {
        return Err(Error::Invalid(format!(
            "widths must start at {DIM} and end at 1, got {widths:?}"
        )));
    }
    Ok(())
}

fn layer_offsets(widths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(widths.len());
    let mut acc = 0;
    offsets.push(0);
    for w in widths.windows(2) {
        acc += w[1] * w[0] + w[1];
        offsets.push(acc);
    }
    offsets
}

impl MlpParams {
    /// All-zero parameters.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        let offsets = layer_offsets(widths);
        Ok(MlpParams {
            widths: widths.to_vec(),
            values: vec![0.0; *offsets.last().unwrap()],
            offsets,
            output_shift: 0.0,
            seed: 0,
        })
    }

    /// Xavier-uniform weights on `[-sqrt(6/(n_in+n_out)), +sqrt(6/(n_in+n_out))]`,
    /// zero biases. Draws come from ChaCha8 seeded with `seed`, layer by layer
    /// in row-major order.
    pub fn init_xavier(widths: &[usize], seed: u64) -> Result<Self> {
        let mut params = Self::zeros(widths)?;
        params.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..params.num_layers() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let dist =
                Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Invalid(e.to_string()))?;
            let start = params.offsets[l];
            for w in &mut params.values[start..start + n_in * n_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn with_output_shift(mut self, shift: f64) -> Self {
        self.output_shift = shift;
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn output_shift(&self) -> f64 {
        self.output_shift
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        self.offsets[layer] + row * self.widths[layer] + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        self.offsets[layer] + self.widths[layer] * self.widths[layer + 1] + row
    }

    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.values[self.weight_index(layer, row, col)]
    }

    pub fn bias(&self, layer: usize, row: usize) -> f64 {
        self.values[self.bias_index(layer, row)]
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, v: f64) {
        let i = self.weight_index(layer, row, col);
        self.values[i] = v;
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, v: f64) {
        let i = self.bias_index(layer, row);
        self.values[i] = v;
    }

    /// Registers every parameter as a trainable leaf, in storage order.
    pub fn bind<O: Ops>(&self, ops: &mut O) -> Result<BoundMlp<'_, O::Value>, TapeError> {
        let values = self
            .values
            .iter()
            .map(|&v| ops.variable(v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundMlp {
            shape: self,
            values: Cow::Owned(values),
        })
    }

    /// Output value without recording anything.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.bind_plain()
            .forward(&mut Plain, x)
            .expect("plain evaluation of finite parameters cannot fail")
    }

    /// Value, gradient and Hessian without recording anything.
    pub fn eval_jet(&self, x: [f64; 2]) -> SpatialJet<f64> {
        self.bind_plain()
            .forward_jet(&mut Plain, x)
            .expect("plain evaluation of finite parameters cannot fail")
    }

    pub(crate) fn bind_plain(&self) -> BoundMlp<'_, f64> {
        BoundMlp {
            shape: self,
            values: Cow::Borrowed(&self.values),
        }
    }

    /// Writes `<stem>.csv` (header `layer,kind,row,col,value`, one row per
    /// parameter in storage order) and `<stem>.json` (widths, seed, output shift).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut csv = String::from("layer,kind,row,col,value\n");
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            for r in 0..n_out {
                for c in 0..n_in {
                    csv.push_str(&format!(
                        "{l},weight,{r},{c},{}\n",
                        fmt_f64(self.weight(l, r, c))
                    ));
                }
            }
            for r in 0..n_out {
                csv.push_str(&format!("{l},bias,{r},0,{}\n", fmt_f64(self.bias(l, r))));
            }
        }
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
        let meta = CheckpointMeta {
            widths: self.widths.clone(),
            seed: self.seed,
            output_shift: self.output_shift,
        };
        let json_path = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(&json_path, body + "\n").map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: json_path.clone(),
            source,
        })?;
        let mut params = Self::zeros(&meta.widths)?;
        params.seed = meta.seed;
        params.output_shift = meta.output_shift;

        let csv_path = dir.join(format!("{stem}.csv"));
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("layer,kind,row,col,value") {
            return Err(Error::parse(
                &csv_path,
                1,
                "expected header `layer,kind,row,col,value`",
            ));
        }
        let mut seen = 0usize;
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::parse(&csv_path, lineno, msg.to_string());
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad("bad index"));
            let (l, r, c) = (idx(fields[0])?, idx(fields[2])?, idx(fields[3])?);
            let v = parse_f64(fields[4]).ok_or_else(|| bad("bad value"))?;
            if l >= params.num_layers() || r >= params.widths[l + 1] {
                return Err(bad("index outside the declared widths"));
            }
            let slot = match fields[1] {
                "weight" if c < params.widths[l] => params.weight_index(l, r, c),
                "bias" if c == 0 => params.bias_index(l, r),
                _ => return Err(bad("bad kind or column")),
            };
            params.values[slot] = v;
            seen += 1;
        }
        if seen != params.num_params() {
            return Err(Error::parse(
                &csv_path,
                seen + 1,
                format!("expected {} parameters, found {seen}", params.num_params()),
            ));
        }
        Ok(params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    widths: Vec<usize>,
    seed: u64,
    output_shift: f64,
}

/// Network output with its first and second spatial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialJet<V> {
    pub val: V,
    pub grad: [V; 2],
    /// `hess[0][1]` and `hess[1][0]` are the same value (node).
    pub hess: [[V; 2]; 2],
}

/// Network output with its spatial gradient only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientJet<V> {
    pub val: V,
    pub grad: [V; 2],
}

/// Network output with its spatial gradient and Laplacian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianJet<V> {
    pub val: V,
    pub grad: [V; 2],
    pub lap: V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Order {
    Value,
    Gradient,
    Laplacian,
    Hessian,
}

/// Parameters registered on an arena.
pub struct BoundMlp<'a, V: Clone> {
    shape: &'a MlpParams,
    values: Cow<'a, [V]>,
}

impl<V: Copy> BoundMlp<'_, V> {
    pub fn params(&self) -> &[V] {
        &self.values
    }

    fn w(&self, layer: usize, row: usize, col: usize) -> V {
        self.values[self.shape.weight_index(layer, row, col)]
    }

    fn b(&self, layer: usize, row: usize) -> V {
        self.values[self.shape.bias_index(layer, row)]
    }

    pub fn forward<O: Ops<Value = V>>(&self, o: &mut O, x: [f64; 2]) -> Result<V, TapeError> {
        Ok(self.propagate(o, x, Order::Value)?.val)
    }

    pub fn forward_gradient<O: Ops<Value = V>>(
        &self,
        o: &mut O,
        x: [f64; 2],
    ) -> Result<GradientJet<V>, TapeError> {
        let j = self.propagate(o, x, Order::Gradient)?;
        Ok(GradientJet {
            val: j.val,
            grad: j.grad.expect("gradient requested"),
        })
    }

    /// Value, gradient and Laplacian; cheaper than the full Hessian.
    pub fn forward_laplacian<O: Ops<Value = V>>(
        &self,
        o: &mut O,
        x: [f64; 2],
    ) -> Result<LaplacianJet<V>, TapeError> {
        let j = self.propagate(o, x, Order::Laplacian)?;
        let grad = j.grad.expect("gradient requested");
        let lap = match j.hess {
            Some(h) => h[0],
            None => o.constant(0.0)?,
        };
        Ok(LaplacianJet {
            val: j.val,
            grad,
            lap,
        })
    }

    pub fn forward_jet<O: Ops<Value = V>>(
        &self,
        o: &mut O,
        x: [f64; 2],
    ) -> Result<SpatialJet<V>, TapeError> {
        let j = self.propagate(o, x, Order::Hessian)?;
        let grad = j.grad.expect("gradient requested");
        let [xx, xy, yy] = match j.hess {
            Some(h) => h,
            None => {
                // single affine layer: the Hessian vanishes identically
                let z = o.constant(0.0)?;
                [z, z, z]
            }
        };
        Ok(SpatialJet {
            val: j.val,
            grad,
            hess: [[xx, xy], [xy, yy]],
        })
    }

    fn propagate<O: Ops<Value = V>>(
        &self,
        o: &mut O,
        x: [f64; 2],
        order: Order,
    ) -> Result<RawJet<V>, TapeError> {
        let widths = &self.shape.widths;
        let layers = self.shape.num_layers();
        let want_grad = order >= Order::Gradient;
        let want_hess = order >= Order::Laplacian;
        // second-order components carried: the Hessian (xx, xy, yy) or the
        // Laplacian alone
        let n2 = if order == Order::Hessian { 3 } else { 1 };

        // First affine layer: the input is a constant point, so the
        // pre-activation gradient is the weight row and its Hessian is zero.
        let n1 = widths[1];
        let mut z_val = Vec::with_capacity(n1);
        let mut z_grad: Vec<[V; 2]> = Vec::with_capacity(n1);
        for m in 0..n1 {
            let (a0, a1) = (self.w(0, m, 0), self.w(0, m, 1));
            let t0 = o.scale(a0, x[0])?;
            let t1 = o.scale(a1, x[1])?;
            let s = o.add(t0, t1)?;
            z_val.push(o.add(s, self.b(0, m))?);
            if want_grad {
                z_grad.push([a0, a1]);
            }
        }
        let mut z_hess: Option<Vec<[V; 3]>> = None;

        let mut l = 0;
        while l + 1 < layers {
            // tanh activation of layer l
            let n = z_val.len();
            let mut s_val = Vec::with_capacity(n);
            let mut s_grad = Vec::with_capacity(if want_grad { n } else { 0 });
            let mut s_hess = Vec::with_capacity(if want_hess { n } else { 0 });
            for m in 0..n {
                let s = o.tanh(z_val[m])?;
                s_val.push(s);
                if !want_grad {
                    continue;
                }
                let s2 = o.square(s)?;
                let ms2 = o.neg(s2)?;
                let d1 = o.offset(ms2, 1.0)?;
                let gz = z_grad[m];
                s_grad.push([o.mul(d1, gz[0])?, o.mul(d1, gz[1])?]);
                if !want_hess {
                    continue;
                }
                let sd1 = o.mul(s, d1)?;
                let d2 = o.scale(sd1, -2.0)?;
                let mut h = [d2; 3];
                for e in 0..n2 {
                    let gg = match (n2, e) {
                        (1, _) => {
                            let a = o.square(gz[0])?;
                            let b = o.square(gz[1])?;
                            o.add(a, b)?
                        }
                        (_, 1) => o.mul(gz[0], gz[1])?,
                        (_, e) => o.square(gz[e / 2])?,
                    };
                    let curv = o.mul(d2, gg)?;
                    h[e] = match &z_hess {
                        Some(hz) => {
                            let lin = o.mul(d1, hz[m][e])?;
                            o.add(curv, lin)?
                        }
                        None => curv,
                    };
                }
                s_hess.push(h);
            }

            // affine layer l + 1
            l += 1;
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            z_val = Vec::with_capacity(n_out);
            z_grad = Vec::with_capacity(if want_grad { n_out } else { 0 });
            let mut hz = Vec::with_capacity(if want_hess { n_out } else { 0 });
            for m in 0..n_out {
                let a = self.w(l, m, 0);
                let mut acc = o.mul(a, s_val[0])?;
                for i in 1..n_in {
                    let t = o.mul(self.w(l, m, i), s_val[i])?;
                    acc = o.add(acc, t)?;
                }
                z_val.push(o.add(acc, self.b(l, m))?);
                if want_grad {
                    let mut g = [o.mul(a, s_grad[0][0])?, o.mul(a, s_grad[0][1])?];
                    for i in 1..n_in {
                        let w = self.w(l, m, i);
                        for (q, gq) in g.iter_mut().enumerate() {
                            let t = o.mul(w, s_grad[i][q])?;
                            *gq = o.add(*gq, t)?;
                        }
                    }
                    z_grad.push(g);
                }
                if want_hess {
                    let mut h = [a; 3];
                    for e in 0..n2 {
                        h[e] = o.mul(a, s_hess[0][e])?;
                    }
                    for i in 1..n_in {
                        let w = self.w(l, m, i);
                        for (e, he) in h.iter_mut().enumerate().take(n2) {
                            let t = o.mul(w, s_hess[i][e])?;
                            *he = o.add(*he, t)?;
                        }
                    }
                    hz.push(h);
                }
            }
            if want_hess {
                z_hess = Some(hz);
            }
        }

        let mut val = z_val[0];
        if self.shape.output_shift != 0.0 {
            val = o.offset(val, self.shape.output_shift)?;
        }
        Ok(RawJet {
            val,
            grad: want_grad.then(|| z_grad[0]),
            hess: if want_hess {
                z_hess.map(|h| h[0])
            } else {
                None
            },
        })
    }
}

struct RawJet<V> {
    val: V,
    grad: Option<[V; 2]>,
    hess: Option<[V; 3]>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    /// Straight-line re-evaluation, independent of `propagate`.
    fn reference_forward(p: &MlpParams, x: [f64; 2]) -> f64 {
        let w = p.widths();
        let mut act: Vec<f64> = x.to_vec();
        for l in 0..p.num_layers() {
            let mut next = vec![0.0; w[l + 1]];
            for (r, out) in next.iter_mut().enumerate() {
                let mut s = p.bias(l, r);
                for (c, a) in act.iter().enumerate() {
                    s += p.weight(l, r, c) * a;
                }
                *out = if l + 1 < p.num_layers() { s.tanh() } else { s };
            }
            act = next;
        }
        act[0] + p.output_shift()
    }

    #[test]
    fn xavier_first_layer_within_bound() {
        let p = MlpParams::init_xavier(&[2, 32, 32, 32, 1], 0).unwrap();
        let bound = (6.0f64 / 34.0).sqrt();
        for r in 0..32 {
            for c in 0..2 {
                assert!(p.weight(0, r, c).abs() <= bound);
            }
            assert_eq!(p.bias(0, r), 0.0);
        }
        let inner = (6.0f64 / 64.0).sqrt();
        assert!((0..32).all(|r| (0..32).all(|c| p.weight(1, r, c).abs() <= inner)));
    }

    #[test]
    fn xavier_is_seeded() {
        let a = MlpParams::init_xavier(&[2, 32, 32, 32, 1], 0).unwrap();
        let b = MlpParams::init_xavier(&[2, 32, 32, 32, 1], 0).unwrap();
        let c = MlpParams::init_xavier(&[2, 32, 32, 32, 1], 1).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a.as_slice().iter().zip(c.as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn bad_widths_rejected() {
        assert!(MlpParams::init_xavier(&[2, 0, 1], 0).is_err());
        assert!(MlpParams::zeros(&[2]).is_err());
        assert!(MlpParams::zeros(&[3, 4, 1]).is_err());
        assert!(MlpParams::zeros(&[2, 4, 2]).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[2, 8, 8, 1]).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        for x in [[0.0, 0.0], [0.3, 0.9], [1.0, 1.0]] {
            let y = b.forward(&mut t, x).unwrap();
            assert_eq!(t.value(y), 0.0);
        }
    }

    #[test]
    fn single_affine_layer() {
        let mut p = MlpParams::zeros(&[2, 1]).unwrap();
        p.set_weight(0, 0, 0, 1.5);
        p.set_weight(0, 0, 1, -0.25);
        p.set_bias(0, 0, 0.125);
        let x = [0.5, 0.75];
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let y = b.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), 1.5 * 0.5 - 0.25 * 0.75 + 0.125);
        let jet = b.forward_jet(&mut t, x).unwrap();
        assert_eq!(t.value(jet.grad[0]), 1.5);
        assert_eq!(t.value(jet.grad[1]), -0.25);
        for row in jet.hess {
            for h in row {
                assert_eq!(t.value(h), 0.0);
            }
        }
    }

    #[test]
    fn hessian_is_structurally_symmetric() {
        let p = MlpParams::init_xavier(&[2, 6, 6, 1], 3).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let jet = b.forward_jet(&mut t, [0.2, 0.4]).unwrap();
        assert_eq!(jet.hess[0][1], jet.hess[1][0]);
    }

    #[test]
    fn output_shift_applies_to_value_only() {
        let p = MlpParams::init_xavier(&[2, 5, 5, 1], 9).unwrap();
        let q = p.clone().with_output_shift(1.0);
        let x = [0.3, 0.6];
        assert!((q.eval(x) - p.eval(x) - 1.0).abs() < 1e-15);
        assert_eq!(q.eval_jet(x).grad, p.eval_jet(x).grad);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init_xavier(&[2, 7, 5, 1], 42)
            .unwrap()
            .with_output_shift(1.0);
        p.save(dir.path(), "gamma").unwrap();
        let q = MlpParams::load(dir.path(), "gamma").unwrap();
        assert_eq!(p, q);
        let bits = |m: &MlpParams| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn checkpoint_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = MlpParams::init_xavier(&[2, 3, 1], 1).unwrap();
        p.save(dir.path(), "u").unwrap();
        let path = dir.path().join("u.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&path, cut.join("\n")).unwrap();
        assert!(matches!(
            MlpParams::load(dir.path(), "u"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn output_bounded_by_final_layer_weights() {
        // |phi| <= N_D * max|A_D| + |b_D| since tanh is bounded by one
        let p = MlpParams::init_xavier(&[2, 16, 16, 16, 1], 5).unwrap();
        let last = p.num_layers() - 1;
        let bound_w = (0..16)
            .map(|c| p.weight(last, 0, c).abs())
            .fold(0.0, f64::max);
        let bound = 16.0 * bound_w + p.bias(last, 0).abs();
        for i in 0..=10 {
            for j in 0..=10 {
                let v = p.eval([i as f64 / 10.0, j as f64 / 10.0]);
                assert!(v.abs() <= bound);
            }
        }
    }

    #[test]
    fn laplacian_is_hessian_trace() {
        let p = MlpParams::init_xavier(&[2, 6, 5, 1], 3).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let full = b.forward_jet(&mut t, [0.3, 0.8]).unwrap();
        let lap = b.forward_laplacian(&mut t, [0.3, 0.8]).unwrap();
        let trace = t.value(full.hess[0][0]) + t.value(full.hess[1][1]);
        assert!((t.value(lap.lap) - trace).abs() <= 1e-14 * (1.0 + trace.abs()));
        assert_eq!(t.value(lap.val), t.value(full.val));
        assert_eq!(t.value(lap.grad[1]), t.value(full.grad[1]));
        let affine = MlpParams::init_xavier(&[2, 1], 0).unwrap();
        let mut t = Tape::new();
        let b = affine.bind(&mut t).unwrap();
        let lap = b.forward_laplacian(&mut t, [0.5, 0.5]).unwrap();
        assert_eq!(t.value(lap.lap), 0.0);
    }

    fn fd_point() -> impl Strategy<Value = [f64; 2]> {
        (0.05f64..0.95, 0.05f64..0.95).prop_map(|(a, b)| [a, b])
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()) || (a - b).abs() <= abs
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_matches_reference(seed in 0u64..1000, x in fd_point()) {
            let p = MlpParams::init_xavier(&[2, 9, 7, 5, 1], seed).unwrap();
            let mut t = Tape::new();
            let b = p.bind(&mut t).unwrap();
            let y = b.forward(&mut t, x).unwrap();
            let y = t.value(y);
            let r = reference_forward(&p, x);
            prop_assert!((y - r).abs() <= 1e-14 * (1.0 + r.abs()));
            let jet = b.forward_jet(&mut t, x).unwrap();
            prop_assert_eq!(t.value(jet.val), y);
        }

        #[test]
        fn jet_matches_finite_differences(seed in 0u64..1000, x in fd_point()) {
            let p = MlpParams::init_xavier(&[2, 8, 8, 8, 1], seed).unwrap();
            let jet = p.eval_jet(x);
            let f = |dx: f64, dy: f64| reference_forward(&p, [x[0] + dx, x[1] + dy]);
            let h = 1e-4;
            let gx = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
            let gy = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
            prop_assert!(rel_close(jet.grad[0], gx, 1e-4, 1e-8), "{} {}", jet.grad[0], gx);
            prop_assert!(rel_close(jet.grad[1], gy, 1e-4, 1e-8), "{} {}", jet.grad[1], gy);

            let h = 1e-3;
            let f0 = f(0.0, 0.0);
            let hxx = (f(h, 0.0) - 2.0 * f0 + f(-h, 0.0)) / (h * h);
            let hyy = (f(0.0, h) - 2.0 * f0 + f(0.0, -h)) / (h * h);
            let hxy = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
            prop_assert!(rel_close(jet.hess[0][0], hxx, 1e-3, 1e-6), "{} {}", jet.hess[0][0], hxx);
            prop_assert!(rel_close(jet.hess[1][1], hyy, 1e-3, 1e-6), "{} {}", jet.hess[1][1], hyy);
            prop_assert!(rel_close(jet.hess[0][1], hxy, 1e-3, 1e-6), "{} {}", jet.hess[0][1], hxy);
        }

        #[test]
        fn parameter_gradients_of_jet_entries(seed in 0u64..200, x in fd_point(), entry in 0usize..6) {
            let p = MlpParams::init_xavier(&[2, 5, 5, 1], seed).unwrap();
            let pick = |j: &SpatialJet<f64>| match entry {
                0 => j.val,
                1 => j.grad[0],
                2 => j.grad[1],
                3 => j.hess[0][0],
                4 => j.hess[0][1],
                _ => j.hess[1][1],
            };
            let mut t = Tape::new();
            let b = p.bind(&mut t).unwrap();
            let jet = b.forward_jet(&mut t, x).unwrap();
            let root = match entry {
                0 => jet.val,
                1 => jet.grad[0],
                2 => jet.grad[1],
                3 => jet.hess[0][0],
                4 => jet.hess[0][1],
                _ => jet.hess[1][1],
            };
            let grads = t.backward(root).params();
            let h = 1e-5;
            for k in 0..p.num_params() {
                let mut hi = p.clone();
                let mut lo = p.clone();
                hi.as_mut_slice()[k] += h;
                lo.as_mut_slice()[k] -= h;
                let fd = (pick(&hi.eval_jet(x)) - pick(&lo.eval_jet(x))) / (2.0 * h);
                prop_assert!(rel_close(grads[k], fd, 1e-4, 1e-7), "param {} grad {} fd {}", k, grads[k], fd);
            }
        }
    }
}
