//! Mini-batch Adam over the joint parameter vector of both networks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, BoundarySample, Dataset, InteriorSample};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_numeric_csv};
use crate::loss::{self, LossSpec, LossValues, RegularizerSpec, DEFAULT_SHARD_SIZE, TRAIN_EPS_MAG};
use crate::network::MlpParams;
use crate::parallel::Parallelism;

pub const HISTORY_HEADER: &str = "epoch,misfit,regularizer,pde_residual,boundary,total";

const STREAM_INIT_GAMMA: u64 = 10;
const STREAM_INIT_U: u64 = 11;
const STREAM_BATCH_INTERIOR: u64 = 12;
const STREAM_BATCH_BOUNDARY: u64 = 13;
const LOG_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass, `ceil(n / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Initialization and batching seed; set from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
    pub reg: RegularizerSpec,
    pub widths_gamma: Vec<usize>,
    pub widths_u: Vec<usize>,
    /// Constant added to the conductivity network output.
    pub gamma_shift: f64,
    pub eps_mag: f64,
    pub lambda_pde: f64,
    pub lambda_bc: f64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints; the initial and final ones are
    /// always written.
    pub checkpoint_every: usize,
    pub shard_size: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            batch_size: 512,
            steps_per_epoch: None,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            reg: RegularizerSpec::l2(1e-5),
            widths_gamma: vec![2, 32, 32, 32, 1],
            widths_u: vec![2, 32, 32, 32, 1],
            gamma_shift: 1.0,
            eps_mag: TRAIN_EPS_MAG,
            lambda_pde: 1.0,
            lambda_bc: 1.0,
            log_every: 100,
            checkpoint_every: 0,
            shard_size: DEFAULT_SHARD_SIZE,
            threads: 1,
        }
    }
}

fn check_widths(name: &str, w: &[usize]) -> Result<()> {
    if w.len() < 2 || w[0] != 2 || w[w.len() - 1] != 1 || w.contains(&0) {
        return Err(Error::Invalid(format!(
            "{name} must start with 2, end with 1 and have no zero entry, got {w:?}"
        )));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0 && self.eps_adam.is_finite()) {
            return fail(format!("eps_adam must be > 0, got {}", self.eps_adam));
        }
        if !self.gamma_shift.is_finite() {
            return fail("gamma_shift must be finite".into());
        }
        if self.log_every < 1 {
            return fail("log_every must be >= 1".into());
        }
        check_widths("widths_gamma", &self.widths_gamma)?;
        check_widths("widths_u", &self.widths_u)?;
        self.loss_spec().validate()
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            reg: self.reg,
            eps_mag: self.eps_mag,
            lambda_pde: self.lambda_pde,
            lambda_bc: self.lambda_bc,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_threads(self.threads)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.batch_size))
    }

    /// Freshly initialized networks.
    pub fn init_networks(&self) -> Result<(MlpParams, MlpParams)> {
        let g = MlpParams::init_xavier(
            &self.widths_gamma,
            derive_seed(self.seed, STREAM_INIT_GAMMA),
        )?
        .with_output_shift(self.gamma_shift);
        let u = MlpParams::init_xavier(&self.widths_u, derive_seed(self.seed, STREAM_INIT_U))?;
        Ok((g, u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient
/// entry is not finite.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    cfg: &AdamConfig,
    epoch: usize,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(state.m.len(), grads.len());
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { epoch, index });
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// A seeded permutation of `0..n` cut into chunks of `batch_size`; the
/// last chunk may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Endless sequence of batches: consecutive passes, each a fresh
/// permutation seeded by the pass number.
struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    pass: u64,
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchStream {
            n,
            batch,
            seed,
            pass: 0,
            chunks: Vec::new().into_iter(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(c) = self.chunks.next() {
                return c;
            }
            self.chunks =
                make_batches(self.n, self.batch, derive_seed(self.seed, self.pass)).into_iter();
            self.pass += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub values: LossValues,
    /// Seconds since the start of training; not written to the CSV.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn first(&self) -> Option<&HistoryRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let v = r.values;
            let cols = [v.misfit, v.regularizer, v.pde_residual, v.boundary, v.total].map(fmt_f64);
            out.push_str(&format!("{},{}\n", r.epoch, cols.join(",")));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_numeric_csv(path, HISTORY_HEADER)?
            .into_iter()
            .map(|r| HistoryRow {
                epoch: r[0] as usize,
                values: LossValues {
                    misfit: r[1],
                    regularizer: r[2],
                    pde_residual: r[3],
                    boundary: r[4],
                    total: r[5],
                },
                wall_time: 0.0,
            })
            .collect();
        Ok(TrainHistory { rows })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gamma: MlpParams,
    pub u: MlpParams,
    pub history: TrainHistory,
    pub steps: u64,
}

/// Side outputs of a run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where `ckpt_{epoch}` directories go.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_log: Option<LogHook<'a>>,
}

/// Called with every history row as it is logged.
pub type LogHook<'a> = Box<dyn FnMut(&HistoryRow) + 'a>;

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch}")
}

pub fn write_checkpoint(dir: &Path, gamma: &MlpParams, u: &MlpParams) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    gamma.save(dir, "gamma")?;
    u.save(dir, "u")
}

pub fn read_checkpoint(dir: &Path) -> Result<(MlpParams, MlpParams)> {
    Ok((MlpParams::load(dir, "gamma")?, MlpParams::load(dir, "u")?))
}

/// Loss over the whole dataset without a tape, in fixed chunks.
pub fn dataset_loss(
    gamma: &MlpParams,
    u: &MlpParams,
    interior: &[InteriorSample],
    boundary: &[BoundarySample],
    spec: &LossSpec,
    par: Parallelism,
) -> Result<LossValues> {
    let chunks = interior
        .len()
        .div_ceil(LOG_CHUNK)
        .max(boundary.len().div_ceil(LOG_CHUNK));
    let part = |len: usize, k: usize| (k * LOG_CHUNK).min(len)..((k + 1) * LOG_CHUNK).min(len);
    let parts = par.map(chunks, |k| {
        loss::loss_sums(
            gamma,
            u,
            &interior[part(interior.len(), k)],
            &boundary[part(boundary.len(), k)],
            spec,
        )
    });
    let mut sums = [0.0; 4];
    for p in parts {
        for (s, v) in sums.iter_mut().zip(p?) {
            *s += v;
        }
    }
    Ok(spec.values_from_sums(sums, interior.len(), boundary.len()))
}

/// Runs `config.epochs` epochs from a fresh initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, TrainOptions::default())
}

pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    let (gamma0, u0) = config.init_networks()?;
    let spec = config.loss_spec();
    let adam = config.adam();
    let par = config.parallelism();
    let n_gamma = gamma0.num_params();
    let mut flat = [gamma0.as_slice(), u0.as_slice()].concat();
    let mut state = AdamState::new(flat.len());
    let (mut gamma, mut u) = (gamma0, u0);

    let n = dataset.interior.len();
    let mut int_stream = BatchStream::new(
        n,
        config.batch_size,
        derive_seed(config.seed, STREAM_BATCH_INTERIOR),
    );
    let mut bnd_stream = BatchStream::new(
        dataset.boundary.len(),
        config.batch_size,
        derive_seed(config.seed, STREAM_BATCH_BOUNDARY),
    );
    let steps_per_epoch = config.steps_per_epoch(n);

    let start = Instant::now();
    let mut history = TrainHistory::default();
    let mut log =
        |epoch: usize, g: &MlpParams, uu: &MlpParams, history: &mut TrainHistory| -> Result<()> {
            let values = dataset_loss(g, uu, &dataset.interior, &dataset.boundary, &spec, par)?;
            let row = HistoryRow {
                epoch,
                values,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some(cb) = opts.on_log.as_mut() {
                cb(&row);
            }
            history.rows.push(row);
            Ok(())
        };
    let ckpt = |epoch: usize, g: &MlpParams, uu: &MlpParams| -> Result<()> {
        match &opts.checkpoint_dir {
            Some(dir) => write_checkpoint(&dir.join(checkpoint_name(epoch)), g, uu),
            None => Ok(()),
        }
    };

    log(0, &gamma, &u, &mut history)?;
    ckpt(0, &gamma, &u)?;

    let mut ib = Vec::with_capacity(config.batch_size);
    let mut bb = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            ib.clear();
            ib.extend(
                int_stream
                    .next_batch()
                    .into_iter()
                    .map(|i| dataset.interior[i]),
            );
            bb.clear();
            bb.extend(
                bnd_stream
                    .next_batch()
                    .into_iter()
                    .map(|i| dataset.boundary[i]),
            );
            let step = loss::loss_and_gradient(&gamma, &u, &ib, &bb, &spec, config.shard_size, par)
                .and_then(|lg| adam_step(&mut state, &mut flat, &lg.grad, &adam, epoch));
            if let Err(e) = step {
                ckpt(epoch - 1, &gamma, &u)?;
                return Err(e);
            }
            gamma.as_mut_slice().copy_from_slice(&flat[..n_gamma]);
            u.as_mut_slice().copy_from_slice(&flat[n_gamma..]);
        }
        if epoch % config.log_every == 0 {
            log(epoch, &gamma, &u, &mut history)?;
        }
        if epoch == config.epochs
            || (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0)
        {
            ckpt(epoch, &gamma, &u)?;
        }
    }
    Ok(TrainOutcome {
        gamma,
        u,
        history,
        steps: state.t,
    })
}
