//! Experiment configuration: one JSON document with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    derive_seed, DataOptions, ExampleId, NoiseKind, NoiseSpec, DEFAULT_GAMMA_FLOOR,
    DEFAULT_GRID_RES,
};
use crate::error::{Error, Result};
use crate::eval::{Metrics, NoiseEcho, RegEcho, WidthsEcho};
use crate::grid::GridField;
use crate::trainer::TrainConfig;

/// Environment variable overriding [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "CDII_SEED";

const STREAM_NOISE: u64 = 3;
const STREAM_TRAIN: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExampleConfig {
    FourMode,
    Discontinuous,
    DisjointModes,
    /// Conductivity grid in the `x,y,value` CSV format.
    Custom {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub example: ExampleConfig,
    pub n: usize,
    pub grid_res: usize,
    /// `null` disables the floor.
    pub gamma_floor: Option<f64>,
    pub noise: NoiseConfig,
    /// Master seed; sampling, noise and training seeds derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub eval_resolution: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            example: ExampleConfig::FourMode,
            n: 10_000,
            grid_res: DEFAULT_GRID_RES,
            gamma_floor: Some(DEFAULT_GAMMA_FLOOR),
            noise: NoiseConfig {
                kind: NoiseKind::Multiplicative,
                level: 0.01,
            },
            seed: 0,
            output_dir: PathBuf::from("out"),
            eval_resolution: DEFAULT_GRID_RES,
            train: TrainConfig::default(),
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Sets `key` (dotted path) in `doc` to `raw`, parsed as JSON when it
/// parses and taken as a string otherwise. Missing objects are created.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "empty path segment"));
    }
    let mut cur = doc;
    for (k, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(map) => map,
            _ => return Err(config_err(&parts[..k].join("."), "is not an object")),
        };
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Deep-merges `patch` into `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| config_err(s, "override must look like key=value"))
}

impl ExperimentConfig {
    /// Parses a document, rejecting unknown keys with their path.
    pub fn from_value(doc: Value) -> Result<Self> {
        serde_path_to_error::deserialize(doc).map_err(|e| {
            let field = e.path().to_string();
            config_err(&field, e.into_inner().to_string())
        })
    }

    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides and the seed override, then validates.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        seed_override: Option<u64>,
    ) -> Result<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Json {
                    path: p.to_path_buf(),
                    source: e,
                })?
            }
            None => Value::Object(Default::default()),
        };
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, doc);
        let mut doc = merged;
        for o in overrides {
            let (k, v) = parse_assignment(o)?;
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg = Self::from_value(doc)?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed from the environment, if set.
    pub fn seed_from_env() -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| config_err(SEED_ENV, format!("not an unsigned integer: {s:?}"))),
            Err(_) => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(config_err("n", "must be >= 1"));
        }
        if self.grid_res < 33 {
            return Err(config_err(
                "grid_res",
                format!("must be >= 33, got {}", self.grid_res),
            ));
        }
        if self.eval_resolution < 3 {
            return Err(config_err("eval_resolution", "must be >= 3"));
        }
        if let Some(f) = self.gamma_floor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(config_err(
                    "gamma_floor",
                    format!("must be > 0 or null, got {f}"),
                ));
            }
        }
        self.noise_spec()
            .validate()
            .map_err(|e| config_err("noise.level", e.to_string()))?;
        self.train_config().validate().map_err(|e| match e {
            Error::Invalid(m) => config_err("train", m),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn example_id(&self) -> Result<ExampleId> {
        Ok(match &self.example {
            ExampleConfig::FourMode => ExampleId::FourMode,
            ExampleConfig::Discontinuous => ExampleId::Discontinuous,
            ExampleConfig::DisjointModes => ExampleId::DisjointModes,
            ExampleConfig::Custom { path } => ExampleId::Custom(GridField::read_csv(path)?),
        })
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.noise.kind,
            level: self.noise.level,
            seed: derive_seed(self.seed, STREAM_NOISE),
        }
    }

    pub fn data_options(&self) -> DataOptions {
        DataOptions {
            gamma_floor: self.gamma_floor,
        }
    }

    /// Training settings with the derived training seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, STREAM_TRAIN),
            ..self.train.clone()
        }
    }

    pub fn metrics(&self, err_gamma: f64, err_u: f64, err_a: f64) -> Metrics {
        Metrics {
            example: match &self.example {
                ExampleConfig::FourMode => "four_mode",
                ExampleConfig::Discontinuous => "discontinuous",
                ExampleConfig::DisjointModes => "disjoint_modes",
                ExampleConfig::Custom { .. } => "custom",
            }
            .to_string(),
            noise: NoiseEcho {
                kind: self.noise.kind,
                level: self.noise.level,
            },
            reg: RegEcho::from(&self.train.reg),
            err_gamma,
            err_u,
            err_a,
            epochs: self.train.epochs,
            n: self.n,
            widths: WidthsEcho {
                gamma: self.train.widths_gamma.clone(),
                u: self.train.widths_u.clone(),
            },
            seed: self.seed,
        }
    }
}
