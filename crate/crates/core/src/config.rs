//! Run configuration: a TOML file with one table per section, overridable
//! key by key through dotted names such as `model.epochs`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::baseline::{Averaging, BaselineConfig};
use crate::cohort::{Anchor, CohortConfig};
use crate::featurize::FeaturizeConfig;
use crate::mix_seed;
use crate::seqmodel::{ModelDims, TrainConfig};
use crate::synth::SynthConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config file {path}: {reason}")]
    File { path: String, reason: String },
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Event records; defaults to the synth stage output.
    pub events: Option<PathBuf>,
    pub admissions: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            events: None,
            admissions: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub horizon_days: i64,
    pub prereg_window_hours: i64,
    pub anchor: Anchor,
}

impl Default for CohortSection {
    fn default() -> Self {
        let c = CohortConfig::default();
        Self {
            horizon_days: c.horizon_days,
            prereg_window_hours: c.prereg_window_hours,
            anchor: c.anchor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Defaults to the master seed.
    pub seed: Option<u64>,
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            seed: None,
            ratios: crate::cohort::DEFAULT_RATIOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeSection {
    pub min_token_count: usize,
    pub max_features: usize,
    pub window_hours: i64,
    pub max_windows: usize,
    pub max_time_buckets: usize,
}

impl Default for FeaturizeSection {
    fn default() -> Self {
        let f = FeaturizeConfig::default();
        Self {
            min_token_count: f.min_token_count,
            max_features: f.max_features,
            window_hours: f.window_hours,
            max_windows: f.max_windows,
            max_time_buckets: f.max_time_buckets,
        }
    }
}

/// `"off"` or a target positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub struct Oversample(pub Option<f64>);

impl TryFrom<Value> for Oversample {
    type Error = String;

    fn try_from(v: Value) -> Result<Self, Self::Error> {
        match v {
            Value::String(s) if s == "off" => Ok(Self(None)),
            Value::String(s) => s
                .parse::<f64>()
                .map(|r| Self(Some(r)))
                .map_err(|_| format!("expected \"off\" or a rate, got {s:?}")),
            Value::Float(r) => Ok(Self(Some(r))),
            Value::Integer(r) => Ok(Self(Some(r as f64))),
            other => Err(format!("expected \"off\" or a rate, got {other}")),
        }
    }
}

impl From<Oversample> for Value {
    fn from(o: Oversample) -> Self {
        match o.0 {
            None => Value::String("off".into()),
            Some(r) => Value::Float(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub a: usize,
    pub d_t: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub dropout_embedding: f64,
    pub dropout_hidden: f64,
    pub oversample: Oversample,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            d: 32,
            a: 32,
            d_t: 8,
            hidden: 128,
            lr: t.lr,
            batch: t.batch,
            epochs: t.epochs,
            dropout_embedding: t.dropout_embedding,
            dropout_hidden: t.dropout_hidden,
            oversample: Oversample(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub top_k: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub averaging: Averaging,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            top_k: b.top_k,
            epochs: b.epochs,
            batch: b.batch,
            lr: b.lr,
            averaging: b.averaging,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; split, model and baseline seeds derive from it.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub cohort: CohortSection,
    pub split: SplitSection,
    pub featurize: FeaturizeSection,
    pub model: ModelSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
}

/// Keys that default to absent and therefore do not show up when the
/// default config is serialized.
const OPTIONAL_KEYS: [&str; 3] = ["paths.events", "paths.admissions", "split.seed"];

fn flatten(prefix: &str, table: &Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push(key),
        }
    }
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().ok_or_else(|| invalid(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(invalid(key, format!("{p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Every dotted key accepted as an override.
    pub fn keys() -> Vec<String> {
        let table = Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut keys = Vec::new();
        flatten("", &table, &mut keys);
        keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        keys.sort();
        keys.dedup();
        keys
    }

    /// File values (if any), then overrides; the result is validated.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::File {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                text.parse::<Table>().map_err(|e| ConfigError::File {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?
            }
            None => Table::new(),
        };
        let known = Self::keys();
        for (k, v) in overrides {
            if !known.contains(k) {
                return Err(invalid(k, "unknown key"));
            }
            set_dotted(&mut table, k, parse_scalar(v))?;
        }
        let cfg: RunConfig = Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| {
            let field = offending_key(&table).unwrap_or_else(|| "config".into());
            invalid(&field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |name: &str, v: usize| if v == 0 { Err(invalid(name, "must be positive")) } else { Ok(()) };
        let rate = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(name, format!("{v} outside [0, 1)")))
            }
        };
        self.synth.validate().map_err(|r| invalid("synth", r))?;
        if self.cohort.horizon_days <= 0 {
            return Err(invalid("cohort.horizon_days", "must be positive"));
        }
        if self.cohort.prereg_window_hours < 0 {
            return Err(invalid("cohort.prereg_window_hours", "must be non-negative"));
        }
        let r = self.split.ratios;
        if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("split.ratios", format!("{r:?} must be fractions summing to 1")));
        }
        positive("featurize.max_features", self.featurize.max_features)?;
        positive("featurize.max_windows", self.featurize.max_windows)?;
        positive("featurize.max_time_buckets", self.featurize.max_time_buckets)?;
        if self.featurize.window_hours <= 0 {
            return Err(invalid("featurize.window_hours", "must be positive"));
        }
        let m = &self.model;
        for (name, v) in [("model.d", m.d), ("model.a", m.a), ("model.d_t", m.d_t), ("model.hidden", m.hidden), ("model.batch", m.batch)] {
            positive(name, v)?;
        }
        if !(m.lr > 0.0 && m.lr.is_finite()) {
            return Err(invalid("model.lr", "must be positive"));
        }
        rate("model.dropout_embedding", m.dropout_embedding)?;
        rate("model.dropout_hidden", m.dropout_hidden)?;
        if let Some(r) = m.oversample.0 {
            if !(r > 0.0 && r < 1.0) {
                return Err(invalid("model.oversample", format!("{r} outside (0, 1)")));
            }
        }
        positive("baseline.top_k", self.baseline.top_k)?;
        positive("baseline.batch", self.baseline.batch)?;
        if !(self.baseline.lr > 0.0 && self.baseline.lr.is_finite()) {
            return Err(invalid("baseline.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(invalid("eval.threshold", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig {
            horizon_days: self.cohort.horizon_days,
            prereg_window_hours: self.cohort.prereg_window_hours,
            anchor: self.cohort.anchor,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn featurize_config(&self) -> FeaturizeConfig {
        let f = &self.featurize;
        FeaturizeConfig {
            min_token_count: f.min_token_count,
            max_features: f.max_features,
            window_hours: f.window_hours,
            max_windows: f.max_windows,
            max_time_buckets: f.max_time_buckets,
        }
    }

    pub fn model_dims(&self, n_tokens: usize, n_features: usize) -> ModelDims {
        ModelDims {
            n_tokens,
            n_features,
            d: self.model.d,
            a: self.model.a,
            d_t: self.model.d_t,
            hidden: self.model.hidden,
            max_time_buckets: self.featurize.max_time_buckets,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            batch: self.model.batch,
            lr: self.model.lr,
            dropout_embedding: self.model.dropout_embedding,
            dropout_hidden: self.model.dropout_hidden,
            seed: mix_seed(self.seed, 0x004d_4f44_454c),
        }
    }

    pub fn oversample_seed(&self) -> u64 {
        mix_seed(self.seed, 0x4f56_4552)
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let b = &self.baseline;
        BaselineConfig {
            top_k: b.top_k,
            epochs: b.epochs,
            batch: b.batch,
            lr: b.lr,
            averaging: b.averaging,
            seed: mix_seed(self.seed, 0x4241_5345),
        }
    }
}

/// The first user-supplied key that fails to deserialize on top of the
/// defaults; value-level errors carry no position of their own.
fn offending_key(table: &Table) -> Option<String> {
    let base = Table::try_from(RunConfig::default()).expect("default config serializes");
    let mut keys = Vec::new();
    flatten("", table, &mut keys);
    keys.into_iter().find(|key| {
        let mut probe = base.clone();
        let mut cur = table;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        for p in parts {
            cur = cur[p].as_table().expect("flatten walks tables");
        }
        set_dotted(&mut probe, key, cur[last].clone()).is_err()
            || Value::Table(probe).try_into::<RunConfig>().is_err()
    })
}
