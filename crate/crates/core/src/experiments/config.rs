//! Run configuration: TOML files, dotted `key=value` overrides, and defaults
//! that depend on the model kind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::models::{ModelConfig, ModelKind};
use crate::optim::AdamWConfig;
use crate::rng;
use crate::taskgen::{mask_set, DistributionName, Support, TeacherDims};
use crate::{Error, Result};

/// Environment variable naming the directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "MODICL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub modules: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Tokens per episode `N`, query included.
    pub context_len: usize,
    pub train_distribution: DistributionName,
    /// Defaults to the two-hot masks held out from the training support.
    pub ood_distribution: Option<DistributionName>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            modules: 6,
            input_dim: 16,
            hidden_dim: 16,
            output_dim: 1,
            context_len: 32,
            train_distribution: DistributionName::Train(Support::ConnectedPlus),
            ood_distribution: None,
        }
    }
}

impl TaskConfig {
    pub fn teacher_dims(&self) -> TeacherDims {
        TeacherDims {
            modules: self.modules,
            input: self.input_dim,
            hidden: self.hidden_dim,
            output: self.output_dim,
        }
    }

    pub fn ood(&self) -> Result<DistributionName> {
        self.ood_distribution
            .or_else(|| self.train_distribution.ood_for())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no held-out distribution for {}; set task.ood_distribution",
                    self.train_distribution
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp length before the cosine decay starts.
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimConfig {
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.1,
            clip: 1.0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Steps between progress log lines.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 128,
            eval_interval: 2_000,
            log_interval: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per R² evaluation.
    pub episodes: usize,
    pub control: bool,
    pub probe: bool,
    pub probe_fit_episodes: usize,
    pub probe_eval_episodes: usize,
    /// Residual tap to probe; defaults to the last one.
    pub probe_layer: Option<usize>,
    pub probe_lambda: f64,
    /// Replaces the derived evaluation seed; never affects training.
    pub seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 2_000,
            control: true,
            probe: true,
            probe_fit_episodes: 2_000,
            probe_eval_episodes: 2_000,
            probe_layer: None,
            probe_lambda: 1.0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_kind(ModelKind::Vanilla)
    }
}

/// Seeds for every random stream of a run, all derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub master: u64,
    pub teacher: u64,
    pub init: u64,
    pub data: u64,
    pub eval: u64,
    pub control_teacher: u64,
}

impl RunConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let optim = match kind {
            ModelKind::Vanilla => OptimConfig::default(),
            ModelKind::Hyper => OptimConfig {
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        };
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::for_kind(kind),
            task: TaskConfig::default(),
            optim,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn seeds(&self) -> SeedSet {
        let m = self.seed;
        SeedSet {
            master: m,
            teacher: rng::derive_seed(m, "teacher"),
            init: rng::derive_seed(m, "init"),
            data: rng::derive_seed(m, "data"),
            eval: self.eval.seed.unwrap_or_else(|| rng::derive_seed(m, "eval")),
            control_teacher: rng::derive_seed(m, "control-teacher"),
        }
    }

    pub fn probe_layer(&self) -> usize {
        self.eval.probe_layer.unwrap_or(self.model.layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.task;
        if [t.modules, t.input_dim, t.hidden_dim, t.output_dim].contains(&0) {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        if t.output_dim != 1 {
            return Err(Error::Config(
                "only scalar labels (task.output_dim = 1) are supported".into(),
            ));
        }
        if self.model.input_dim != t.input_dim || self.model.output_dim != t.output_dim {
            return Err(Error::Config(format!(
                "model dims ({}, {}) disagree with task dims ({}, {})",
                self.model.input_dim, self.model.output_dim, t.input_dim, t.output_dim
            )));
        }
        if t.context_len < 2 {
            return Err(Error::Config("task.context_len must be at least 2".into()));
        }
        mask_set(t.train_distribution, t.modules).map_err(|e| Error::Config(e.to_string()))?;
        mask_set(t.ood()?, t.modules).map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.optim;
        if !positive(o.lr) || !(o.lr_min >= 0.0 && o.lr_min <= o.lr) {
            return Err(Error::Config(format!(
                "need 0 ≤ optim.lr_min ≤ optim.lr, 0 < optim.lr; got {} and {}",
                o.lr_min, o.lr
            )));
        }
        if !positive(o.clip) || o.weight_decay < 0.0 {
            return Err(Error::Config(
                "optim.clip must be positive and optim.weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !positive(o.eps) {
            return Err(Error::Config(
                "optim betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config(
                "train.steps and train.batch_size must be positive".into(),
            ));
        }
        if o.warmup_steps >= self.train.steps {
            return Err(Error::Config("optim.warmup_steps must be below train.steps".into()));
        }
        let e = &self.eval;
        if e.episodes == 0 || (e.probe && (e.probe_fit_episodes == 0 || e.probe_eval_episodes == 0)) {
            return Err(Error::Config("evaluation episode counts must be positive".into()));
        }
        if self.probe_layer() > self.model.layers {
            return Err(Error::Config(format!(
                "eval.probe_layer {} exceeds model.layers {}",
                self.probe_layer(),
                self.model.layers
            )));
        }
        if !positive(e.probe_lambda) {
            return Err(Error::Config("eval.probe_lambda must be positive".into()));
        }
        Ok(())
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`] to a relative path.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Builds a configuration from optional TOML text and `key=value` overrides.
    ///
    /// Defaults follow `model.kind`; `model.input_dim` and `model.output_dim`
    /// follow the task unless set explicitly.
    pub fn from_sources(toml_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = match toml_text {
            Some(text) => text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
            set_path(&mut user, key.trim(), parse_scalar(raw.trim()))?;
        }
        let kind = match lookup(&user, &["model", "kind"]) {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("model.kind must be a string, got {other}"))),
            None => ModelKind::Vanilla,
        };
        let mut merged = Value::try_from(RunConfig::for_kind(kind))
            .map_err(|e| Error::Config(e.to_string()))?
            .as_table()
            .cloned()
            .expect("config serialises to a table");
        if let Some(Value::Table(m)) = merged.get_mut("model") {
            m.remove("input_dim");
            m.remove("output_dim");
        }
        merge(&mut merged, user);
        let task = merged
            .get("task")
            .and_then(Value::as_table)
            .cloned()
            .unwrap_or_default();
        if let Some(Value::Table(m)) = merged.get_mut("model") {
            for (model_key, task_key, default) in [("input_dim", "input_dim", 16), ("output_dim", "output_dim", 1)] {
                if !m.contains_key(model_key) {
                    let v = task.get(task_key).cloned().unwrap_or(Value::Integer(default));
                    m.insert(model_key.into(), v);
                }
            }
        }
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_sources(Some(&text), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

/// False for NaN as well as for non-positive values.
fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn lookup<'a>(t: &'a toml::Table, path: &[&str]) -> Option<&'a Value> {
    let (last, head) = path.split_last()?;
    let mut cur = t;
    for key in head {
        cur = cur.get(*key)?.as_table()?;
    }
    cur.get(*last)
}

fn set_path(t: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, head) = parts.split_last().expect("split yields at least one part");
    let mut cur = t;
    for p in head {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
