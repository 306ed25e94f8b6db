//! Drivers built on top of training: the connectivity comparison and
//! evaluations of saved checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{probe_source, run_training_in, write_json, RunManifest};
use crate::construction::ConstructedModel;
use crate::eval::{evaluate_model, MetricReport, ProbeReport};
use crate::models::{load_checkpoint, Model};
use crate::taskgen::dataset::{Dataset, DatasetHeader};
use crate::taskgen::{init_teacher, mask_set, sample_batch, DistributionName, Split, Support};
use crate::{rng, Error, Result};

pub const CONNECTIVITY_FILE: &str = "connectivity.json";

/// Probe episode counts used when none are given.
pub const PROBE_EPISODES: usize = 16_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub connected: RunManifest,
    pub disconnected: RunManifest,
    pub connected_ood_r2: Option<f64>,
    pub disconnected_ood_r2: Option<f64>,
    /// Connected minus disconnected held-out R².
    pub delta_ood_r2: Option<f64>,
}

/// Trains the same model and seed on the connected and disconnected supports,
/// each scored on its own held-out two-hot masks.
pub fn run_connectivity_experiment(base: &RunConfig, out_dir: &Path) -> Result<ConnectivityReport> {
    let mut runs = Vec::with_capacity(2);
    for support in [Support::Connected, Support::Disconnected] {
        let mut cfg = base.clone();
        cfg.task.train_distribution = DistributionName::Train(support);
        cfg.task.ood_distribution = None;
        let dir = out_dir.join(support.to_string());
        cfg.output_dir = dir.clone();
        runs.push(run_training_in(&cfg, &dir)?);
    }
    let disconnected = runs.pop().expect("two runs");
    let connected = runs.pop().expect("two runs");
    let c = connected.final_value(Split::Ood, "r2");
    let d = disconnected.final_value(Split::Ood, "r2");
    let report = ConnectivityReport {
        delta_ood_r2: c.zip(d).map(|(c, d)| c - d),
        connected_ood_r2: c,
        disconnected_ood_r2: d,
        connected,
        disconnected,
    };
    write_json(&out_dir.join(CONNECTIVITY_FILE), &report)?;
    Ok(report)
}

/// A trained model with the run configuration stored next to its parameters.
pub fn load_run(checkpoint: &Path) -> Result<(Model, RunConfig)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let config: RunConfig = serde_json::from_value(meta.run).map_err(|e| Error::Format {
        path: checkpoint.into(),
        reason: format!("checkpoint carries no usable run configuration: {e}"),
    })?;
    if config.model != *model.config() {
        return Err(Error::Format {
            path: checkpoint.into(),
            reason: "run configuration disagrees with the stored model".into(),
        });
    }
    Ok((model, config))
}

/// R² of a checkpoint on `n` episodes of `distribution` under the run's teacher.
pub fn run_evaluation(checkpoint: &Path, distribution: DistributionName, n: usize, seed: u64) -> Result<MetricReport> {
    let (model, config) = load_run(checkpoint)?;
    let dims = config.task.teacher_dims();
    let seeds = config.seeds();
    let teacher_seed = match distribution {
        DistributionName::Control => seeds.control_teacher,
        _ => seeds.teacher,
    };
    let teacher = init_teacher(teacher_seed, dims)?;
    let dist = mask_set(distribution, dims.modules)?;
    evaluate_model(&model, &teacher, &dist, config.task.context_len, n, seed, 0)
}

/// R² on episodes of a teacher freshly drawn from `control_seed`.
pub fn run_control_eval(checkpoint: &Path, control_seed: u64, n: usize) -> Result<MetricReport> {
    let (model, config) = load_run(checkpoint)?;
    let dims = config.task.teacher_dims();
    let teacher = init_teacher(control_seed, dims)?;
    let dist = mask_set(DistributionName::Control, dims.modules)?;
    let episode_seed = rng::derive_seed(control_seed, "control-episodes");
    evaluate_model(&model, &teacher, &dist, config.task.context_len, n, episode_seed, 0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub fit_n: usize,
    pub eval_n: usize,
    /// Defaults to the run's probe layer.
    pub layer: Option<usize>,
    pub lambda: f64,
    /// Defaults to the run's evaluation seed.
    pub seed: Option<u64>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            fit_n: PROBE_EPISODES,
            eval_n: PROBE_EPISODES,
            layer: None,
            lambda: 1.0,
            seed: None,
        }
    }
}

/// Fits a ridge probe on in-distribution residuals and scores it on held-out tasks.
pub fn run_probe_eval(checkpoint: &Path, options: ProbeOptions) -> Result<ProbeReport> {
    let (model, config) = load_run(checkpoint)?;
    let layer = options.layer.unwrap_or_else(|| config.probe_layer());
    probe_with_run_teacher(&model, &config, layer, options)
}

/// The same probe applied to the hand-built block for the run's teacher.
/// Layer 0 is the embedding, where the latent sits verbatim in its slice.
pub fn run_construction_probe(config: &RunConfig, layer: usize, options: ProbeOptions) -> Result<ProbeReport> {
    let teacher = init_teacher(config.seeds().teacher, config.task.teacher_dims())?;
    let constructed = ConstructedModel::from_teacher(&teacher)?;
    probe_with_run_teacher(&constructed, config, layer, options)
}

fn probe_with_run_teacher<S: crate::eval::ResidualSource + ?Sized>(
    source: &S,
    config: &RunConfig,
    layer: usize,
    options: ProbeOptions,
) -> Result<ProbeReport> {
    if options.fit_n == 0 || options.eval_n == 0 {
        return Err(Error::InvalidInput(
            "probe needs episodes to fit and evaluate on".into(),
        ));
    }
    let teacher = init_teacher(config.seeds().teacher, config.task.teacher_dims())?;
    let m = config.task.modules;
    let fit_dist = mask_set(config.task.train_distribution, m)?;
    let eval_dist = mask_set(config.task.ood()?, m)?;
    let seed = options.seed.unwrap_or(config.seeds().eval);
    let n = config.task.context_len;
    let fit = sample_batch(
        &teacher,
        &fit_dist,
        n,
        rng::derive_seed(seed, "probe-fit"),
        options.fit_n,
    )?;
    let eval = sample_batch(
        &teacher,
        &eval_dist,
        n,
        rng::derive_seed(seed, "probe-eval"),
        options.eval_n,
    )?;
    let (fit_r2, eval_r2) = probe_source(source, &fit, &eval, layer, options.lambda)?;
    Ok(ProbeReport {
        layer,
        lambda: options.lambda,
        fit_n: options.fit_n,
        eval_n: options.eval_n,
        fit_r2,
        eval_r2,
    })
}

/// `count` episodes of `distribution` under the run's teacher, for export.
pub fn generate_dataset(
    config: &RunConfig,
    distribution: DistributionName,
    count: usize,
    data_seed: u64,
) -> Result<Dataset> {
    let seeds = config.seeds();
    let teacher_seed = match distribution {
        DistributionName::Control => seeds.control_teacher,
        _ => seeds.teacher,
    };
    let t = &config.task;
    let teacher = init_teacher(teacher_seed, t.teacher_dims())?;
    let dist = mask_set(distribution, t.modules)?;
    let episodes = sample_batch(&teacher, &dist, t.context_len, data_seed, count)?;
    Ok(Dataset {
        header: DatasetHeader {
            modules: t.modules,
            input_dim: t.input_dim,
            hidden_dim: t.hidden_dim,
            output_dim: t.output_dim,
            context_len: t.context_len,
            distribution,
            teacher_seed,
            data_seed,
            episodes: count,
        },
        episodes,
    })
}
