//! The training loop and its artifacts: `metrics.csv`, `checkpoint.bin` and
//! `manifest.json` in the run's output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SeedSet};
use crate::eval::{fit_ridge_probe, latent_matrix, probe_r2, r2_score, MetricReport, ResidualSource, CSV_HEADER};
use crate::models::{save_checkpoint, CheckpointMeta, Model, INIT_SCHEME};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::taskgen::{
    init_teacher, mask_set, sample_batch, DistributionName, Episode, Split, TaskDistribution, TeacherParams,
};
use crate::{rng, Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTIC_CHECKPOINT_FILE: &str = "checkpoint-diverged.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub code_version: String,
    pub seeds: SeedSet,
    pub teacher_fingerprint: String,
    pub control_teacher_fingerprint: String,
    pub num_params: usize,
    pub init_scheme: String,
    pub output_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub steps_completed: usize,
    pub final_loss: f64,
    pub final_metrics: Vec<MetricReport>,
}

impl RunManifest {
    /// The last reported value of `metric` on `split`, if any and not degenerate.
    pub fn final_value(&self, split: Split, metric: &str) -> Option<f64> {
        self.final_metrics
            .iter()
            .rev()
            .find(|m| m.split == split && m.metric == metric)
            .and_then(|m| m.value)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Learning rate before update `step` (0-based): linear warmup, then cosine decay.
pub fn learning_rate(config: &RunConfig, step: usize) -> Result<f64> {
    let o = &config.optim;
    let total = config.train.steps;
    if o.warmup_steps > 0 && step < o.warmup_steps {
        return Ok(o.lr * (step + 1) as f64 / o.warmup_steps as f64);
    }
    cosine_lr(step - o.warmup_steps, total - o.warmup_steps, o.lr, o.lr_min)
}

/// Everything fixed for the lifetime of a run that evaluation needs.
pub struct EvalContext {
    pub teacher: TeacherParams,
    pub control_teacher: TeacherParams,
    pub train_dist: TaskDistribution,
    pub ood_dist: TaskDistribution,
    pub control_dist: TaskDistribution,
    id_set: Vec<Episode>,
    ood_set: Vec<Episode>,
    control_set: Vec<Episode>,
    probe_fit: Vec<Episode>,
    probe_eval: Vec<Episode>,
}

impl EvalContext {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let seeds = config.seeds();
        let dims = config.task.teacher_dims();
        let teacher = init_teacher(seeds.teacher, dims)?;
        let control_teacher = init_teacher(seeds.control_teacher, dims)?;
        let m = config.task.modules;
        let train_dist = mask_set(config.task.train_distribution, m)?;
        let ood_dist = mask_set(config.task.ood()?, m)?;
        let control_dist = mask_set(DistributionName::Control, m)?;
        let (n, e) = (config.task.context_len, &config.eval);
        let sub = |name: &str| rng::derive_seed(seeds.eval, name);
        let id_set = sample_batch(&teacher, &train_dist, n, sub("in-distribution"), e.episodes)?;
        let ood_set = sample_batch(&teacher, &ood_dist, n, sub("ood"), e.episodes)?;
        let control_set = if e.control {
            sample_batch(&control_teacher, &control_dist, n, sub("control"), e.episodes)?
        } else {
            Vec::new()
        };
        let (probe_fit, probe_eval) = if e.probe {
            (
                sample_batch(&teacher, &train_dist, n, sub("probe-fit"), e.probe_fit_episodes)?,
                sample_batch(&teacher, &ood_dist, n, sub("probe-eval"), e.probe_eval_episodes)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(EvalContext {
            teacher,
            control_teacher,
            train_dist,
            ood_dist,
            control_dist,
            id_set,
            ood_set,
            control_set,
            probe_fit,
            probe_eval,
        })
    }

    /// R², the literal normalised MSE, and probe scores at `step`.
    pub fn evaluate(&self, model: &Model, config: &RunConfig, step: u64) -> Result<Vec<MetricReport>> {
        let seeds = config.seeds();
        let mut out = Vec::new();
        for (split, set) in [
            (Split::InDistribution, &self.id_set),
            (Split::Ood, &self.ood_set),
            (Split::Control, &self.control_set),
        ] {
            if set.is_empty() {
                continue;
            }
            let score = r2_score(&model.predict(set)?, set)?;
            let row = |metric: &str, value| MetricReport {
                step,
                split,
                metric: metric.into(),
                value,
                n: set.len(),
                seed: seeds.eval,
            };
            out.push(row("r2", score.value));
            out.push(row("normalized_mse", score.ratio()));
        }
        if !self.probe_fit.is_empty() {
            let (fit_r2, eval_r2) = probe_source(
                model,
                &self.probe_fit,
                &self.probe_eval,
                config.probe_layer(),
                config.eval.probe_lambda,
            )?;
            for (split, value, n) in [
                (Split::InDistribution, fit_r2, self.probe_fit.len()),
                (Split::Ood, eval_r2, self.probe_eval.len()),
            ] {
                out.push(MetricReport {
                    step,
                    split,
                    metric: "probe_r2".into(),
                    value,
                    n,
                    seed: seeds.eval,
                });
            }
        }
        Ok(out)
    }
}

/// Probes any residual source with the run's fit and evaluation sets.
pub fn probe_source<S: ResidualSource + ?Sized>(
    source: &S,
    fit: &[Episode],
    eval: &[Episode],
    layer: usize,
    lambda: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    let xf = source.query_residuals(fit, layer)?;
    let zf = latent_matrix(fit)?;
    let probe = fit_ridge_probe(&xf, &zf, lambda, true)?;
    let xe = source.query_residuals(eval, layer)?;
    let ze = latent_matrix(eval)?;
    Ok((probe_r2(&probe, &xf, &zf)?, probe_r2(&probe, &xe, &ze)?))
}

struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            path,
        };
        w.line(CSV_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn row(&mut self, m: &MetricReport) -> Result<()> {
        self.line(&m.csv_row())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn checkpoint_meta(config: &RunConfig, step: usize) -> CheckpointMeta {
    CheckpointMeta {
        model: config.model.clone(),
        seed: config.seed,
        step: step as u64,
        run: serde_json::to_value(config).expect("config serialises"),
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains one model online and writes its artifacts under `out_dir`.
pub fn run_training_in(config: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    let started_at = unix_now();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let seeds = config.seeds();
    let ctx = EvalContext::new(config)?;
    let mut model = Model::new(config.model.clone(), seeds.init)?;
    let mut opt = AdamW::new(config.optim.adamw(), model.params().tensors());
    let mut metrics = MetricsWriter::create(out_dir.join(METRICS_FILE))?;
    log::info!(
        "training {} ({} parameters) for {} steps into {}",
        config.model.kind,
        model.num_params(),
        config.train.steps,
        out_dir.display()
    );

    let (batch, n) = (config.train.batch_size, config.task.context_len);
    let mut final_loss = f64::NAN;
    let mut final_metrics = Vec::new();
    for step in 1..=config.train.steps {
        let batch_seed = rng::derive_indexed(seeds.data, step as u64);
        let episodes = sample_batch(&ctx.teacher, &ctx.train_dist, n, batch_seed, batch)?;
        let (loss, mut grads) = model.loss_and_grads(&episodes)?;
        let grad_norm = if loss.is_finite() {
            clip_grad_norm(&mut grads, config.optim.clip)
        } else {
            f64::NAN
        };
        if !grad_norm.is_finite() {
            metrics.flush()?;
            let path = out_dir.join(DIAGNOSTIC_CHECKPOINT_FILE);
            save_checkpoint(&path, &model, &checkpoint_meta(config, step - 1))?;
            log::error!(
                "non-finite loss or gradient at step {step}; parameters saved to {}",
                path.display()
            );
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let lr = learning_rate(config, step - 1)?;
        opt.step(model.params_mut().tensors_mut(), &grads, lr, config.optim.weight_decay)?;
        final_loss = loss;
        metrics.row(&MetricReport {
            step: step as u64,
            split: Split::InDistribution,
            metric: "loss".into(),
            value: Some(loss),
            n: batch,
            seed: seeds.master,
        })?;
        if config.train.log_interval > 0 && step % config.train.log_interval == 0 {
            log::info!("step {step}: loss {loss:.6}, grad norm {grad_norm:.4}, lr {lr:.3e}");
        }
        let interval = config.train.eval_interval;
        if step == config.train.steps || (interval > 0 && step % interval == 0) {
            let reports = ctx.evaluate(&model, config, step as u64)?;
            for r in &reports {
                metrics.row(r)?;
                log::info!("step {step}: {} {} = {:?}", r.split, r.metric, r.value);
            }
            metrics.flush()?;
            save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &model, &checkpoint_meta(config, step))?;
            final_metrics = reports;
        }
    }
    metrics.flush()?;

    let manifest = RunManifest {
        config: config.clone(),
        code_version: CODE_VERSION.into(),
        seeds,
        teacher_fingerprint: ctx.teacher.fingerprint(),
        control_teacher_fingerprint: ctx.control_teacher.fingerprint(),
        num_params: model.num_params(),
        init_scheme: INIT_SCHEME.into(),
        output_dir: out_dir.to_path_buf(),
        started_at,
        finished_at: unix_now(),
        steps_completed: config.train.steps,
        final_loss,
        final_metrics,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// [`run_training_in`] with the configured (environment-resolved) output directory.
pub fn run_training(config: &RunConfig) -> Result<RunManifest> {
    run_training_in(config, &config.resolved_output_dir())
}
