//! Scores: the normalised query error reported as R², linear latent probes of
//! the residual stream, and evaluation drivers for trained or hand-built models.

mod r2;
mod report;
mod ridge;

pub use r2::{r2_score, r2_score_per_episode, R2Score};
pub use report::{parse_metrics_csv, read_metrics_csv, MetricReport, CSV_HEADER, DEGENERATE};
pub use ridge::{fit_ridge_probe, probe_r2, solve_spd, RidgeProbe};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::construction::ConstructedModel;
use crate::models::Model;
use crate::taskgen::{sample_batch, task_weights, teacher_label, Episode, Split, TaskDistribution, TeacherParams};
use crate::{Error, Result};

/// Ridge strength used for latent probes.
pub const PROBE_LAMBDA: f64 = 1.0;

/// Anything that predicts query labels.
pub trait Predictor {
    fn predict(&self, episodes: &[Episode]) -> Result<Vec<f64>>;
}

/// Anything with a residual stream to probe.
pub trait ResidualSource {
    /// One row per episode: the query token's activations after block `layer`.
    fn query_residuals(&self, episodes: &[Episode], layer: usize) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        Model::predict(self, episodes)
    }
}

impl ResidualSource for Model {
    fn query_residuals(&self, episodes: &[Episode], layer: usize) -> Result<Tensor> {
        Model::query_residuals(self, episodes, layer)
    }
}

impl ResidualSource for ConstructedModel {
    fn query_residuals(&self, episodes: &[Episode], layer: usize) -> Result<Tensor> {
        let width = self.layout.d_model();
        let mut data = Vec::with_capacity(episodes.len() * width);
        for ep in episodes {
            data.extend(self.residual_stream(ep, layer)?);
        }
        Tensor::new(vec![episodes.len(), width], data)
    }
}

/// Predicts with the generating teacher itself, using each episode's true latent.
pub struct TeacherOracle<'a>(pub &'a TeacherParams);

impl Predictor for TeacherOracle<'_> {
    fn predict(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        episodes
            .iter()
            .map(|ep| teacher_label(&task_weights(self.0, &ep.latent)?, &self.0.readout, ep.query()))
            .collect()
    }
}

impl<F: Fn(&[Episode]) -> Result<Vec<f64>>> Predictor for F {
    fn predict(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        self(episodes)
    }
}

/// Pooled R² of `model` on `count` fresh episodes of `dist`; deterministic in `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<P: Predictor + ?Sized>(
    model: &P,
    teacher: &TeacherParams,
    dist: &TaskDistribution,
    context_len: usize,
    count: usize,
    seed: u64,
    step: u64,
) -> Result<MetricReport> {
    if count == 0 {
        return Err(Error::InvalidInput("evaluation needs at least one episode".into()));
    }
    let episodes = sample_batch(teacher, dist, context_len, seed, count)?;
    let preds = model.predict(&episodes)?;
    let score = r2_score(&preds, &episodes)?;
    Ok(MetricReport {
        step,
        split: Split::of(dist.name),
        metric: "r2".into(),
        value: score.value,
        n: count,
        seed,
    })
}

/// Latents stacked into an `n × M` matrix, one row per episode.
pub fn latent_matrix(episodes: &[Episode]) -> Result<Tensor> {
    let m = episodes.first().map_or(0, |e| e.latent.len());
    let data = episodes
        .iter()
        .flat_map(|e| e.latent.as_slice().iter().copied())
        .collect();
    Tensor::new(vec![episodes.len(), m], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub lambda: f64,
    pub fit_n: usize,
    pub eval_n: usize,
    /// In-sample score on the fitting episodes.
    pub fit_r2: Option<f64>,
    /// Score on the held-out distribution.
    pub eval_r2: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeSetup {
    pub layer: usize,
    pub lambda: f64,
    pub fit_n: usize,
    pub eval_n: usize,
    pub context_len: usize,
    pub fit_seed: u64,
    pub eval_seed: u64,
}

/// Fits a centred ridge probe from residual activations to latents on `fit_dist`
/// episodes and scores it on `eval_dist` episodes.
pub fn probe_latents<S: ResidualSource + ?Sized>(
    source: &S,
    teacher: &TeacherParams,
    fit_dist: &TaskDistribution,
    eval_dist: &TaskDistribution,
    setup: ProbeSetup,
) -> Result<ProbeReport> {
    if setup.fit_n == 0 || setup.eval_n == 0 {
        return Err(Error::InvalidInput(
            "probe needs episodes to fit and evaluate on".into(),
        ));
    }
    let fit = sample_batch(teacher, fit_dist, setup.context_len, setup.fit_seed, setup.fit_n)?;
    let eval = sample_batch(teacher, eval_dist, setup.context_len, setup.eval_seed, setup.eval_n)?;
    let (xf, zf) = (source.query_residuals(&fit, setup.layer)?, latent_matrix(&fit)?);
    let probe = fit_ridge_probe(&xf, &zf, setup.lambda, true)?;
    let (xe, ze) = (source.query_residuals(&eval, setup.layer)?, latent_matrix(&eval)?);
    Ok(ProbeReport {
        layer: setup.layer,
        lambda: setup.lambda,
        fit_n: setup.fit_n,
        eval_n: setup.eval_n,
        fit_r2: probe_r2(&probe, &xf, &zf)?,
        eval_r2: probe_r2(&probe, &xe, &ze)?,
    })
}
