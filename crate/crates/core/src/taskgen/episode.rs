//! Episodes: one task's demonstration pairs plus a query.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::latent::{sample_latent, Mask, TaskLatent};
use super::masks::{mask_set, DistributionName, TaskDistribution};
use super::teacher::{task_weights, teacher_label, TeacherParams};
use crate::autodiff::Tensor;
use crate::{rng, Error, Result};

/// Half-width of the input box; `U(−√3, √3)` has unit variance.
pub const INPUT_BOUND: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    InDistribution,
    Ood,
    Control,
}

impl Split {
    pub fn of(name: DistributionName) -> Split {
        match name {
            DistributionName::Train(_) => Split::InDistribution,
            DistributionName::Ood(_) => Split::Ood,
            DistributionName::Control => Split::Control,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::InDistribution => "in-distribution",
            Split::Ood => "ood",
            Split::Control => "control",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-distribution" | "id" | "train" => Ok(Split::InDistribution),
            "ood" => Ok(Split::Ood),
            "control" => Ok(Split::Control),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `N × d`; the last row is the query input.
    pub inputs: Tensor,
    /// `N` labels; the last one is the held-out query label.
    pub labels: Vec<f64>,
    pub latent: TaskLatent,
    pub mask: Mask,
    pub split: Split,
}

impl Episode {
    /// Total number of tokens `N`, query included.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn query(&self) -> &[f64] {
        self.inputs.row(self.len() - 1)
    }

    pub fn query_label(&self) -> f64 {
        self.labels[self.len() - 1]
    }

    pub fn context_labels(&self) -> &[f64] {
        &self.labels[..self.len() - 1]
    }
}

/// Draws a mask uniformly from `dist`, a latent for it, and `n` labelled inputs.
pub fn sample_episode<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    teacher: &TeacherParams,
    dist: &TaskDistribution,
    n: usize,
    x_rng: &mut R1,
    z_rng: &mut R2,
) -> Result<Episode> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "an episode needs at least 2 tokens, got {n}"
        )));
    }
    if dist.masks.is_empty() {
        return Err(Error::InvalidInput(format!("distribution {} has no masks", dist.name)));
    }
    let mask = dist.masks[z_rng.gen_range(0..dist.masks.len())].clone();
    let latent = sample_latent(&mask, z_rng)?;
    let weights = task_weights(teacher, &latent)?;
    let d = teacher.dims.input;
    let uniform = Uniform::new_inclusive(-INPUT_BOUND, INPUT_BOUND);
    let inputs = Tensor::from_fn(&[n, d], |_| uniform.sample(x_rng));
    let labels = (0..n)
        .map(|i| teacher_label(&weights, &teacher.readout, inputs.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        inputs,
        labels,
        latent,
        mask,
        split: Split::of(dist.name),
    })
}

/// An episode over a separately seeded teacher, with a uniformly drawn two-hot mask.
pub fn control_episode<R: Rng + ?Sized>(control_teacher: &TeacherParams, n: usize, rng: &mut R) -> Result<Episode> {
    let dist = mask_set(DistributionName::Control, control_teacher.dims.modules)?;
    let mut x_rng = rng::rng(rng.gen());
    sample_episode(control_teacher, &dist, n, &mut x_rng, rng)
}

/// Episode `index` of the family identified by `seed`; independent of sampling order.
pub fn indexed_episode(
    teacher: &TeacherParams,
    dist: &TaskDistribution,
    n: usize,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    let (mut x_rng, mut z_rng) = rng::episode_rngs(seed, index);
    sample_episode(teacher, dist, n, &mut x_rng, &mut z_rng)
}

/// `count` episodes with per-episode streams derived from `seed`.
pub fn sample_batch(
    teacher: &TeacherParams,
    dist: &TaskDistribution,
    n: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| indexed_episode(teacher, dist, n, seed, i))
        .collect()
}
