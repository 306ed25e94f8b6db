//! Masks and task latents.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Binary vector selecting which modules a task composes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mask(Vec<u8>);

impl Mask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidInput(format!("mask entries must be 0 or 1: {bits:?}")));
        }
        Ok(Mask(bits))
    }

    /// The mask with ones at `positions`.
    pub fn hot(len: usize, positions: &[usize]) -> Self {
        let mut bits = vec![0; len];
        for &p in positions {
            bits[p] = 1;
        }
        Mask(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of active modules, `|m|₁`.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }
}

/// Mixing coefficients `z` over the teacher modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLatent(pub Vec<f64>);

impl TaskLatent {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws a latent on the masked simplex, shifted onto `[0.5, 1]`.
///
/// Exponential draws restricted to the mask and normalised to unit sum are
/// uniform on the simplex spanned by the active modules; adding the mask and
/// halving keeps latents from different masks apart.
pub fn sample_latent<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> Result<TaskLatent> {
    if mask.count() == 0 {
        return Err(Error::InvalidMask(mask.bits().to_vec()));
    }
    let draws: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| if b == 1 { rng.sample::<f64, _>(Exp1) } else { 0.0 })
        .collect();
    let total: f64 = draws.iter().sum();
    Ok(TaskLatent(
        draws
            .iter()
            .zip(mask.bits())
            .map(|(&e, &b)| 0.5 * (e / total + f64::from(b)))
            .collect(),
    ))
}
