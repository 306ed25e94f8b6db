//! The frozen teacher hypernetwork.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::latent::TaskLatent;
use super::linalg::opnorm;
use crate::autodiff::ops::gelu_scalar;
use crate::autodiff::Tensor;
use crate::{rng, Error, Result};

/// Truncation point of the initialisation distribution, in standard deviations.
pub const TRUNCATION: f64 = 2.0;

/// Below this operator norm a module combination counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherDims {
    /// Number of modules `M`.
    pub modules: usize,
    /// Input dimension `d`.
    pub input: usize,
    /// Hidden width `h` of the task network.
    pub hidden: usize,
    /// Output dimension `o`.
    pub output: usize,
}

impl Default for TeacherDims {
    fn default() -> Self {
        TeacherDims {
            modules: 6,
            input: 16,
            hidden: 16,
            output: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams {
    pub dims: TeacherDims,
    /// One `h × d` matrix per module.
    pub modules: Vec<Tensor>,
    /// `o × h` readout.
    pub readout: Tensor,
}

/// Samples a centred normal truncated at ±2σ, by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= TRUNCATION {
            return v * std;
        }
    }
}

/// Draws teacher modules with std `1/√M` and the readout with std `1/√h`.
pub fn init_teacher(seed: u64, dims: TeacherDims) -> Result<TeacherParams> {
    let TeacherDims {
        modules,
        input,
        hidden,
        output,
    } = dims;
    if modules == 0 || input == 0 || hidden == 0 || output == 0 {
        return Err(Error::InvalidInput(format!(
            "teacher dimensions must be positive: {dims:?}"
        )));
    }
    let mut r = rng::rng(seed);
    let module_std = 1.0 / (modules as f64).sqrt();
    let readout_std = 1.0 / (hidden as f64).sqrt();
    let modules = (0..modules)
        .map(|_| Tensor::from_fn(&[hidden, input], |_| truncated_normal(&mut r, module_std)))
        .collect();
    let readout = Tensor::from_fn(&[output, hidden], |_| truncated_normal(&mut r, readout_std));
    Ok(TeacherParams { dims, modules, readout })
}

impl TeacherParams {
    /// Unnormalised combination `Σ_m z_m θ_m`.
    pub fn combine(&self, z: &TaskLatent) -> Result<Tensor> {
        if z.len() != self.dims.modules {
            return Err(Error::Dimension {
                op: "combine",
                lhs: vec![self.dims.modules],
                rhs: vec![z.len()],
            });
        }
        let mut w = Tensor::zeros(&[self.dims.hidden, self.dims.input]);
        for (&zm, theta) in z.as_slice().iter().zip(&self.modules) {
            if zm != 0.0 {
                for (o, t) in w.data_mut().iter_mut().zip(theta.data()) {
                    *o += zm * t;
                }
            }
        }
        Ok(w)
    }

    /// SHA-256 over dimensions and parameter bits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.dims.modules, self.dims.input, self.dims.hidden, self.dims.output] {
            h.update((d as u64).to_le_bytes());
        }
        for t in self.modules.iter().chain(std::iter::once(&self.readout)) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Task weights `W(z)` rescaled to unit operator norm.
pub fn task_weights(teacher: &TeacherParams, z: &TaskLatent) -> Result<Tensor> {
    let mut w = teacher.combine(z)?;
    let norm = opnorm(&w)?;
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateTask(norm));
    }
    w.data_mut().iter_mut().for_each(|v| *v /= norm);
    Ok(w)
}

/// `readout · gelu(W x)`, one value per output unit.
pub fn teacher_forward(weights: &Tensor, readout: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (h, d) = weights.dims2()?;
    let (o, h2) = readout.dims2()?;
    if h != h2 || d != x.len() {
        return Err(Error::Dimension {
            op: "teacher_forward",
            lhs: weights.shape().to_vec(),
            rhs: vec![o, h2, x.len()],
        });
    }
    let hidden: Vec<f64> = (0..h)
        .map(|i| gelu_scalar(weights.row(i).iter().zip(x).map(|(a, b)| a * b).sum()))
        .collect();
    Ok((0..o)
        .map(|k| readout.row(k).iter().zip(&hidden).map(|(a, b)| a * b).sum())
        .collect())
}

/// Scalar-output convenience wrapper around [`teacher_forward`].
pub fn teacher_label(weights: &Tensor, readout: &Tensor, x: &[f64]) -> Result<f64> {
    match teacher_forward(weights, readout, x)?[..] {
        [y] => Ok(y),
        ref ys => Err(Error::Contract(format!(
            "scalar label needs a single output unit, teacher has {}",
            ys.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::linalg::opnorm;

    #[test]
    fn default_configuration_shapes_and_bounds() {
        let t = init_teacher(0, TeacherDims::default()).unwrap();
        assert_eq!(t.modules.len(), 6);
        assert!(t.modules.iter().all(|m| m.shape() == [16, 16]));
        assert_eq!(t.readout.shape(), &[1, 16]);
        let bound = 2.0 / 6f64.sqrt();
        assert!(t.modules.iter().all(|m| m.data().iter().all(|v| v.abs() <= bound)));
        assert!(t.readout.data().iter().all(|v| v.abs() <= 2.0 / 4.0));
    }

    #[test]
    fn same_seed_same_teacher() {
        let dims = TeacherDims::default();
        assert_eq!(init_teacher(5, dims).unwrap(), init_teacher(5, dims).unwrap());
        assert_ne!(init_teacher(5, dims).unwrap(), init_teacher(6, dims).unwrap());
        assert_eq!(
            init_teacher(5, dims).unwrap().fingerprint(),
            init_teacher(5, dims).unwrap().fingerprint()
        );
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let dims = TeacherDims {
            hidden: 0,
            ..TeacherDims::default()
        };
        assert!(init_teacher(0, dims).is_err());
    }

    #[test]
    fn one_hot_weights_are_the_normalised_module() {
        let t = init_teacher(1, TeacherDims::default()).unwrap();
        let z = TaskLatent(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let w = task_weights(&t, &z).unwrap();
        let n = opnorm(&t.modules[2]).unwrap();
        for (a, b) in w.data().iter().zip(t.modules[2].data()) {
            assert!((a - b / n).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_are_scale_invariant_and_unit_norm() {
        let t = init_teacher(2, TeacherDims::default()).unwrap();
        let z = TaskLatent(vec![0.6, 0.0, 0.9, 0.0, 0.0, 0.0]);
        let z2 = TaskLatent(z.0.iter().map(|v| 2.0 * v).collect());
        let w = task_weights(&t, &z).unwrap();
        let w2 = task_weights(&t, &z2).unwrap();
        assert!(w.max_abs_diff(&w2) < 1e-14);
        assert!((opnorm(&w).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_latent_is_degenerate() {
        let t = init_teacher(2, TeacherDims::default()).unwrap();
        assert!(matches!(
            task_weights(&t, &TaskLatent(vec![0.0; 6])),
            Err(Error::DegenerateTask(_))
        ));
    }

    #[test]
    fn forward_zero_cases() {
        let t = init_teacher(3, TeacherDims::default()).unwrap();
        let w = task_weights(&t, &TaskLatent(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(teacher_label(&w, &t.readout, &[0.0; 16]).unwrap(), 0.0);
        let x: Vec<f64> = (0..16).map(|i| i as f64 / 10.0 - 0.7).collect();
        assert_eq!(teacher_label(&w, &Tensor::zeros(&[1, 16]), &x).unwrap(), 0.0);
        assert!(teacher_forward(&w, &t.readout, &x[..3]).is_err());
    }
}
