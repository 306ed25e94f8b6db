use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Linear map from activations to latents.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeProbe {
    /// `features × targets`
    pub weights: Tensor,
    pub intercept: Vec<f64>,
    pub lambda: f64,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contain non-finite values")))
    }
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let (n, c) = t.dims2().expect("2-D");
    let mut m = vec![0.0; c];
    for i in 0..n {
        for (a, b) in m.iter_mut().zip(t.row(i)) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

fn centred(t: &Tensor, means: &[f64]) -> Tensor {
    let c = means.len();
    Tensor::from_fn(t.shape(), |i| t.data()[i] - means[i % c])
}

/// `aᵀ b` for row-major `n × p` and `n × q`.
fn gram(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p) = a.dims2().expect("2-D");
    let q = b.shape()[1];
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let (ra, rb) = (a.row(i), b.row(i));
        for (j, &x) in ra.iter().enumerate() {
            if x != 0.0 {
                let row = &mut out[j * q..(j + 1) * q];
                for (o, &y) in row.iter_mut().zip(rb) {
                    *o += x * y;
                }
            }
        }
    }
    Tensor::new(vec![p, q], out).expect("shape matches")
}

/// Solves `A X = B` for symmetric positive definite `A` via an `L D Lᵀ` factorisation.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2()?;
    let (bn, q) = b.dims2()?;
    if n != n2 || bn != n {
        return Err(Error::Dimension {
            op: "solve_spd",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    // Unit lower-triangular L stored below the diagonal, D on it.
    let mut l = vec![0.0; n * n];
    let mut diag = vec![0.0; n];
    for j in 0..n {
        let mut dj = a.data()[j * n + j];
        for k in 0..j {
            dj -= l[j * n + k] * l[j * n + k] * diag[k];
        }
        if dj <= 0.0 || !dj.is_finite() {
            return Err(Error::InvalidInput("matrix is not positive definite".into()));
        }
        diag[j] = dj;
        for i in j + 1..n {
            let mut s = a.data()[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k] * diag[k];
            }
            l[i * n + j] = s / dj;
        }
    }
    let mut x = b.data().to_vec();
    for c in 0..q {
        for i in 0..n {
            let mut s = x[i * q + c];
            for k in 0..i {
                s -= l[i * n + k] * x[k * q + c];
            }
            x[i * q + c] = s;
        }
        for i in 0..n {
            x[i * q + c] /= diag[i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * q + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * q + c];
            }
            x[i * q + c] = s;
        }
    }
    Tensor::new(vec![n, q], x)
}

/// Closed-form ridge regression `W = (XᵀX + λI)⁻¹ XᵀZ`.
///
/// With `centre` the columns of both matrices are mean-centred first and the
/// intercept restores the means; otherwise the intercept is zero.
pub fn fit_ridge_probe(x: &Tensor, z: &Tensor, lambda: f64, centre: bool) -> Result<RidgeProbe> {
    let (n, p) = x.dims2()?;
    let (nz, q) = z.dims2()?;
    if n != nz {
        return Err(Error::Dimension {
            op: "fit_ridge_probe",
            lhs: x.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput("ridge probe needs at least one sample".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "ridge strength must be positive, got {lambda}"
        )));
    }
    check_finite(x, "activations")?;
    check_finite(z, "latents")?;
    let (xm, zm) = if centre {
        (column_means(x), column_means(z))
    } else {
        (vec![0.0; p], vec![0.0; q])
    };
    let (xc, zc) = (centred(x, &xm), centred(z, &zm));
    let mut a = gram(&xc, &xc);
    for i in 0..p {
        a.data_mut()[i * p + i] += lambda;
    }
    let weights = solve_spd(&a, &gram(&xc, &zc))?;
    let intercept = (0..q)
        .map(|k| zm[k] - (0..p).map(|j| xm[j] * weights.at(&[j, k])).sum::<f64>())
        .collect();
    Ok(RidgeProbe {
        weights,
        intercept,
        lambda,
    })
}

impl RidgeProbe {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (n, p) = x.dims2()?;
        let (wp, q) = self.weights.dims2()?;
        if p != wp {
            return Err(Error::Dimension {
                op: "probe predict",
                lhs: self.weights.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let mut out = crate::autodiff::ops::matmul(x, &self.weights)?;
        for i in 0..n {
            for k in 0..q {
                out.data_mut()[i * q + k] += self.intercept[k];
            }
        }
        Ok(out)
    }
}

/// Multi-output `1 − Σ‖ẑ − z‖² / Σ‖z − z̄‖²`, with `z̄` the mean of the evaluation latents.
pub fn probe_r2(probe: &RidgeProbe, x: &Tensor, z: &Tensor) -> Result<Option<f64>> {
    check_finite(x, "activations")?;
    check_finite(z, "latents")?;
    let pred = probe.predict(x)?;
    if pred.shape() != z.shape() {
        return Err(Error::Dimension {
            op: "probe_r2",
            lhs: pred.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let means = column_means(z);
    let q = means.len();
    let num: f64 = pred.data().iter().zip(z.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - means[i % q]).powi(2))
        .sum();
    Ok((den > 0.0).then(|| 1.0 - num / den))
}
