//! Forward kernels shared by the tape and by tape-free callers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::{Error, Result};

/// Variance floor added inside the LayerNorm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of [`gelu_scalar`]: `Φ(x) + x·φ(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect()).expect("shape preserved")
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        a.data(),
        Layout::row_major(m, k),
        b.data(),
        Layout::row_major(k, n),
        0.0,
        &mut out,
        Layout::row_major(m, n),
    );
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let cols = last_dim(x, "softmax_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// LayerNorm over the last axis followed by an elementwise affine map.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_with_stats(x, gamma, beta)?.0)
}

/// LayerNorm that also returns per-row mean and reciprocal standard deviation.
pub(crate) fn layer_norm_with_stats(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = last_dim(x, "layer_norm")?;
    if d < 2 {
        return Err(Error::Contract(format!(
            "layer_norm needs at least 2 features, got shape {:?}",
            x.shape()
        )));
    }
    for p in [gamma, beta] {
        if p.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, (s, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
            *o = (s - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, means, rstds))
}

pub(crate) fn last_dim(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::Contract(format!(
            "{op}: needs a non-empty last axis, got {:?}",
            x.shape()
        ))),
    }
}
