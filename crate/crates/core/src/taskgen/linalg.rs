//! Operator norm by power iteration.

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const OPNORM_TOL: f64 = 1e-10;
pub const OPNORM_MAX_ITER: usize = 1000;

/// Number of squarings applied to `WᵀW` before iterating; each iteration
/// then advances the power method by `2^SQUARINGS` steps.
const SQUARINGS: u32 = 4;

/// Largest singular value of a matrix.
pub fn opnorm(w: &Tensor) -> Result<f64> {
    opnorm_with(w, OPNORM_TOL, OPNORM_MAX_ITER)
}

/// Power iteration on `(WᵀW)^(2^4)`, stopping once the Rayleigh quotient of
/// `WᵀW` changes by less than `rel_tol` relative to its value.
///
/// The squaring keeps nearly degenerate top singular values (ratios above
/// 0.99 occur for roughly one teacher task in a thousand) within the
/// iteration budget.
pub fn opnorm_with(w: &Tensor, rel_tol: f64, max_iter: usize) -> Result<f64> {
    let (rows, n) = w.dims2()?;
    if !w.is_finite() {
        return Err(Error::InvalidInput("opnorm of a non-finite matrix".into()));
    }
    let wd = w.data();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..rows).map(|r| wd[r * n + i] * wd[r * n + j]).sum();
            gram[i * n + j] = s;
            gram[j * n + i] = s;
        }
    }
    if gram.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }

    let mut power = gram.clone();
    for _ in 0..SQUARINGS {
        let mut sq = square(&power, n);
        let scale = sq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            break;
        }
        sq.iter_mut().for_each(|v| *v /= scale);
        power = sq;
    }

    // start from the heaviest column of the Gram matrix
    let start = (0..n)
        .max_by(|&a, &b| {
            let na: f64 = (0..n).map(|i| gram[i * n + a].powi(2)).sum();
            let nb: f64 = (0..n).map(|i| gram[i * n + b].powi(2)).sum();
            na.total_cmp(&nb)
        })
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..n).map(|i| gram[i * n + start]).collect();
    normalize(&mut v);

    let mut prev = rayleigh(&gram, &v, n);
    for _ in 0..max_iter {
        let mut next = matvec(&power, &v, n);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
        let mu = rayleigh(&gram, &v, n);
        if (mu - prev).abs() <= rel_tol * mu.abs() {
            return Ok(mu.max(0.0).sqrt());
        }
        prev = mu;
    }
    Err(Error::NonConvergence { iterations: max_iter })
}

fn square(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * a[k * n + j];
            }
        }
    }
    out
}

fn matvec(a: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect()
}

fn rayleigh(a: &[f64], v: &[f64], n: usize) -> f64 {
    matvec(a, v, n).iter().zip(v).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}
