use crate::taskgen::Episode;
use crate::{Error, Result};

/// Pooled score `1 − Σ num / Σ den` with its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct R2Score {
    pub numerator: f64,
    pub denominator: f64,
    /// `None` when the pooled denominator is zero.
    pub value: Option<f64>,
}

impl R2Score {
    pub fn from_sums(numerator: f64, denominator: f64) -> Self {
        let value = (denominator > 0.0).then(|| 1.0 - numerator / denominator);
        R2Score {
            numerator,
            denominator,
            value,
        }
    }

    /// The normalised error `Σ num / Σ den` itself.
    pub fn ratio(&self) -> Option<f64> {
        self.value.map(|v| 1.0 - v)
    }
}

fn terms(predictions: &[f64], episodes: &[Episode]) -> Result<Vec<(f64, f64)>> {
    if predictions.len() != episodes.len() {
        return Err(Error::Dimension {
            op: "r2_score",
            lhs: vec![predictions.len()],
            rhs: vec![episodes.len()],
        });
    }
    if episodes.is_empty() {
        return Err(Error::InvalidInput("r2 needs at least one episode".into()));
    }
    predictions
        .iter()
        .zip(episodes)
        .map(|(&pred, ep)| {
            let ctx = ep.context_labels();
            if ctx.is_empty() {
                return Err(Error::InvalidInput("episode has no context pairs".into()));
            }
            let mean = ctx.iter().sum::<f64>() / ctx.len() as f64;
            let y = ep.query_label();
            Ok(((pred - y).powi(2), (mean - y).powi(2)))
        })
        .collect()
}

/// Query error normalised by the error of predicting the mean context label, pooled over episodes.
pub fn r2_score(predictions: &[f64], episodes: &[Episode]) -> Result<R2Score> {
    let t = terms(predictions, episodes)?;
    Ok(R2Score::from_sums(
        t.iter().map(|p| p.0).sum(),
        t.iter().map(|p| p.1).sum(),
    ))
}

/// `1 − mean_e(num_e / den_e)`; `None` if any episode has a zero denominator.
pub fn r2_score_per_episode(predictions: &[f64], episodes: &[Episode]) -> Result<Option<f64>> {
    let t = terms(predictions, episodes)?;
    if t.iter().any(|p| p.1 == 0.0) {
        return Ok(None);
    }
    Ok(Some(1.0 - t.iter().map(|(n, d)| n / d).sum::<f64>() / t.len() as f64))
}
