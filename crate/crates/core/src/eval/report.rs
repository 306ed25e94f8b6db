use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::taskgen::Split;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "step,split,metric,value,n,seed";

/// Text written in place of a value whose denominator vanished.
pub const DEGENERATE: &str = "degenerate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub step: u64,
    pub split: Split,
    pub metric: String,
    /// `None` marks a degenerate metric.
    pub value: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        self.to_string()
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed metrics row `{line}`"));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let [step, split, metric, value, n, seed] = f[..] else {
            return Err(bad());
        };
        Ok(MetricReport {
            step: step.parse().map_err(|_| bad())?,
            split: split.parse()?,
            metric: metric.to_string(),
            value: if value == DEGENERATE {
                None
            } else {
                Some(value.parse().map_err(|_| bad())?)
            },
            n: n.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for MetricReport {
    /// Shortest decimal that parses back to the same `f64`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},", self.step, self.split, self.metric)?;
        match self.value {
            Some(v) => write!(f, "{v:?}")?,
            None => f.write_str(DEGENERATE)?,
        }
        write!(f, ",{},{}", self.n, self.seed)
    }
}

/// Parses a whole metrics file, header included.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::InvalidInput("metrics file lacks the expected header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricReport::parse_row)
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })
}
