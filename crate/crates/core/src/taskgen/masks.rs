//! Named task distributions over module masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::latent::Mask;
use crate::{Error, Result};

/// The three training supports; each lists six or twelve masks over six modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Support {
    Connected,
    Disconnected,
    ConnectedPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistributionName {
    Train(Support),
    /// Two-hot masks held out from the given training support.
    Ood(Support),
    /// Two-hot masks over a freshly initialised teacher.
    Control,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistribution {
    pub name: DistributionName,
    pub masks: Vec<Mask>,
}

const CONNECTED: [[u8; 6]; 6] = [
    [1, 1, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 0],
    [0, 0, 1, 1, 0, 0],
    [0, 0, 0, 1, 1, 0],
    [0, 0, 0, 0, 1, 1],
    [1, 0, 0, 0, 0, 1],
];

const DISCONNECTED: [[u8; 6]; 6] = [
    [1, 1, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 0],
    [1, 0, 1, 0, 0, 0],
    [0, 0, 0, 1, 1, 0],
    [0, 0, 0, 0, 1, 1],
    [0, 0, 0, 1, 0, 1],
];

const CONNECTED_PLUS: [[u8; 6]; 12] = [
    [1, 1, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 0],
    [0, 0, 1, 1, 0, 0],
    [0, 0, 0, 1, 1, 0],
    [0, 0, 0, 0, 1, 1],
    [1, 0, 0, 0, 0, 1],
    [1, 0, 1, 0, 0, 0],
    [0, 1, 0, 1, 0, 0],
    [0, 0, 1, 0, 1, 0],
    [0, 0, 0, 1, 0, 1],
    [1, 0, 0, 0, 1, 0],
    [0, 1, 0, 0, 0, 1],
];

/// Modules assumed by the training-support tables.
pub const TABLE_MODULES: usize = 6;

impl Support {
    fn table(self) -> &'static [[u8; 6]] {
        match self {
            Support::Connected => &CONNECTED,
            Support::Disconnected => &DISCONNECTED,
            Support::ConnectedPlus => &CONNECTED_PLUS,
        }
    }

    pub fn masks(self) -> Vec<Mask> {
        self.table()
            .iter()
            .map(|row| Mask::new(row.to_vec()).expect("table rows are binary"))
            .collect()
    }
}

/// Every mask with exactly two ones, in lexicographic order of positions.
pub fn two_hot_masks(modules: usize) -> Vec<Mask> {
    let mut out = Vec::new();
    for i in 0..modules {
        for j in i + 1..modules {
            out.push(Mask::hot(modules, &[i, j]));
        }
    }
    out
}

/// Resolves a distribution name to its mask list for `modules` modules.
pub fn mask_set(name: DistributionName, modules: usize) -> Result<TaskDistribution> {
    let table_only = |s: Support| -> Result<Vec<Mask>> {
        if modules != TABLE_MODULES {
            return Err(Error::UnknownDistribution(format!(
                "{name} is defined for {TABLE_MODULES} modules, not {modules}"
            )));
        }
        Ok(s.masks())
    };
    let masks = match name {
        DistributionName::Train(s) => table_only(s)?,
        DistributionName::Ood(s) => {
            let train = table_only(s)?;
            two_hot_masks(modules)
                .into_iter()
                .filter(|m| !train.contains(m))
                .collect()
        }
        DistributionName::Control => {
            if modules < 2 {
                return Err(Error::UnknownDistribution(format!(
                    "control needs at least two modules, got {modules}"
                )));
            }
            two_hot_masks(modules)
        }
    };
    Ok(TaskDistribution { name, masks })
}

impl fmt::Display for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Support::Connected => "connected",
            Support::Disconnected => "disconnected",
            Support::ConnectedPlus => "connected+",
        })
    }
}

impl FromStr for Support {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "connected" => Ok(Support::Connected),
            "disconnected" => Ok(Support::Disconnected),
            "connected+" | "connected-plus" | "connected_plus" => Ok(Support::ConnectedPlus),
            _ => Err(Error::UnknownDistribution(s.to_string())),
        }
    }
}

impl fmt::Display for DistributionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionName::Train(s) => write!(f, "{s}"),
            DistributionName::Ood(s) => write!(f, "ood-{s}"),
            DistributionName::Control => f.write_str("control"),
        }
    }
}

impl FromStr for DistributionName {
    type Err = Error;

    /// Accepts `connected`, `disconnected`, `connected+`, `ood-<support>`
    /// (also `ood:<support>`), and `control`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "control" {
            return Ok(DistributionName::Control);
        }
        if let Some(rest) = lower.strip_prefix("ood-").or_else(|| lower.strip_prefix("ood:")) {
            return rest
                .parse()
                .map(DistributionName::Ood)
                .map_err(|_| Error::UnknownDistribution(s.to_string()));
        }
        lower
            .parse()
            .map(DistributionName::Train)
            .map_err(|_| Error::UnknownDistribution(s.to_string()))
    }
}

impl TryFrom<String> for DistributionName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistributionName> for String {
    fn from(n: DistributionName) -> String {
        n.to_string()
    }
}

impl DistributionName {
    /// The held-out two-hot set matching a training support.
    pub fn ood_for(self) -> Option<DistributionName> {
        match self {
            DistributionName::Train(s) => Some(DistributionName::Ood(s)),
            _ => None,
        }
    }
}
