//! Episode dataset files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "MICLDATA"
//! version    u32      1
//! header_len u64
//! header     header_len bytes of JSON (DatasetHeader)
//! episodes   header.episodes records, each:
//!              mask   M bytes (0/1)
//!              z      M × f64
//!              x      N·d × f64, row-major
//!              y      N × f64
//! ```
//!
//! The JSON variant stores the same header and records as one document.
//! Both round-trip every `f64` bit for bit.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::episode::{Episode, Split};
use super::latent::{Mask, TaskLatent};
use super::masks::DistributionName;
use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MICLDATA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub modules: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub context_len: usize,
    pub distribution: DistributionName,
    pub teacher_seed: u64,
    pub data_seed: u64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Binary,
    Json,
}

#[derive(Serialize, Deserialize)]
struct JsonEpisode {
    mask: Vec<u8>,
    z: Vec<f64>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonDataset {
    header: DatasetHeader,
    episodes: Vec<JsonEpisode>,
}

impl Dataset {
    fn check(&self) -> Result<()> {
        let h = &self.header;
        if h.episodes != self.episodes.len() {
            return Err(Error::InvalidInput(format!(
                "header announces {} episodes, dataset has {}",
                h.episodes,
                self.episodes.len()
            )));
        }
        for ep in &self.episodes {
            if ep.latent.len() != h.modules
                || ep.mask.len() != h.modules
                || ep.inputs.shape() != [h.context_len, h.input_dim]
                || ep.labels.len() != h.context_len
            {
                return Err(Error::InvalidInput(
                    "episode shape disagrees with dataset header".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn write_dataset(path: &Path, data: &Dataset, format: DatasetFormat) -> Result<()> {
    data.check()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        DatasetFormat::Json => {
            let doc = JsonDataset {
                header: data.header.clone(),
                episodes: data
                    .episodes
                    .iter()
                    .map(|ep| JsonEpisode {
                        mask: ep.mask.bits().to_vec(),
                        z: ep.latent.0.clone(),
                        x: (0..ep.len()).map(|i| ep.input(i).to_vec()).collect(),
                        y: ep.labels.clone(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &doc).map_err(|e| Error::Format {
                path: path.into(),
                reason: e.to_string(),
            })?;
        }
        DatasetFormat::Binary => {
            let header = serde_json::to_vec(&data.header).expect("header serialises");
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            for ep in &data.episodes {
                w.write_all(ep.mask.bits()).map_err(io)?;
                for v in ep.latent.0.iter().chain(ep.inputs.data()).chain(&ep.labels) {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads either format, chosen by the leading magic bytes.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    if !bytes.starts_with(MAGIC) {
        let doc: JsonDataset = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        let split = Split::of(doc.header.distribution);
        let d = doc.header.input_dim;
        let episodes = doc
            .episodes
            .into_iter()
            .map(|je| {
                let n = je.x.len();
                let flat: Vec<f64> = je.x.concat();
                if flat.len() != n * d {
                    return Err(bad("ragged input matrix".into()));
                }
                Ok(Episode {
                    inputs: Tensor::new(vec![n, d], flat)?,
                    labels: je.y,
                    latent: TaskLatent(je.z),
                    mask: Mask::new(je.mask)?,
                    split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let data = Dataset {
            header: doc.header,
            episodes,
        };
        data.check().map_err(|e| bad(e.to_string()))?;
        return Ok(data);
    }

    let mut cur = &bytes[MAGIC.len()..];
    let version = u32::from_le_bytes(take::<4>(&mut cur).ok_or_else(|| bad("truncated version".into()))?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take::<8>(&mut cur).ok_or_else(|| bad("truncated header".into()))?) as usize;
    if cur.len() < header_len {
        return Err(bad("truncated header".into()));
    }
    let header: DatasetHeader = serde_json::from_slice(&cur[..header_len]).map_err(|e| bad(e.to_string()))?;
    cur = &cur[header_len..];

    let (m, n, d) = (header.modules, header.context_len, header.input_dim);
    let split = Split::of(header.distribution);
    let mut episodes = Vec::with_capacity(header.episodes);
    for _ in 0..header.episodes {
        let mut mask = vec![0u8; m];
        cur.read_exact(&mut mask).map_err(|_| bad("truncated episode".into()))?;
        let mut floats = |count: usize| -> Result<Vec<f64>> {
            (0..count)
                .map(|_| {
                    take::<8>(&mut cur)
                        .map(f64::from_le_bytes)
                        .ok_or_else(|| bad("truncated episode".into()))
                })
                .collect()
        };
        let z = floats(m)?;
        let x = floats(n * d)?;
        let y = floats(n)?;
        episodes.push(Episode {
            inputs: Tensor::new(vec![n, d], x)?,
            labels: y,
            latent: TaskLatent(z),
            mask: Mask::new(mask)?,
            split,
        });
    }
    if !cur.is_empty() {
        return Err(bad(format!("{} trailing bytes", cur.len())));
    }
    Ok(Dataset { header, episodes })
}

fn take<const K: usize>(cur: &mut &[u8]) -> Option<[u8; K]> {
    if cur.len() < K {
        return None;
    }
    let (head, rest) = cur.split_at(K);
    *cur = rest;
    head.try_into().ok()
}
