use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ImageTensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XAGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub dataset: String,
    pub seed: u64,
    /// Epochs actually run.
    pub epochs: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    /// Test-set accuracy, when measured.
    pub final_accuracy: Option<f64>,
    pub config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub graph: Graph,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    metadata: TrainingMetadata,
    /// Byte offsets relative to the start of the blob section; `len` counts f64 values.
    blobs: Vec<BlobEntry>,
}

impl Checkpoint {
    /// Untrained checkpoint: freshly initialized weights.
    pub fn initial(architecture: Architecture, seed: u64) -> Result<Self> {
        let graph = architecture.compile(seed)?;
        Ok(Self {
            architecture,
            graph,
            metadata: TrainingMetadata {
                dataset: String::new(),
                seed,
                epochs: 0,
                best_epoch: 0,
                final_accuracy: None,
                config: None,
                history: Vec::new(),
            },
        })
    }

    pub fn predict(&self, x: &ImageTensor) -> Result<(usize, Vec<f64>)> {
        super::predict(&self.graph, x)
    }

    /// `XAGC`, u32 LE header length, JSON header, then f64 LE blobs in layer order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.graph.params();
        let mut offset = 0u64;
        let blobs = params
            .iter()
            .map(|p| {
                let e = BlobEntry {
                    offset,
                    len: p.len() as u64,
                };
                offset += 8 * p.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format_version: CHECKPOINT_VERSION,
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            blobs,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in params {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::parse("checkpoint", "missing XAGC magic"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| Error::parse("checkpoint", "truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                "checkpoint",
                format!("format version {} (supported: {CHECKPOINT_VERSION})", header.format_version),
            ));
        }
        let data = &bytes[8 + header_len..];
        let mut params = Vec::with_capacity(header.blobs.len());
        for (i, b) in header.blobs.iter().enumerate() {
            let start = b.offset as usize;
            let end = start + 8 * b.len as usize;
            let raw = data
                .get(start..end)
                .ok_or_else(|| Error::parse("checkpoint", format!("blob {i} extends past end of file")))?;
            params.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
        }
        let graph = header.architecture.with_params(params)?;
        Ok(Self {
            architecture: header.architecture,
            graph,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
