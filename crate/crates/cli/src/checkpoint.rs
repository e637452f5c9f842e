//! Binary checkpoints: a JSON header followed by raw little-endian tensors
//! and a SHA-256 trailer.

use std::path::Path;

use outtask::encoder::EncoderConfig;
use outtask::model::{check_heads, DstModel, HeadConfig};
use outtask::ontology::Ontology;
use outtask::params::ParamStore;
use outtask::tensor::Tensor;
use outtask::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"OTCKPT01";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint does not fit the ontology: {0}")]
    Mismatch(String),
    #[error("checkpoint I/O on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub ontology: Ontology,
    pub train: TrainConfig,
    pub tokenizer_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub dev_jga: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of everything that shapes a model's parameters and training.
pub fn config_hash(encoder: &EncoderConfig, heads: &HeadConfig, ontology: &Ontology, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(encoder, heads, ontology, train)).expect("configs serialize");
    sha256_hex(&json)
}

impl Checkpoint {
    pub fn from_model(model: &DstModel<f32>, train: &TrainConfig, tokenizer_hash: &str, seed: u64) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                encoder: model.encoder.clone(),
                heads: model.heads,
                ontology: model.ontology.clone(),
                train: train.clone(),
                tokenizer_hash: tokenizer_hash.to_string(),
                config_hash: config_hash(&model.encoder, &model.heads, &model.ontology, train),
                seed,
                epoch: None,
                dev_jga: None,
            },
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(p.decay));
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(r.corrupt(0, "not a checkpoint (bad magic)"));
        }
        let meta_len = r.u64("header length")? as usize;
        let at = r.pos;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len, "header")?).map_err(|e| r.corrupt(at, &format!("header: {e}")))?;
        let count = r.u64("tensor count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.corrupt(at, "tensor name is not UTF-8"))?
                .to_string();
            let decay = match r.take(1, "decay flag")?[0] {
                0 => false,
                1 => true,
                b => return Err(r.corrupt(r.pos - 1, &format!("decay flag {b}"))),
            };
            let ndim = r.u32("rank")? as usize;
            if ndim > 8 {
                return Err(r.corrupt(r.pos - 4, &format!("rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let at = r.pos;
            let n = n
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.bytes.len()))
                .ok_or_else(|| r.corrupt(at, &format!("`{name}` shape {shape:?} too large")))?;
            let raw = r.take(n * 4, &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| r.corrupt(at, &e.to_string()))?;
            params.insert(name, tensor, decay);
        }
        let body_end = r.pos;
        let digest = r.take(32, "checksum")?;
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(r.corrupt(body_end, "checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Read a checkpoint. A differing `expected_config_hash` is reported as
    /// a warning, not an error.
    pub fn load(path: &Path, expected_config_hash: Option<&str>) -> Result<(Self, Vec<String>), CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck = Self::from_bytes(&bytes)?;
        let mut warnings = Vec::new();
        if let Some(h) = expected_config_hash {
            if h != ck.meta.config_hash {
                let w = format!(
                    "{} was written under config {} but the current config hashes to {h}",
                    path.display(),
                    ck.meta.config_hash
                );
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        Ok((ck, warnings))
    }

    /// A model over `ontology`; every head it needs must be present.
    pub fn into_model(self, ontology: &Ontology) -> Result<DstModel<f32>, CheckpointError> {
        check_heads(&self.params, ontology, self.meta.encoder.hidden)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        Ok(DstModel {
            encoder: self.meta.encoder,
            heads: self.meta.heads,
            ontology: ontology.clone(),
            params: self.params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, reason: &str) -> CheckpointError {
        CheckpointError::Corrupt {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(
                self.pos,
                &format!(
                    "truncated while reading {what} ({n} bytes wanted, {} left)",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
