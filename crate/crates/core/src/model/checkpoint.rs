//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `SIASEQCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header
//! (model config, optional vocabulary, parameter names and shapes), then
//! every parameter value as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Param, SeqModel};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"SIASEQCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vocabulary>,
    params: Vec<(String, Vec<usize>)>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SeqModel,
    pub vocab: Option<Vocabulary>,
}

pub fn save_model(model: &SeqModel, vocab: Option<&Vocabulary>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, vocab))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

/// Reads a checkpoint; when `expected` is given its config must match the
/// stored one exactly.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let ck = from_bytes(&bytes)?;
    if let Some(want) = expected {
        let got = ck.model.config();
        if got != want {
            return Err(Error::Format(format!(
                "checkpoint config mismatch: file has {got:?}, expected {want:?}"
            )));
        }
    }
    Ok(ck)
}

pub(crate) fn to_bytes(model: &SeqModel, vocab: Option<&Vocabulary>) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        vocab: vocab.cloned(),
        params: model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + model.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let truncated = || Error::Format("checkpoint is truncated".into());
    if bytes.len() < 20 {
        return Err(truncated());
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(truncated());
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let mut values = body[hlen..].chunks_exact(8);
    let expected: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if values.len() != expected || !values.remainder().is_empty() {
        return Err(if values.len() < expected { truncated() } else {
            Error::Format("trailing bytes after parameter data".into())
        });
    }
    let mut params = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    let model = SeqModel::from_params(header.config, params)?;
    if let Some(v) = &header.vocab {
        if v.len() != model.config().vocab_size {
            return Err(Error::Format(format!(
                "vocabulary of {} entries does not match model vocab_size {}",
                v.len(),
                model.config().vocab_size
            )));
        }
    }
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
    })
}
