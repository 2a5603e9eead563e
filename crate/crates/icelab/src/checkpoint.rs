//! Binary weight checkpoints.
//!
//! Layout: an 8-byte magic (`ICECKPT1`), a little-endian `u64` header
//! length, a JSON header holding the model config, the vocabulary
//! token list, and a tensor manifest of `(name, shape, offset)`; then
//! the raw parameter data as little-endian `f64`, in manifest order.
//! Offsets count `f64` elements from the start of the data section.
//! Writing and reading use the exact bit patterns, so a round trip
//! reproduces every weight bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use icelab_core::corpus::Vocab;
use icelab_core::model::{param_shapes, ModelConfig};
use icelab_core::params::ParamSet;
use icelab_core::tensor::Tensor;

use crate::{HarnessError, Result};

const MAGIC: &[u8; 8] = b"ICECKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Serialize a checkpoint to `path`.
pub fn save(path: &Path, cfg: &ModelConfig, vocab: &Vocab, params: &ParamSet) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape, offset });
        offset += t.data.len();
    }
    let header = Header {
        model: cfg.clone(),
        vocab: vocab.token_list().to_vec(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| HarnessError::io("encoding checkpoint header", e))?;

    let mut buf = Vec::with_capacity(16 + header_json.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in params.iter() {
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)
        .map_err(|e| HarnessError::io(&format!("creating {}", path.display()), e))?;
    f.write_all(&buf)
        .map_err(|e| HarnessError::io(&format!("writing {}", path.display()), e))?;
    Ok(())
}

/// Load a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<(ModelConfig, Vocab, ParamSet)> {
    let bytes = fs::read(path)
        .map_err(|e| HarnessError::io(&format!("reading {}", path.display()), e))?;
    let bad = |msg: &str| HarnessError::Io(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + header_len;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| HarnessError::io(&format!("decoding header of {}", path.display()), e))?;
    header.model.validate().map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let vocab = Vocab::from_token_list(header.vocab.clone())
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    if vocab.len() != header.model.vocab_size {
        return Err(bad("vocabulary size disagrees with the model config"));
    }

    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let total = data.len() / 8;
    let expected = param_shapes(&header.model);
    if header.tensors.len() != expected.len() {
        return Err(bad("tensor manifest does not match the architecture"));
    }

    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let shape = expected
            .get(entry.name.as_str())
            .ok_or_else(|| bad(&format!("unexpected tensor {:?}", entry.name)))?;
        if *shape != entry.shape {
            return Err(bad(&format!(
                "tensor {:?} has shape {:?}, expected {:?}",
                entry.name, entry.shape, shape
            )));
        }
        let len = entry.shape[0] * entry.shape[1];
        if entry.offset + len > total {
            return Err(bad(&format!("tensor {:?} runs past the data section", entry.name)));
        }
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let at = (entry.offset + i) * 8;
            values.push(f64::from_le_bytes(data[at..at + 8].try_into().unwrap()));
        }
        params.insert(&entry.name, Tensor::new(entry.shape, values).with_grad());
    }
    Ok((header.model, vocab, params))
}
