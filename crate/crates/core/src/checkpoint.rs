//! Binary checkpoint: everything needed to score new data with a trained
//! model — run config, fitted preprocessing statistics, and parameters.
//!
//! Layout: 7-byte magic `RGCKPT1`, u32 LE format version, u64 LE header
//! length, JSON header, then each parameter's rows x cols values as
//! little-endian 32-bit floats, row-major, in header order. Training runs
//! in doubles but parameters are rounded to 32-bit at save time (the
//! trainer already hands them over rounded), so save -> load -> score is
//! bit-identical to scoring before the save.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::preprocess::FittedTransform;

const MAGIC: &[u8; 7] = b"RGCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    fitted: FittedTransform,
    seed: u64,
    input_dim: usize,
    best_epoch: usize,
    best_val_auprc: Option<f64>,
    beta: f64,
    params: Vec<ParamEntry>,
}

/// A trained model plus the context to reapply it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub fitted: FittedTransform,
    /// Seed the run was trained under.
    pub seed: u64,
    /// Feature dimension the parameters expect.
    pub input_dim: usize,
    /// 1-based epoch whose validation AUPRC was best.
    pub best_epoch: usize,
    /// Validation AUPRC of the stored (rounded) parameters; None when the
    /// validation split had no positives.
    pub best_val_auprc: Option<f64>,
    /// Resolved positive-class weight used by the loss.
    pub beta: f64,
    pub params: ModelParams,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let named = ckpt.params.named();
    let header = Header {
        config: ckpt.config.clone(),
        fitted: ckpt.fitted.clone(),
        seed: ckpt.seed,
        input_dim: ckpt.input_dim,
        best_epoch: ckpt.best_epoch,
        best_val_auprc: ckpt.best_val_auprc,
        beta: ckpt.beta,
        params: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path, format!("header encode: {e}")))?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 12 + header_json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in &named {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let need = |end: usize| -> Result<()> {
        if end > bytes.len() {
            Err(Error::format(path, "truncated checkpoint"))
        } else {
            Ok(())
        }
    };
    need(MAGIC.len() + 12)?;
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "bad magic; not a checkpoint"));
    }
    let mut off = MAGIC.len();
    let version = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    off += 4;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let header_len =
        u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    need(off + header_len)?;
    let header: Header = serde_json::from_slice(&bytes[off..off + header_len])
        .map_err(|e| Error::format(path, format!("header decode: {e}")))?;
    off += header_len;

    // Rebuild the parameter container at the declared shape, then overwrite
    // every tensor from the blob; any mismatch against the entry list means
    // the header and config disagree.
    let mut params = init_params(&header.config.model, header.input_dim, header.seed)?;
    let mut named = params.named_mut();
    if named.len() != header.params.len() {
        return Err(Error::format(
            path,
            format!(
                "parameter count mismatch: header lists {}, model has {}",
                header.params.len(),
                named.len()
            ),
        ));
    }
    for (entry, (name, tensor)) in header.params.iter().zip(named.iter_mut()) {
        if entry.name != *name || entry.rows != tensor.rows() || entry.cols != tensor.cols()
        {
            return Err(Error::format(
                path,
                format!(
                    "parameter {} ({}x{}) does not match expected {} ({}x{})",
                    entry.name, entry.rows, entry.cols, name, tensor.rows(), tensor.cols()
                ),
            ));
        }
        let n = entry.rows * entry.cols;
        need(off + 4 * n)?;
        for (i, o) in tensor.data_mut().iter_mut().enumerate() {
            let le: [u8; 4] = bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap();
            *o = f32::from_le_bytes(le) as f64;
        }
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameter data"));
    }
    if !params.all_finite() {
        return Err(Error::format(path, "non-finite parameter value"));
    }
    Ok(Checkpoint {
        config: header.config,
        fitted: header.fitted,
        seed: header.seed,
        input_dim: header.input_dim,
        best_epoch: header.best_epoch,
        best_val_auprc: header.best_val_auprc,
        beta: header.beta,
        params,
    })
}
