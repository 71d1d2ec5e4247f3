//! Binary checkpoint format.
//!
//! Layout: magic `NDCKPT01`, little-endian `u32` header length, JSON header,
//! then every tensor as little-endian `f64` (decoder parameters, Adam first
//! moments, Adam second moments, each in [`DecoderParams::NAMES`] order),
//! and finally the SHA-256 digest of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, RngState, Stage};
use crate::decoder::{Decoder, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::nn::AdamState;

const MAGIC: &[u8; 8] = b"NDCKPT01";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    decoder: DecoderConfig,
    stage: Stage,
    step: u64,
    config_fingerprint: String,
    rng: RngState,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let config = *ckpt.decoder.config();
    let shapes = DecoderParams::shapes(&config);
    let mut tensors = Vec::new();
    for prefix in ["param", "adam.m", "adam.v"] {
        for (name, shape) in DecoderParams::NAMES.iter().zip(&shapes) {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: shape.clone(),
            });
        }
    }
    let header = Header {
        decoder: config,
        stage: ckpt.stage,
        step: ckpt.step,
        config_fingerprint: ckpt.config_fingerprint.clone(),
        rng: ckpt.rng,
        optimizer_step: ckpt.optimizer.step,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let params = ckpt.decoder.params().slices();
    let all = params
        .iter()
        .copied()
        .chain(ckpt.optimizer.first.iter().map(|v| v.as_slice()))
        .chain(ckpt.optimizer.second.iter().map(|v| v.as_slice()));
    for slice in all {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Integrity(format!("checkpoint truncated to {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let computed = Sha256::digest(body);
    if computed.as_slice() != stored {
        return Err(Error::Integrity(format!(
            "digest mismatch: stored {}, computed {} (file truncated or corrupted)",
            hex::encode(stored),
            hex::encode(computed)
        )));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if body.len() < header_end {
        return Err(Error::Integrity("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&body[12..header_end])
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let shapes = DecoderParams::shapes(&header.decoder);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum::<usize>() * 3;
    if body.len() - header_end != total * 8 {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, header describes {}",
            body.len() - header_end,
            total * 8
        )));
    }
    if header.tensors.len() != 3 * sizes.len()
        || header
            .tensors
            .iter()
            .zip(shapes.iter().cycle())
            .any(|(t, s)| &t.shape != s)
    {
        return Err(Error::Integrity("tensor table does not match decoder configuration".into()));
    }
    let mut values = body[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = DecoderParams::zeros(&header.decoder);
    for slice in params.slices_mut() {
        for v in slice.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    let mut optimizer = AdamState::new(sizes.iter().copied());
    optimizer.step = header.optimizer_step;
    for buf in optimizer.first.iter_mut().chain(optimizer.second.iter_mut()) {
        for v in buf.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(Checkpoint {
        decoder: Decoder::from_params(header.decoder, params)?,
        optimizer,
        step: header.step,
        stage: header.stage,
        config_fingerprint: header.config_fingerprint,
        rng: header.rng,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode_checkpoint(ckpt))?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and reports (and logs) a fingerprint mismatch.
pub fn load_checkpoint_expecting(path: &Path, fingerprint: &str) -> Result<(Checkpoint, Option<String>)> {
    let ckpt = load_checkpoint(path)?;
    let warning = ckpt.fingerprint_warning(fingerprint);
    if let Some(w) = &warning {
        log::warn!("{}: {w}", path.display());
    }
    Ok((ckpt, warning))
}
