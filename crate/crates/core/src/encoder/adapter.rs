//! Adapter slot for encoders whose weights live outside this crate.
//!
//! An adapter is a small TOML file:
//!
//! ```toml
//! name = "vit-proxy"
//! weights = "vit-proxy.bin"   # relative to this file
//! input_height = 32
//! input_width = 32
//! embed_dim = 32
//!
//! [preprocess]
//! resize = "bilinear"
//! mean = [0.481, 0.458, 0.408]
//! std = [0.269, 0.261, 0.276]
//! ```
//!
//! The weight artifact starts with the magic `NDENCW01`, a little-endian
//! `u32` header length and a JSON header describing the architecture,
//! followed by the four weight tensors (conv weight, conv bias, projection
//! weight, projection bias) as row-major little-endian floats.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderWeights, Preprocess};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NDENCW01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub name: String,
    pub weights: PathBuf,
    pub input_height: usize,
    pub input_width: usize,
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub preprocess: Preprocess,
}

impl AdapterConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    kernel: usize,
    stride: usize,
    channels: usize,
    input_height: usize,
    input_width: usize,
    embed_dim: usize,
    dtype: String,
}

/// Wraps an external weight artifact behind the [`Encoder`] contract.
pub fn load_external_encoder(config_path: &Path) -> Result<Encoder> {
    let config = AdapterConfig::from_file(config_path)?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    load_with_config(&config, base)
}

pub(crate) fn load_with_config(config: &AdapterConfig, base: &Path) -> Result<Encoder> {
    let embed_dim = config
        .embed_dim
        .ok_or_else(|| Error::Config(format!("adapter '{}' does not declare embed_dim", config.name)))?;
    let path = if config.weights.is_absolute() {
        config.weights.clone()
    } else {
        base.join(&config.weights)
    };
    let load_err = |reason: String| Error::Load {
        path: path.clone(),
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| load_err(e.to_string()))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(load_err("not an encoder weight artifact".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(load_err("truncated header".into()));
    }
    let header: WeightHeader =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| load_err(format!("bad header: {e}")))?;
    if header.embed_dim != embed_dim {
        return Err(Error::Config(format!(
            "adapter declares embed_dim {embed_dim} but weights have {}",
            header.embed_dim
        )));
    }
    if (header.input_height, header.input_width) != (config.input_height, config.input_width) {
        return Err(Error::Config(format!(
            "adapter declares input {}x{} but weights expect {}x{}",
            config.input_height, config.input_width, header.input_height, header.input_width
        )));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(load_err(format!("unsupported dtype {other}"))),
    };
    if header.kernel == 0 || header.stride == 0 || header.kernel > header.input_height || header.kernel > header.input_width {
        return Err(load_err(format!("invalid kernel {} / stride {}", header.kernel, header.stride)));
    }
    let out_h = (header.input_height - header.kernel) / header.stride + 1;
    let out_w = (header.input_width - header.kernel) / header.stride + 1;
    let patch = header.kernel * header.kernel * 3;
    let flat = out_h * out_w * header.channels;
    let counts = [patch * header.channels, header.channels, flat * embed_dim, embed_dim];
    let expected = header_end + counts.iter().sum::<usize>() * width;
    if bytes.len() != expected {
        return Err(load_err(format!(
            "weight payload is {} bytes, expected {}",
            bytes.len() - header_end,
            expected - header_end
        )));
    }
    let mut values = bytes[header_end..].chunks_exact(width).map(|c| match width {
        4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
        _ => f64::from_le_bytes(c.try_into().unwrap()),
    });
    let mut take = |count: usize| -> Vec<f64> { values.by_ref().take(count).collect() };
    let conv_weight = Array2::from_shape_vec((patch, header.channels), take(counts[0])).unwrap();
    let conv_bias = Array1::from_vec(take(counts[1]));
    let proj_weight = Array2::from_shape_vec((flat, embed_dim), take(counts[2])).unwrap();
    let proj_bias = Array1::from_vec(take(counts[3]));
    Encoder::new(
        config.name.clone(),
        (config.input_height, config.input_width),
        config.preprocess.clone(),
        EncoderWeights {
            kernel: header.kernel,
            stride: header.stride,
            channels: header.channels,
            conv_weight,
            conv_bias,
            proj_weight,
            proj_bias,
        },
    )
    .map_err(|e| load_err(e.to_string()))
}

/// Writes `encoder`'s weights as an adapter artifact (`f64` payload).
pub fn save_encoder_weights(encoder: &Encoder, path: &Path) -> Result<()> {
    let w = encoder.weights();
    let (h, wd, _) = encoder.input_shape();
    let header = WeightHeader {
        kernel: w.kernel,
        stride: w.stride,
        channels: w.channels,
        input_height: h,
        input_width: wd,
        embed_dim: encoder.embed_dim(),
        dtype: "f64".into(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in w
        .conv_weight
        .iter()
        .chain(&w.conv_bias)
        .chain(&w.proj_weight)
        .chain(&w.proj_bias)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::make_toy_encoder;
    use crate::tensor::ImageBatch;
    use ndarray::Array4;

    fn write_adapter(dir: &Path, embed_dim: Option<usize>) -> PathBuf {
        let enc = make_toy_encoder(11, (8, 8), 6).unwrap();
        save_encoder_weights(&enc, &dir.join("w.bin")).unwrap();
        let mut text = String::from("name = \"ext\"\nweights = \"w.bin\"\ninput_height = 8\ninput_width = 8\n");
        if let Some(d) = embed_dim {
            text.push_str(&format!("embed_dim = {d}\n"));
        }
        text.push_str("[preprocess]\nresize = \"bilinear\"\nmean = [0.5, 0.5, 0.5]\nstd = [0.25, 0.25, 0.25]\n");
        let p = dir.join("adapter.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn valid_adapter_produces_unit_rows() {
        let dir = tempfile::tempdir().unwrap();
        let enc = load_external_encoder(&write_adapter(dir.path(), Some(6))).unwrap();
        let imgs = ImageBatch::new(Array4::from_elem((2, 12, 12, 3), 0.3)).unwrap();
        assert!(enc.encode(&imgs).unwrap().max_norm_deviation() < 1e-6);
    }

    #[test]
    fn loaded_weights_match_source() {
        let dir = tempfile::tempdir().unwrap();
        let enc = load_external_encoder(&write_adapter(dir.path(), Some(6))).unwrap();
        assert_eq!(enc.weights(), make_toy_encoder(11, (8, 8), 6).unwrap().weights());
    }

    #[test]
    fn missing_weights_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_adapter(dir.path(), Some(6));
        fs::remove_file(dir.path().join("w.bin")).unwrap();
        assert!(matches!(load_external_encoder(&p), Err(Error::Load { .. })));
        assert!(matches!(
            load_external_encoder(&dir.path().join("nope.toml")),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn undeclared_embed_dim_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_adapter(dir.path(), None);
        assert!(matches!(load_external_encoder(&p), Err(Error::Config(_))));
        let p = write_adapter(dir.path(), Some(5));
        assert!(matches!(load_external_encoder(&p), Err(Error::Config(_))));
    }

    #[test]
    fn corrupt_payload_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_adapter(dir.path(), Some(6));
        let wpath = dir.path().join("w.bin");
        let mut bytes = fs::read(&wpath).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&wpath, bytes).unwrap();
        assert!(matches!(load_external_encoder(&p), Err(Error::Load { .. })));
    }
}
