//! Precomputed embedding matrices.
//!
//! A matrix file holds little-endian `u64` rows and `u64` dim followed by
//! row-major `f32` values. Row identifiers live in a sidecar file with the
//! same name plus `.ids`, one per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::EmbeddingBatch;

fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_embeddings(path: &Path, embeddings: &EmbeddingBatch, ids: &[String]) -> Result<()> {
    if ids.len() != embeddings.len() {
        return Err(Error::Dimension(format!(
            "{} ids for {} embedding rows",
            ids.len(),
            embeddings.len()
        )));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&(embeddings.len() as u64).to_le_bytes())?;
    out.write_all(&(embeddings.dim() as u64).to_le_bytes())?;
    for v in embeddings.view().iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    fs::write(ids_path(path), ids.join("\n") + "\n")?;
    Ok(())
}

/// Reads a matrix and its ids. Missing sidecars yield `0..rows` as ids.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingBatch, Vec<String>)> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| load_err(e.to_string()))?;
    if bytes.len() < 16 {
        return Err(load_err("file shorter than header".into()));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = rows.checked_mul(dim).and_then(|n| n.checked_mul(4)).map(|n| n + 16);
    if expected != Some(bytes.len()) {
        return Err(load_err(format!(
            "header declares {rows}×{dim} but file has {} bytes",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((rows, dim), values).expect("length checked above");
    let batch = EmbeddingBatch::new(data)?;
    let sidecar = ids_path(path);
    let ids = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar)?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != rows {
            return Err(Error::Load {
                path: sidecar,
                reason: format!("{} ids for {rows} rows", ids.len()),
            });
        }
        ids
    } else {
        (0..rows).map(|i| i.to_string()).collect()
    };
    Ok((batch, ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("text.emb");
        let e = EmbeddingBatch::new(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.25)).unwrap();
        let ids = vec!["a#0".to_string(), "a#1".into(), "b#0".into()];
        write_embeddings(&p, &e, &ids).unwrap();
        let (back, back_ids) = read_embeddings(&p).unwrap();
        assert_eq!(back.view(), e.view());
        assert_eq!(back_ids, ids);
    }

    #[test]
    fn size_mismatch_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        let mut bytes = 2u64.to_le_bytes().to_vec();
        bytes.extend(3u64.to_le_bytes());
        bytes.extend([0u8; 8]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Load { .. })));
    }
}
