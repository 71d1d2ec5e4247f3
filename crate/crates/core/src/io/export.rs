use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::ArrayView3;

use crate::error::{Error, Result};
use crate::tensor::ImageBatch;

/// Maps `[0, 1]` to the nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes one `H × W × 3` image as an 8-bit RGB PNG.
pub fn write_png(image: ArrayView3<'_, f64>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let raw: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Largest allowed per-channel difference, in 8-bit levels.
pub fn level_budget(epsilon: f64) -> i32 {
    (255.0 * epsilon).round() as i32
}

/// Quantizes an adversarial image against its clean source.
///
/// The clean image and the perturbation are rounded separately, so the
/// exported file never differs from the quantized clean image by more than
/// `round(255·ε)` levels.
pub fn quantize_adversarial(adv: ArrayView3<'_, f64>, clean: ArrayView3<'_, f64>, epsilon: f64) -> Result<Vec<u8>> {
    if adv.dim() != clean.dim() {
        return Err(Error::Dimension(format!(
            "adversarial {:?} vs clean {:?}",
            adv.dim(),
            clean.dim()
        )));
    }
    let budget = level_budget(epsilon);
    let mut out = Vec::with_capacity(adv.len());
    for (&a, &c) in adv.iter().zip(clean.iter()) {
        let base = quantize(c) as i32;
        let delta = ((a - c) * 255.0).round() as i32;
        if delta.abs() > budget {
            return Err(Error::Contract(format!(
                "perturbation of {delta} levels exceeds budget of {budget}"
            )));
        }
        out.push((base + delta).clamp(0, 255) as u8);
    }
    Ok(out)
}

/// Exports adversarial images as `adv_00000.png`, `adv_00001.png`, ...
pub fn export_adversarial_png(
    adversarial: &ImageBatch,
    cleans: &ImageBatch,
    epsilon: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = (0..adversarial.len()).map(|i| format!("adv_{i:05}")).collect();
    export_adversarial_png_named(adversarial, cleans, epsilon, out_dir, &names)
}

/// Like [`export_adversarial_png`] with caller-chosen file stems.
pub fn export_adversarial_png_named(
    adversarial: &ImageBatch,
    cleans: &ImageBatch,
    epsilon: f64,
    out_dir: &Path,
    names: &[String],
) -> Result<Vec<PathBuf>> {
    if adversarial.len() != cleans.len() || names.len() != adversarial.len() {
        return Err(Error::Dimension(format!(
            "{} adversarial images, {} cleans, {} names",
            adversarial.len(),
            cleans.len(),
            names.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let (h, w) = adversarial.spatial();
    let mut paths = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let raw = quantize_adversarial(adversarial.image(i), cleans.image(i), epsilon)?;
        let path = out_dir.join(format!("{name}.png"));
        RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_png;
    use ndarray::Array3;

    #[test]
    fn exported_deviation_stays_within_levels() {
        let eps = 16.0 / 255.0;
        let clean = Array3::from_shape_fn((3, 3, 3), |(i, j, c)| ((i * 9 + j * 3 + c) * 7 % 256) as f64 / 255.0);
        let adv = Array3::from_shape_fn((3, 3, 3), |(i, j, c)| {
            let s = if (i + j + c) % 2 == 0 { 1.0 } else { -1.0 };
            (clean[[i, j, c]] + s * eps).clamp(0.0, 1.0)
        });
        let dir = tempfile::tempdir().unwrap();
        let a = ImageBatch::stack(std::slice::from_ref(&adv)).unwrap();
        let c = ImageBatch::stack(std::slice::from_ref(&clean)).unwrap();
        let paths = export_adversarial_png(&a, &c, eps, dir.path()).unwrap();
        let back = read_png(&paths[0]).unwrap();
        for (x, y) in back.iter().zip(clean.iter()) {
            assert!(((x - y) * 255.0).round().abs() <= 16.0);
        }
    }

    #[test]
    fn over_budget_is_rejected() {
        let clean = Array3::from_elem((1, 1, 3), 0.5);
        let adv = Array3::from_elem((1, 1, 3), 0.5 + 20.0 / 255.0);
        assert!(quantize_adversarial(adv.view(), clean.view(), 16.0 / 255.0).is_err());
    }
}
