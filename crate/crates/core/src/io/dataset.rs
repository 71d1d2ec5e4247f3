//! Image datasets on disk.
//!
//! Two layouts are supported: a directory of PNG files, and a directory of
//! `.shard` archives. A shard is `NDSHRD01`, then little-endian `u32`
//! count, height and width, then per record a `u16` id length, the UTF-8
//! id and `height·width·3` bytes of RGB8 pixels.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageReader, Rgb32FImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, ImageSource};

const SHARD_MAGIC: &[u8; 8] = b"NDSHRD01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Directory,
    ShardedArchive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    /// File name (directory) or `shard#record` (archive).
    pub image_ref: String,
    pub caption_id: Option<String>,
}

#[derive(Debug, Clone)]
enum Location {
    File(PathBuf),
    Record { shard: PathBuf, offset: u64, height: usize, width: usize },
}

/// Lazily decoded image collection with a deterministic index.
#[derive(Debug)]
pub struct DatasetHandle {
    root: PathBuf,
    kind: DatasetKind,
    index: Vec<IndexEntry>,
    locations: Vec<Location>,
    resize: Option<(usize, usize)>,
    cache: Vec<OnceLock<Array3<f64>>>,
}

/// Opens a dataset, validating every entry up front.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<DatasetHandle> {
    if !path.is_dir() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "dataset root is not a directory".into(),
        });
    }
    let (index, locations) = match kind {
        DatasetKind::Directory => index_directory(path)?,
        DatasetKind::ShardedArchive => index_shards(path)?,
    };
    if index.is_empty() {
        return Err(Error::EmptySource(format!("no images found under {}", path.display())));
    }
    let cache = (0..index.len()).map(|_| OnceLock::new()).collect();
    Ok(DatasetHandle {
        root: path.to_path_buf(),
        kind,
        index,
        locations,
        resize: None,
        cache,
    })
}

fn sorted_files(root: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn index_directory(root: &Path) -> Result<(Vec<IndexEntry>, Vec<Location>)> {
    let files = sorted_files(root, "png")?;
    let mut bad = Vec::new();
    let mut index = Vec::new();
    let mut locations = Vec::new();
    for file in files {
        let name = file.file_name().unwrap().to_string_lossy().into_owned();
        match ImageReader::open(&file).and_then(|r| r.with_guessed_format()).map(|r| r.into_dimensions()) {
            Ok(Ok(_)) => {
                let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
                index.push(IndexEntry {
                    image_ref: name,
                    caption_id: Some(stem),
                });
                locations.push(Location::File(file));
            }
            Ok(Err(e)) => bad.push(format!("{name} ({e})")),
            Err(e) => bad.push(format!("{name} ({e})")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Ingestion {
            root: root.to_path_buf(),
            entries: bad,
        });
    }
    Ok((index, locations))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn index_shards(root: &Path) -> Result<(Vec<IndexEntry>, Vec<Location>)> {
    let mut bad = Vec::new();
    let mut index = Vec::new();
    let mut locations = Vec::new();
    for shard in sorted_files(root, "shard")? {
        let name = shard.file_name().unwrap().to_string_lossy().into_owned();
        match scan_shard(&shard) {
            Ok(records) => {
                for (i, (id, offset, height, width)) in records.into_iter().enumerate() {
                    index.push(IndexEntry {
                        image_ref: format!("{name}#{i:06}"),
                        caption_id: Some(id),
                    });
                    locations.push(Location::Record {
                        shard: shard.clone(),
                        offset,
                        height,
                        width,
                    });
                }
            }
            Err(e) => bad.push(format!("{name} ({e})")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Ingestion {
            root: root.to_path_buf(),
            entries: bad,
        });
    }
    Ok((index, locations))
}

type ShardRecord = (String, u64, usize, usize);

fn scan_shard(path: &Path) -> std::io::Result<Vec<ShardRecord>> {
    let bytes = fs::read(path)?;
    let invalid = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)?;
    if &magic != SHARD_MAGIC {
        return Err(invalid("bad shard magic"));
    }
    let count = read_u32(&mut cur)? as usize;
    let height = read_u32(&mut cur)? as usize;
    let width = read_u32(&mut cur)? as usize;
    let pixels = (height * width * 3) as u64;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        cur.read_exact(&mut len)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        cur.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| invalid("record id is not UTF-8"))?;
        let offset = cur.position();
        if offset + pixels > bytes.len() as u64 {
            return Err(invalid("truncated record"));
        }
        cur.set_position(offset + pixels);
        records.push((id, offset, height, width));
    }
    if cur.position() != bytes.len() as u64 {
        return Err(invalid("trailing bytes after last record"));
    }
    Ok(records)
}

/// Writes images as one shard, quantized to 8 bits.
pub fn write_shard(path: &Path, images: &ImageBatch, ids: &[String]) -> Result<()> {
    if ids.len() != images.len() {
        return Err(Error::Dimension(format!("{} ids for {} images", ids.len(), images.len())));
    }
    let (h, w) = images.spatial();
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(SHARD_MAGIC)?;
    for v in [images.len(), h, w] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for (i, id) in ids.iter().enumerate() {
        let len = u16::try_from(id.len()).map_err(|_| Error::InvalidInput(format!("id too long: {id}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        let px: Vec<u8> = images.image(i).iter().map(|&v| super::quantize(v)).collect();
        out.write_all(&px)?;
    }
    out.flush()?;
    Ok(())
}

impl DatasetHandle {
    /// Resize every decoded image to `height × width` (bilinear).
    pub fn with_resize(mut self, height: usize, width: usize) -> Self {
        self.resize = Some((height, width));
        self.cache = (0..self.index.len()).map(|_| OnceLock::new()).collect();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    /// Caption id when present, image ref otherwise.
    pub fn ids(&self) -> Vec<String> {
        self.index
            .iter()
            .map(|e| e.caption_id.clone().unwrap_or_else(|| e.image_ref.clone()))
            .collect()
    }

    fn decode(&self, i: usize) -> Result<Array3<f64>> {
        let image = match &self.locations[i] {
            Location::File(path) => read_png(path)?,
            Location::Record {
                shard,
                offset,
                height,
                width,
            } => {
                let mut f = fs::File::open(shard)?;
                std::io::Seek::seek(&mut f, std::io::SeekFrom::Start(*offset))?;
                let mut px = vec![0u8; height * width * 3];
                f.read_exact(&mut px)?;
                Array3::from_shape_vec((*height, *width, 3), px.into_iter().map(|v| v as f64 / 255.0).collect())
                    .expect("record size matches header")
            }
        };
        match self.resize {
            Some(size) if size != (image.dim().0, image.dim().1) => Ok(resize_image(&image, size)),
            _ => Ok(image),
        }
    }
}

impl ImageSource for DatasetHandle {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn load(&self, index: usize) -> Result<Array3<f64>> {
        if index >= self.index.len() {
            return Err(Error::InvalidInput(format!("image index {index} out of range")));
        }
        if let Some(img) = self.cache[index].get() {
            return Ok(img.clone());
        }
        let img = self.decode(index).map_err(|e| Error::Ingestion {
            root: self.root.clone(),
            entries: vec![format!("{} ({e})", self.index[index].image_ref)],
        })?;
        Ok(self.cache[index].get_or_init(|| img).clone())
    }
}

/// Decodes a PNG into `[0, 1]` floats (8-bit values divided by 255,
/// 16-bit by 65535).
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        _ => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    Ok(Array3::from_shape_vec((h, w, 3), data).expect("decoded buffer matches dimensions"))
}

fn resize_image(image: &Array3<f64>, (height, width): (usize, usize)) -> Array3<f64> {
    let (h, w, _) = image.dim();
    let buf: Vec<f32> = image.iter().map(|&v| v as f32).collect();
    let src = Rgb32FImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    let dst = imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
    Array3::from_shape_vec(
        (height, width, 3),
        dst.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect(),
    )
    .expect("resized buffer matches dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{synthetic_images, write_png};

    #[test]
    fn directory_index_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synthetic_images(3, 4, 4, 0);
        for (i, name) in ["b.png", "c.png", "a.png"].iter().enumerate() {
            write_png(imgs.image(i), &dir.path().join(name)).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let ds = load_dataset(dir.path(), DatasetKind::Directory).unwrap();
        let refs: Vec<_> = ds.index().iter().map(|e| e.image_ref.as_str()).collect();
        assert_eq!(refs, ["a.png", "b.png", "c.png"]);
        assert_eq!(ds.ids(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_directory_is_empty_source() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), DatasetKind::Directory), Err(Error::EmptySource(_))));
    }

    #[test]
    fn unreadable_entries_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        match load_dataset(dir.path(), DatasetKind::Directory) {
            Err(Error::Ingestion { entries, .. }) => assert!(entries[0].starts_with("broken.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_intensity_decodes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 128]));
        img.save(dir.path().join("x.png")).unwrap();
        let ds = load_dataset(dir.path(), DatasetKind::Directory).unwrap();
        let px = ds.load(0).unwrap();
        assert_eq!(px[[0, 0, 0]], 1.0);
        assert_eq!(px[[0, 0, 1]], 0.0);
        assert_eq!(px[[1, 1, 2]], 128.0 / 255.0);
    }

    #[test]
    fn shard_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synthetic_images(4, 6, 6, 1);
        let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
        write_shard(&dir.path().join("part-0.shard"), &imgs, &ids).unwrap();
        let ds = load_dataset(dir.path(), DatasetKind::ShardedArchive).unwrap();
        assert_eq!(ds.ids(), ids);
        let back = ds.load(2).unwrap();
        for (a, b) in back.iter().zip(imgs.image(2).iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let resized = load_dataset(dir.path(), DatasetKind::ShardedArchive).unwrap().with_resize(3, 5);
        assert_eq!(resized.load(0).unwrap().dim(), (3, 5, 3));
    }

    #[test]
    fn truncated_shard_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.shard");
        write_shard(&p, &synthetic_images(2, 4, 4, 1), &["x".into(), "y".into()]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path(), DatasetKind::ShardedArchive), Err(Error::Ingestion { .. })));
    }
}
