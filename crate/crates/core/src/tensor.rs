//! Batched image and embedding containers.
//!
//! Images are stored NHWC (`n × H × W × 3`) in `[0, 1]`; embeddings are
//! `n × d` row matrices.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::error::{Error, Result};

/// A batch of RGB images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (n, h, w, c) = data.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty image batch {:?}", data.dim())));
        }
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pixel value {v}")));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Stacks single `H × W × 3` images into a batch.
    pub fn stack(images: &[Array3<f64>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dimension("cannot stack zero images".into()));
        }
        let views: Vec<ArrayView3<f64>> = images.iter().map(|a| a.view()).collect();
        let data = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::Dimension(format!("images differ in shape: {e}")))?;
        Self::new(data)
    }

    pub(crate) fn from_trusted(data: Array4<f64>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W)` of every image in the batch.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("image batches are always stored contiguously")
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    /// Gathers images by index (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        Self {
            data: self.data.select(Axis(0), indices).as_standard_layout().into_owned(),
        }
    }
}

/// A batch of embedding vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Dimension(format!("empty embedding batch {:?}", data.dim())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite embedding entry".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Builds a batch after scaling every row to unit ℓ2 norm.
    pub fn normalized(mut data: Array2<f64>) -> Result<Self> {
        for mut row in data.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::InvalidInput(format!("cannot normalize row with norm {norm}")));
            }
            row /= norm;
        }
        Self::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn select(&self, indices: &[usize]) -> EmbeddingBatch {
        Self {
            data: self.data.select(Axis(0), indices),
        }
    }

    /// Largest `| ‖row‖₂ − 1 |` over all rows.
    pub fn max_norm_deviation(&self) -> f64 {
        self.data
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per-row cosine similarity with another batch of the same shape.
    pub fn rowwise_cosine(&self, other: &EmbeddingBatch) -> Result<Vec<f64>> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::Dimension(format!(
                "{:?} vs {:?}",
                self.data.dim(),
                other.data.dim()
            )));
        }
        Ok(self
            .data
            .rows()
            .into_iter()
            .zip(other.data.rows())
            .map(|(a, b)| a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt()))
            .collect())
    }
}

/// Random-access collection of images of a common shape.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads image `index` as an `H × W × 3` array in `[0, 1]`.
    fn load(&self, index: usize) -> Result<Array3<f64>>;

    fn load_batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let images = indices
            .iter()
            .map(|&i| self.load(i))
            .collect::<Result<Vec<_>>>()?;
        ImageBatch::stack(&images)
    }
}

impl ImageSource for ImageBatch {
    fn len(&self) -> usize {
        ImageBatch::len(self)
    }

    fn load(&self, index: usize) -> Result<Array3<f64>> {
        if index >= self.len() {
            return Err(Error::InvalidInput(format!(
                "image index {index} out of range for {} images",
                self.len()
            )));
        }
        Ok(self.image(index).to_owned())
    }

    fn load_batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!("image index {i} out of range")));
        }
        Ok(self.select(indices))
    }
}
