//! Frozen image encoders used as attack surrogates.
//!
//! Every encoder here shares one differentiable architecture: a strided
//! convolution, `tanh`, flatten, linear projection and ℓ2 normalization.
//! Weights either come from a seed ([`make_toy_encoder`]) or from an
//! external artifact ([`load_external_encoder`]).

mod adapter;
mod preprocess;

pub use adapter::{load_external_encoder, save_encoder_weights, AdapterConfig};
pub use preprocess::{Preprocess, ResizeMode};

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::tensor::{EmbeddingBatch, ImageBatch};
use preprocess::Bilinear;

/// Weights of the conv → tanh → projection stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    /// `(kernel·kernel·3, channels)`
    pub conv_weight: Array2<f64>,
    pub conv_bias: Array1<f64>,
    /// `(out_h·out_w·channels, embed_dim)`
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    name: String,
    input_shape: (usize, usize),
    embed_dim: usize,
    preprocess: Preprocess,
    geometry: ConvGeometry,
    weights: EncoderWeights,
}

/// Intermediate values of a forward pass needed to differentiate
/// w.r.t. the input pixels.
pub struct EncodeTape {
    n: usize,
    raw_shape: (usize, usize),
    resample: Option<Bilinear>,
    cols: Array2<f64>,
    activations: Array2<f64>,
    raw_norms: Vec<f64>,
    embeddings: Array2<f64>,
}

impl Encoder {
    pub fn new(
        name: impl Into<String>,
        input_shape: (usize, usize),
        preprocess: Preprocess,
        weights: EncoderWeights,
    ) -> Result<Self> {
        preprocess.validate()?;
        let geometry = ConvGeometry::new(input_shape.0, input_shape.1, weights.kernel, weights.stride, 0)?;
        let patch = geometry.patch_len(3);
        if weights.conv_weight.dim() != (patch, weights.channels) || weights.conv_bias.len() != weights.channels {
            return Err(Error::Dimension(format!(
                "conv weight {:?} does not match kernel {} and {} channels",
                weights.conv_weight.dim(),
                weights.kernel,
                weights.channels
            )));
        }
        let flat = geometry.out_positions() * weights.channels;
        let embed_dim = weights.proj_weight.ncols();
        if weights.proj_weight.nrows() != flat || weights.proj_bias.len() != embed_dim {
            return Err(Error::Dimension(format!(
                "projection {:?} expects {flat} input features",
                weights.proj_weight.dim()
            )));
        }
        if embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {embed_dim}")));
        }
        let all = weights
            .conv_weight
            .iter()
            .chain(&weights.conv_bias)
            .chain(&weights.proj_weight)
            .chain(&weights.proj_bias);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("encoder weights contain non-finite values".into()));
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            embed_dim,
            preprocess,
            geometry,
            weights,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.input_shape.0, self.input_shape.1, 3)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    /// Unit-norm embeddings of `images`.
    pub fn encode(&self, images: &ImageBatch) -> Result<EmbeddingBatch> {
        let tape = self.forward(images.view().to_owned())?;
        EmbeddingBatch::new(tape.embeddings)
    }

    /// Projection outputs before ℓ2 normalization.
    pub fn encode_raw(&self, images: &ImageBatch) -> Result<Array2<f64>> {
        let (raw, _, _, _, _) = self.forward_raw(&images.view().to_owned())?;
        Ok(raw)
    }

    /// Like [`encode`](Self::encode) but keeps what [`backward`](Self::backward) needs.
    pub fn encode_with_tape(&self, images: &ImageBatch) -> Result<(EmbeddingBatch, EncodeTape)> {
        let tape = self.forward(images.view().to_owned())?;
        Ok((EmbeddingBatch::new(tape.embeddings.clone())?, tape))
    }

    /// Gradient of a scalar loss w.r.t. the raw input pixels, given its
    /// gradient w.r.t. the normalized embeddings.
    pub fn backward(&self, tape: &EncodeTape, grad_embeddings: ArrayView2<f64>) -> Result<Array4<f64>> {
        let n = tape.n;
        if grad_embeddings.dim() != (n, self.embed_dim) {
            return Err(Error::Dimension(format!(
                "embedding gradient {:?}, expected ({n}, {})",
                grad_embeddings.dim(),
                self.embed_dim
            )));
        }
        // d/dy of y / |y|
        let mut grad_raw = grad_embeddings.to_owned();
        for (i, mut g) in grad_raw.rows_mut().into_iter().enumerate() {
            let z = tape.embeddings.row(i);
            let proj = z.dot(&g);
            g.zip_mut_with(&z, |gv, &zv| *gv -= proj * zv);
            g /= tape.raw_norms[i];
        }
        let grad_flat = grad_raw.dot(&self.weights.proj_weight.t());
        let mut grad_act = grad_flat
            .into_shape_with_order((n * self.geometry.out_positions(), self.weights.channels))
            .expect("flatten is a free reshape");
        nn::tanh_backward(
            tape.activations.as_slice().unwrap(),
            grad_act.as_slice_mut().unwrap(),
        );
        let (_, grad_pre) = nn::conv2d_backward(
            grad_act.view(),
            tape.cols.view(),
            self.weights.conv_weight.view(),
            n,
            3,
            &self.geometry,
            false,
        );
        let grad = self.preprocess.backward(grad_pre, tape.resample.as_ref(), n);
        Ok(Array4::from_shape_vec((n, tape.raw_shape.0, tape.raw_shape.1, 3), grad)
            .expect("gradient matches input shape"))
    }

    #[allow(clippy::type_complexity)]
    fn forward_raw(
        &self,
        images: &Array4<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Option<Bilinear>, (usize, usize))> {
        let (n, h, w, c) = images.dim();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel passed to encoder".into()));
        }
        let prepared = self.preprocess.apply(images, self.input_shape)?;
        let (mut act, cols) = nn::conv2d_forward(
            &prepared.data,
            n,
            3,
            self.weights.conv_weight.view(),
            &self.weights.conv_bias,
            &self.geometry,
        );
        nn::tanh_inplace(act.as_slice_mut().unwrap());
        let flat = act
            .view()
            .into_shape_with_order((n, self.geometry.out_positions() * self.weights.channels))
            .expect("flatten is a free reshape");
        let raw = nn::linear_forward(flat, self.weights.proj_weight.view(), &self.weights.proj_bias);
        Ok((raw, cols, act, prepared.resample, (h, w)))
    }

    fn forward(&self, images: Array4<f64>) -> Result<EncodeTape> {
        let n = images.dim().0;
        let (raw, cols, activations, resample, raw_shape) = self.forward_raw(&images)?;
        let raw_norms: Vec<f64> = raw.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some(bad) = raw_norms.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!("encoder produced degenerate norm {bad}")));
        }
        let mut embeddings = raw;
        for (mut row, norm) in embeddings.axis_iter_mut(Axis(0)).zip(&raw_norms) {
            row /= *norm;
        }
        Ok(EncodeTape {
            n,
            raw_shape,
            resample,
            cols,
            activations,
            raw_norms,
            embeddings,
        })
    }
}

/// Kernel size and stride of the toy encoder's convolution.
pub const TOY_KERNEL: usize = 4;
/// Feature channels of the toy encoder's convolution.
pub const TOY_CHANNELS: usize = 16;

/// Seeded stand-in for a pretrained image encoder.
///
/// Each convolution filter is zero-sum per input channel, so flat colour
/// regions contribute only through the bias and embeddings of unrelated
/// images are close to uncorrelated.
pub fn make_toy_encoder(seed: u64, input_shape: (usize, usize), embed_dim: usize) -> Result<Encoder> {
    if embed_dim < 2 {
        return Err(Error::Config(format!("embed_dim must be >= 2, got {embed_dim}")));
    }
    let (h, w) = input_shape;
    if h < TOY_KERNEL || w < TOY_KERNEL {
        return Err(Error::Config(format!(
            "toy encoder needs inputs of at least {TOY_KERNEL}x{TOY_KERNEL}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = TOY_KERNEL * TOY_KERNEL;
    let conv_std = 1.0 / (taps as f64).sqrt();
    let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
    let conv_dist = normal(conv_std);
    let mut conv_weight = Array2::from_shape_fn((taps * 3, TOY_CHANNELS), |_| conv_dist.sample(&mut rng));
    for out in 0..TOY_CHANNELS {
        for ch in 0..3 {
            let mean = (0..taps).map(|t| conv_weight[[t * 3 + ch, out]]).sum::<f64>() / taps as f64;
            for t in 0..taps {
                conv_weight[[t * 3 + ch, out]] -= mean;
            }
        }
    }
    let bias_dist = normal(0.05);
    let conv_bias = Array1::from_shape_fn(TOY_CHANNELS, |_| bias_dist.sample(&mut rng));
    let geometry = ConvGeometry::new(h, w, TOY_KERNEL, TOY_KERNEL, 0)?;
    let flat = geometry.out_positions() * TOY_CHANNELS;
    let proj_dist = normal(1.0 / (flat as f64).sqrt());
    let proj_weight = Array2::from_shape_fn((flat, embed_dim), |_| proj_dist.sample(&mut rng));
    let proj_bias = Array1::from_shape_fn(embed_dim, |_| bias_dist.sample(&mut rng));
    Encoder::new(
        format!("toy-{seed}"),
        input_shape,
        Preprocess::default(),
        EncoderWeights {
            kernel: TOY_KERNEL,
            stride: TOY_KERNEL,
            channels: TOY_CHANNELS,
            conv_weight,
            conv_bias,
            proj_weight,
            proj_bias,
        },
    )
}

/// Declarative reference to an encoder, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Toy { seed: u64 },
    Adapter { config: PathBuf },
}

impl EncoderSpec {
    /// Builds the encoder and checks it produces `embed_dim`-dimensional output.
    pub fn build(&self, input_shape: (usize, usize), embed_dim: usize) -> Result<Encoder> {
        let encoder = match self {
            EncoderSpec::Toy { seed } => make_toy_encoder(*seed, input_shape, embed_dim)?,
            EncoderSpec::Adapter { config } => load_external_encoder(config)?,
        };
        if encoder.embed_dim() != embed_dim {
            return Err(Error::Config(format!(
                "encoder '{}' has embed_dim {}, run expects {embed_dim}",
                encoder.name(),
                encoder.embed_dim()
            )));
        }
        Ok(encoder)
    }
}

/// Primary surrogate plus optional auxiliary encoders with mixing weights.
#[derive(Debug, Clone)]
pub struct SurrogateEnsemble {
    members: Vec<Encoder>,
    weights: Vec<f64>,
}

impl SurrogateEnsemble {
    pub fn single(primary: Encoder) -> Self {
        Self {
            members: vec![primary],
            weights: vec![1.0],
        }
    }

    /// Uniform weights when `weights` is `None`.
    pub fn new(primary: Encoder, auxiliaries: Vec<Encoder>, weights: Option<Vec<f64>>) -> Result<Self> {
        let mut members = vec![primary];
        members.extend(auxiliaries);
        let weights = match weights {
            Some(w) => w,
            None => vec![1.0 / members.len() as f64; members.len()],
        };
        if weights.len() != members.len() {
            return Err(Error::Config(format!(
                "{} ensemble weights for {} encoders",
                weights.len(),
                members.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("ensemble weights must be nonnegative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ensemble weights sum to {total}, expected 1")));
        }
        Ok(Self { members, weights })
    }

    pub fn primary(&self) -> &Encoder {
        &self.members[0]
    }

    pub fn auxiliaries(&self) -> &[Encoder] {
        &self.members[1..]
    }

    pub fn members(&self) -> impl Iterator<Item = (&Encoder, f64)> {
        self.members.iter().zip(self.weights.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
