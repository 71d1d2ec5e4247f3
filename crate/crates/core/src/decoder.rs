//! Embedding-conditioned noise decoder and adversarial composition.
//!
//! Architecture: linear expansion of the embedding to a `H/4 × W/4` grid,
//! two stride-2 transposed-convolution upsampling blocks, then
//! `ε · tanh(·)`. The final squash keeps `‖δ‖∞ ≤ ε` for any weights.

use ndarray::{Array1, Array2, Array4, ArrayView4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::tensor::{EmbeddingBatch, ImageBatch};

/// Default ℓ∞ budget in pixel units.
pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;

const UPSAMPLE_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
    pub epsilon: f64,
    /// Channels of the coarse `H/4 × W/4` grid.
    pub grid_channels: usize,
    /// Channels after the first upsampling block.
    pub hidden_channels: usize,
}

impl DecoderConfig {
    pub fn new(embed_dim: usize, height: usize, width: usize) -> Self {
        Self {
            embed_dim,
            height,
            width,
            epsilon: DEFAULT_EPSILON,
            grid_channels: 32,
            hidden_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.grid_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.height < 4 || self.width < 4 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "decoder output {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    fn geometries(&self) -> (ConvGeometry, ConvGeometry) {
        let (gh, gw) = self.grid();
        let first = ConvGeometry::new(2 * gh, 2 * gw, UPSAMPLE_KERNEL, 2, 1).expect("valid by construction");
        let second = ConvGeometry::new(self.height, self.width, UPSAMPLE_KERNEL, 2, 1).expect("valid by construction");
        (first, second)
    }
}

/// Trainable tensors of the decoder (also used to hold their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `(embed_dim, grid_h·grid_w·grid_channels)`
    pub expand_weight: Array2<f64>,
    pub expand_bias: Array1<f64>,
    /// `(grid_channels, 16·hidden_channels)`
    pub up1_weight: Array2<f64>,
    pub up1_bias: Array1<f64>,
    /// `(hidden_channels, 16·3)`
    pub up2_weight: Array2<f64>,
    pub up2_bias: Array1<f64>,
}

impl DecoderParams {
    pub const NAMES: [&'static str; 6] = [
        "expand.weight",
        "expand.bias",
        "up1.weight",
        "up1.bias",
        "up2.weight",
        "up2.bias",
    ];

    pub fn zeros(config: &DecoderConfig) -> Self {
        let shapes = Self::shapes(config);
        let m = |i: usize| Array2::zeros((shapes[i][0], shapes[i][1]));
        let v = |i: usize| Array1::zeros(shapes[i][0]);
        Self {
            expand_weight: m(0),
            expand_bias: v(1),
            up1_weight: m(2),
            up1_bias: v(3),
            up2_weight: m(4),
            up2_bias: v(5),
        }
    }

    pub fn shapes(config: &DecoderConfig) -> [Vec<usize>; 6] {
        let (gh, gw) = config.grid();
        let taps = UPSAMPLE_KERNEL * UPSAMPLE_KERNEL;
        [
            vec![config.embed_dim, gh * gw * config.grid_channels],
            vec![gh * gw * config.grid_channels],
            vec![config.grid_channels, taps * config.hidden_channels],
            vec![config.hidden_channels],
            vec![config.hidden_channels, taps * 3],
            vec![3],
        ]
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.expand_weight.as_slice().unwrap(),
            self.expand_bias.as_slice().unwrap(),
            self.up1_weight.as_slice().unwrap(),
            self.up1_bias.as_slice().unwrap(),
            self.up2_weight.as_slice().unwrap(),
            self.up2_bias.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.expand_weight.as_slice_mut().unwrap(),
            self.expand_bias.as_slice_mut().unwrap(),
            self.up1_weight.as_slice_mut().unwrap(),
            self.up1_bias.as_slice_mut().unwrap(),
            self.up2_weight.as_slice_mut().unwrap(),
            self.up2_bias.as_slice_mut().unwrap(),
        ]
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &DecoderParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// ℓ∞-bounded noise maps, `n × H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    data: Array4<f64>,
    epsilon: f64,
}

impl NoiseBatch {
    pub fn new(data: Array4<f64>, epsilon: f64) -> Result<Self> {
        if data.dim().3 != 3 {
            return Err(Error::Dimension(format!("noise must have 3 channels, got {:?}", data.dim())));
        }
        let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(peak <= epsilon + 1e-9) {
            return Err(Error::InvalidInput(format!("noise magnitude {peak} exceeds budget {epsilon}")));
        }
        Ok(Self { data, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    /// `max |δ|` over all entries.
    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Forward-pass intermediates for [`Decoder::backward`].
pub struct DecodeTape {
    embeddings: Array2<f64>,
    grid_pre: Array2<f64>,
    grid: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    squashed: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    params: DecoderParams,
}

impl Decoder {
    /// Freshly initialised decoder with weights drawn from `seed`.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = DecoderParams::zeros(&config);
        let fan_ins = [config.embed_dim, config.grid_channels * 4, config.hidden_channels * 4];
        let targets = [
            &mut params.expand_weight,
            &mut params.up1_weight,
            &mut params.up2_weight,
        ];
        for (w, fan_in) in targets.into_iter().zip(fan_ins) {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DecoderConfig, params: DecoderParams) -> Result<Self> {
        config.validate()?;
        let expected = DecoderParams::shapes(&config);
        for ((name, slice), shape) in DecoderParams::NAMES.iter().zip(params.slices()).zip(&expected) {
            if slice.len() != shape.iter().product::<usize>() {
                return Err(Error::Dimension(format!("{name} has {} values, expected shape {shape:?}", slice.len())));
            }
        }
        if params.expand_weight.dim() != (expected[0][0], expected[0][1])
            || params.up1_weight.dim() != (expected[2][0], expected[2][1])
            || params.up2_weight.dim() != (expected[4][0], expected[4][1])
        {
            return Err(Error::Dimension("decoder weight matrices have wrong shapes".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }

    pub fn params(&self) -> &DecoderParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DecoderParams {
        &mut self.params
    }

    /// Same weights under a different budget.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let config = DecoderConfig { epsilon, ..self.config };
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    pub fn decode(&self, embeddings: &EmbeddingBatch) -> Result<NoiseBatch> {
        let (noise, _) = self.decode_with_tape(embeddings)?;
        Ok(noise)
    }

    pub fn decode_with_tape(&self, embeddings: &EmbeddingBatch) -> Result<(NoiseBatch, DecodeTape)> {
        if embeddings.dim() != self.config.embed_dim {
            return Err(Error::Dimension(format!(
                "decoder expects {}-dim embeddings, got {}",
                self.config.embed_dim,
                embeddings.dim()
            )));
        }
        let n = embeddings.len();
        let c = &self.config;
        let p = &self.params;
        let (geo1, geo2) = c.geometries();

        let grid_pre = nn::linear_forward(embeddings.view(), p.expand_weight.view(), &p.expand_bias);
        let mut grid = grid_pre.clone();
        nn::silu_inplace(grid.as_slice_mut().unwrap());
        let grid_rows = grid
            .view()
            .into_shape_with_order((n * geo1.out_positions(), c.grid_channels))
            .expect("free reshape");

        let hidden_pre =
            nn::conv_transpose2d_forward(grid_rows, n, c.hidden_channels, p.up1_weight.view(), &p.up1_bias, &geo1);
        let mut hidden = hidden_pre.clone();
        nn::silu_inplace(hidden.as_slice_mut().unwrap());

        let mut squashed = nn::conv_transpose2d_forward(hidden.view(), n, 3, p.up2_weight.view(), &p.up2_bias, &geo2);
        nn::tanh_inplace(squashed.as_slice_mut().unwrap());

        let eps = c.epsilon;
        let noise: Vec<f64> = squashed.iter().map(|t| eps * t).collect();
        let data = Array4::from_shape_vec((n, c.height, c.width, 3), noise).expect("decoder output shape");
        let tape = DecodeTape {
            embeddings: embeddings.view().to_owned(),
            grid_pre,
            grid,
            hidden_pre,
            hidden,
            squashed,
        };
        Ok((NoiseBatch { data, epsilon: eps }, tape))
    }

    /// Parameter gradients of a scalar loss given `dL/dδ`.
    pub fn backward(&self, tape: &DecodeTape, grad_noise: ArrayView4<f64>) -> Result<DecoderParams> {
        let n = tape.embeddings.nrows();
        let c = &self.config;
        if grad_noise.dim() != (n, c.height, c.width, 3) {
            return Err(Error::Dimension(format!(
                "noise gradient {:?} does not match decoder output",
                grad_noise.dim()
            )));
        }
        let p = &self.params;
        let (geo1, geo2) = c.geometries();

        let grad_noise = grad_noise.as_standard_layout();
        let grad_flat = grad_noise.view().into_shape_with_order(tape.squashed.dim()).expect("free reshape");
        let mut grad_out = Array2::<f64>::zeros(tape.squashed.dim());
        Zip::from(&mut grad_out)
            .and(&tape.squashed)
            .and(&grad_flat)
            .for_each(|g, &t, &gn| *g = c.epsilon * gn * (1.0 - t * t));

        let (d_up2_w, d_up2_b, d_hidden) =
            nn::conv_transpose2d_backward(grad_out.view(), tape.hidden.view(), p.up2_weight.view(), n, 3, &geo2, true);
        let mut d_hidden = d_hidden.expect("requested");
        nn::silu_backward(tape.hidden_pre.as_slice().unwrap(), d_hidden.as_slice_mut().unwrap());

        let grid_rows = tape
            .grid
            .view()
            .into_shape_with_order((n * geo1.out_positions(), c.grid_channels))
            .expect("free reshape");
        let (d_up1_w, d_up1_b, d_grid) = nn::conv_transpose2d_backward(
            d_hidden.view(),
            grid_rows,
            p.up1_weight.view(),
            n,
            c.hidden_channels,
            &geo1,
            true,
        );
        let mut d_grid = d_grid
            .expect("requested")
            .into_shape_with_order(tape.grid_pre.dim())
            .expect("free reshape");
        nn::silu_backward(tape.grid_pre.as_slice().unwrap(), d_grid.as_slice_mut().unwrap());
        let (d_exp_w, d_exp_b, _) = nn::linear_backward(tape.embeddings.view(), p.expand_weight.view(), d_grid.view(), false);

        Ok(DecoderParams {
            expand_weight: d_exp_w,
            expand_bias: d_exp_b,
            up1_weight: d_up1_w,
            up1_bias: d_up1_b,
            up2_weight: d_up2_w,
            up2_bias: d_up2_b,
        })
    }
}

/// `clamp(clean + δ, 0, 1)`.
pub fn compose_adversarial(noise: &NoiseBatch, clean: &ImageBatch) -> Result<ImageBatch> {
    compose_with_mask(noise, clean).map(|(img, _)| img)
}

/// Composition plus the pass-through mask of the clamp: `1` where the sum
/// stayed inside `[0, 1]`, `0` where it was clamped.
pub fn compose_with_mask(noise: &NoiseBatch, clean: &ImageBatch) -> Result<(ImageBatch, Array4<f64>)> {
    if noise.view().dim() != clean.view().dim() {
        return Err(Error::Dimension(format!(
            "noise {:?} vs clean images {:?}",
            noise.view().dim(),
            clean.view().dim()
        )));
    }
    let mut out = clean.view().to_owned();
    let mut mask = Array4::<f64>::ones(out.dim());
    Zip::from(&mut out)
        .and(&mut mask)
        .and(noise.view())
        .for_each(|x, m, &d| {
            let s = *x + d;
            if s < 0.0 {
                *x = 0.0;
                *m = 0.0;
            } else if s > 1.0 {
                *x = 1.0;
                *m = 0.0;
            } else {
                *x = s;
            }
        });
    Ok((ImageBatch::from_trusted(out), mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn embeddings(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingBatch::normalized(Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn zero_budget_gives_zero_noise() {
        let mut cfg = DecoderConfig::new(8, 8, 8);
        cfg.epsilon = 0.0;
        let dec = Decoder::init(cfg, 1).unwrap();
        let noise = dec.decode(&embeddings(3, 8, 2)).unwrap();
        assert!(noise.view().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn default_budget_is_respected() {
        let dec = Decoder::init(DecoderConfig::new(8, 16, 12), 5).unwrap();
        let noise = dec.decode(&embeddings(4, 8, 9)).unwrap();
        assert_eq!(noise.view().dim(), (4, 16, 12, 3));
        assert!(noise.linf() <= 16.0 / 255.0);
    }

    #[test]
    fn identical_rows_give_identical_noise() {
        let dec = Decoder::init(DecoderConfig::new(8, 8, 8), 5).unwrap();
        let z = embeddings(1, 8, 4).select(&[0, 0]);
        let noise = dec.decode(&z).unwrap();
        let v = noise.view();
        assert_eq!(v.index_axis(ndarray::Axis(0), 0), v.index_axis(ndarray::Axis(0), 1));
    }

    #[test]
    fn wrong_embedding_dim_is_rejected() {
        let dec = Decoder::init(DecoderConfig::new(8, 8, 8), 5).unwrap();
        assert!(matches!(dec.decode(&embeddings(2, 6, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn budget_scaling_is_the_last_step() {
        let dec = Decoder::init(DecoderConfig::new(8, 8, 8), 5).unwrap();
        let z = embeddings(3, 8, 1);
        let a = dec.decode(&z).unwrap();
        let b = dec.with_epsilon(0.01).unwrap().decode(&z).unwrap();
        let ratio = dec.epsilon() / 0.01;
        for (x, y) in a.view().iter().zip(b.view()) {
            assert!((x - ratio * y).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_clamps_and_preserves_identity() {
        let clean = ImageBatch::new(Array4::from_shape_fn((1, 4, 4, 3), |(_, i, j, c)| {
            ((i * 4 + j) * 3 + c) as f64 / 47.0
        }))
        .unwrap();
        let zero = NoiseBatch::new(Array4::zeros((1, 4, 4, 3)), 0.1).unwrap();
        assert_eq!(compose_adversarial(&zero, &clean).unwrap(), clean);

        let eps = 16.0 / 255.0;
        let white = ImageBatch::new(Array4::ones((1, 4, 4, 3))).unwrap();
        let push = NoiseBatch::new(Array4::from_elem((1, 4, 4, 3), eps), eps).unwrap();
        let (out, mask) = compose_with_mask(&push, &white).unwrap();
        assert!(out.view().iter().all(|v| *v == 1.0));
        assert!(mask.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn composition_rejects_shape_mismatch() {
        let clean = ImageBatch::new(Array4::zeros((2, 4, 4, 3))).unwrap();
        let noise = NoiseBatch::new(Array4::zeros((1, 4, 4, 3)), 0.1).unwrap();
        assert!(matches!(compose_adversarial(&noise, &clean), Err(Error::Dimension(_))));
    }

    #[test]
    fn noise_batch_rejects_budget_violation() {
        assert!(NoiseBatch::new(Array4::from_elem((1, 2, 2, 3), 0.2), 0.1).is_err());
    }
}
