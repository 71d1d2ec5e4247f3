//! Training objectives over paired embedding batches.
//!
//! All three losses take the target embeddings `z` and the adversarial
//! embeddings `z_adv` (both `n × d`, unit rows) and return their value
//! together with `∂L/∂z_adv` when asked.

use ndarray::{Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::SurrogateEnsemble;
use crate::error::{Error, Result};
use crate::tensor::{EmbeddingBatch, ImageBatch};

/// Allowed deviation of an input row norm from 1.
pub const ROW_NORM_TOLERANCE: f64 = 1e-4;

/// Geometric temperature decay `τ(t) = τ₀ (τ_final / τ₀)^(t / T)`, held at
/// `τ_final` after the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_final: f64,
    pub horizon: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            tau_final: 0.07,
            horizon: 10_000,
        }
    }
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, tau_final: f64, horizon: u64) -> Result<Self> {
        let s = Self {
            tau0,
            tau_final,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t.is_finite() && t > 0.0;
        if !ok(self.tau0) || !ok(self.tau_final) || self.horizon == 0 {
            return Err(Error::Config(format!(
                "temperature schedule needs positive tau0, tau_final and horizon, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Decay rate `λ = ln(τ₀ / τ_final) / T`.
    pub fn lambda(&self) -> f64 {
        (self.tau0 / self.tau_final).ln() / self.horizon as f64
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::InvalidInput(format!("temperature step must be finite and >= 0, got {t}")));
        }
        let horizon = self.horizon as f64;
        if t >= horizon {
            return Ok(self.tau_final);
        }
        Ok(self.tau0 * (self.tau_final / self.tau0).powf(t / horizon))
    }

    pub fn at_step(&self, step: u64) -> f64 {
        self.at(step as f64).expect("integer steps are valid")
    }
}

/// A scalar loss with optional per-sample breakdown (`value` is their mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub batch_size: usize,
    pub per_sample_terms: Option<Vec<f64>>,
}

impl LossValue {
    fn from_terms(terms: Vec<f64>) -> Self {
        let n = terms.len();
        Self {
            value: terms.iter().sum::<f64>() / n as f64,
            batch_size: n,
            per_sample_terms: Some(terms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// One-directional InfoNCE with in-batch negatives.
    Contrastive,
    /// Mean of the `z → z_adv` and `z_adv → z` InfoNCE terms.
    Bidirectional,
    /// `1 − mean cosine` between paired rows.
    Cosine,
}

impl Objective {
    pub fn evaluate(self, z: &EmbeddingBatch, z_adv: &EmbeddingBatch, tau: f64) -> Result<LossValue> {
        self.evaluate_with_grad(z, z_adv, tau).map(|(l, _)| l)
    }

    /// Loss and `∂L/∂z_adv`.
    pub fn evaluate_with_grad(
        self,
        z: &EmbeddingBatch,
        z_adv: &EmbeddingBatch,
        tau: f64,
    ) -> Result<(LossValue, Array2<f64>)> {
        check_pair(z, z_adv)?;
        match self {
            Objective::Contrastive => infonce(z.view(), z_adv.view(), checked_tau(tau)?, false),
            Objective::Bidirectional => infonce(z.view(), z_adv.view(), checked_tau(tau)?, true),
            Objective::Cosine => Ok(cosine(z.view(), z_adv.view())),
        }
    }
}

pub fn contrastive_loss(z: &EmbeddingBatch, z_adv: &EmbeddingBatch, tau: f64) -> Result<LossValue> {
    Objective::Contrastive.evaluate(z, z_adv, tau)
}

pub fn bidirectional_infonce(z: &EmbeddingBatch, z_adv: &EmbeddingBatch, tau: f64) -> Result<LossValue> {
    Objective::Bidirectional.evaluate(z, z_adv, tau)
}

pub fn cosine_loss(z: &EmbeddingBatch, z_adv: &EmbeddingBatch) -> Result<LossValue> {
    Objective::Cosine.evaluate(z, z_adv, 1.0)
}

fn checked_tau(tau: f64) -> Result<f64> {
    if tau.is_finite() && tau > 0.0 {
        Ok(tau)
    } else {
        Err(Error::Contract(format!("temperature must be positive and finite, got {tau}")))
    }
}

fn check_pair(z: &EmbeddingBatch, z_adv: &EmbeddingBatch) -> Result<()> {
    if z.view().dim() != z_adv.view().dim() {
        return Err(Error::Contract(format!(
            "embedding shapes differ: {:?} vs {:?}",
            z.view().dim(),
            z_adv.view().dim()
        )));
    }
    for (label, batch) in [("z", z), ("z_adv", z_adv)] {
        let dev = batch.max_norm_deviation();
        if dev > ROW_NORM_TOLERANCE {
            return Err(Error::Contract(format!(
                "{label} rows must be unit-norm (max deviation {dev:.3e})"
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax of `logits` and the per-row log-sum-exp.
fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut probs = logits.clone();
    let mut lse = Vec::with_capacity(logits.nrows());
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        lse.push(max + sum.ln());
    }
    (probs, lse)
}

fn infonce(z: ArrayView2<f64>, z_adv: ArrayView2<f64>, tau: f64, bidirectional: bool) -> Result<(LossValue, Array2<f64>)> {
    let n = z.nrows();
    let logits = z.dot(&z_adv.t()) / tau;
    let (p_fwd, lse_fwd) = softmax_rows(&logits);
    let mut terms: Vec<f64> = (0..n).map(|i| lse_fwd[i] - logits[[i, i]]).collect();

    // dL/dlogits, then dL/dz_adv = dlogitsᵀ z / τ
    let mut dlogits = p_fwd;
    for i in 0..n {
        dlogits[[i, i]] -= 1.0;
    }
    let scale = if bidirectional {
        let logits_t = logits.t().to_owned();
        let (mut p_bwd, lse_bwd) = softmax_rows(&logits_t);
        for i in 0..n {
            terms[i] = 0.5 * (terms[i] + lse_bwd[i] - logits_t[[i, i]]);
            p_bwd[[i, i]] -= 1.0;
        }
        dlogits += &p_bwd.t();
        0.5 / n as f64
    } else {
        1.0 / n as f64
    };
    let grad = dlogits.t().dot(&z) * (scale / tau);
    let loss = LossValue::from_terms(terms);
    if !loss.value.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite InfoNCE value at tau {tau}")));
    }
    Ok((loss, grad))
}

fn cosine(z: ArrayView2<f64>, z_adv: ArrayView2<f64>) -> (LossValue, Array2<f64>) {
    let n = z.nrows();
    let terms = z
        .rows()
        .into_iter()
        .zip(z_adv.rows())
        .map(|(a, b)| 1.0 - a.dot(&b))
        .collect();
    (LossValue::from_terms(terms), z.to_owned() * (-1.0 / n as f64))
}

/// Weighted sum over ensemble members of `objective(E_k(targets), E_k(adversarial))`.
pub fn ensemble_loss(
    ensemble: &SurrogateEnsemble,
    targets: &ImageBatch,
    adversarial: &ImageBatch,
    objective: Objective,
    tau: f64,
) -> Result<LossValue> {
    let mut total: Option<LossValue> = None;
    for (encoder, weight) in ensemble.members() {
        if weight == 0.0 {
            continue;
        }
        let z = encoder.encode(targets)?;
        let z_adv = encoder.encode(adversarial)?;
        accumulate(&mut total, objective.evaluate(&z, &z_adv, tau)?, weight);
    }
    Ok(total.expect("ensemble weights sum to one"))
}

/// [`ensemble_loss`] plus its gradient w.r.t. the adversarial pixels.
pub fn ensemble_loss_with_grad(
    ensemble: &SurrogateEnsemble,
    targets: &ImageBatch,
    adversarial: &ImageBatch,
    objective: Objective,
    tau: f64,
) -> Result<(LossValue, Array4<f64>)> {
    let mut total: Option<LossValue> = None;
    let mut grad = Array4::<f64>::zeros(adversarial.view().dim());
    for (encoder, weight) in ensemble.members() {
        if weight == 0.0 {
            continue;
        }
        let z = encoder.encode(targets)?;
        let (z_adv, tape) = encoder.encode_with_tape(adversarial)?;
        let (loss, d_adv) = objective.evaluate_with_grad(&z, &z_adv, tau)?;
        grad.scaled_add(weight, &encoder.backward(&tape, d_adv.view())?);
        accumulate(&mut total, loss, weight);
    }
    Ok((total.expect("ensemble weights sum to one"), grad))
}

fn accumulate(total: &mut Option<LossValue>, loss: LossValue, weight: f64) {
    let scaled_terms: Option<Vec<f64>> = loss
        .per_sample_terms
        .as_ref()
        .map(|t| t.iter().map(|v| weight * v).collect());
    match total {
        None => {
            *total = Some(LossValue {
                value: weight * loss.value,
                batch_size: loss.batch_size,
                per_sample_terms: scaled_terms,
            })
        }
        Some(acc) => {
            acc.value += weight * loss.value;
            if let (Some(a), Some(b)) = (acc.per_sample_terms.as_mut(), scaled_terms) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }
}
