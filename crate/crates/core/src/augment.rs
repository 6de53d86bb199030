//! Compositional Mixup over query sets.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::dataset::{Composition, Dataset};
use crate::diffcore::{Tensor, TensorError};
use crate::sampler::Episode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("mixup alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("composition ({0}, {1}) is outside the episode grid")]
    OutsideEpisode(usize, usize),
    #[error("query set has {0} samples, mixup needs at least 2")]
    QueryTooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(AugmentError::InvalidAlpha(self.alpha))
        }
    }
}

/// `λ ~ Beta(α, α)`.
pub fn sample_lambda<R: Rng>(cfg: &MixupConfig, rng: &mut R) -> Result<f64, AugmentError> {
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|_| AugmentError::InvalidAlpha(cfg.alpha))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `λ x_i + (1 − λ) x_j`.
pub fn mix_images(x_i: &Tensor, x_j: &Tensor, lambda: f64) -> Result<Tensor, AugmentError> {
    Ok(x_i.zip_map(x_j, |a, b| lambda * a + (1.0 - lambda) * b)?)
}

/// Soft label over the episode grid: `λ²` on `c_i`, `λ(1−λ)` on
/// `(p¹ᵢ, p²ⱼ)` and `(p¹ⱼ, p²ᵢ)`, `(1−λ)²` on `c_j`. Coinciding cells
/// accumulate.
pub fn mix_labels(episode: &Episode, c_i: Composition, c_j: Composition, lambda: f64) -> Result<Tensor, AugmentError> {
    let mut label = Tensor::zeros(&[episode.grid_size()]);
    let mu = 1.0 - lambda;
    for (c, w) in [
        (c_i, lambda * lambda),
        (Composition::new(c_i.p1, c_j.p2), lambda * mu),
        (Composition::new(c_j.p1, c_i.p2), lambda * mu),
        (c_j, mu * mu),
    ] {
        let k = episode.grid_index(c).ok_or(AugmentError::OutsideEpisode(c.p1, c.p2))?;
        label.data_mut()[k] += w;
    }
    Ok(label)
}

/// One augmented query item.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedQuery {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub image: Tensor,
    pub label: Tensor,
}

/// Mixes every query item `i` with a partner `j ≠ i` drawn uniformly, with
/// a fresh `λ` per pair.
pub fn augment_query<R: Rng>(
    ds: &Dataset,
    episode: &Episode,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<Vec<MixedQuery>, AugmentError> {
    let q = &episode.query;
    if q.len() < 2 {
        return Err(AugmentError::QueryTooSmall(q.len()));
    }
    let mut out = Vec::with_capacity(q.len());
    for (i, &(si, ci)) in q.iter().enumerate() {
        let mut j = rng.random_range(0..q.len() - 1);
        if j >= i {
            j += 1;
        }
        let (sj, cj) = q[j];
        let lambda = sample_lambda(cfg, rng)?;
        let image = mix_images(&ds.sample(si).image, &ds.sample(sj).image, lambda)?;
        let label = mix_labels(episode, ci, cj, lambda)?;
        out.push(MixedQuery { i, j, lambda, image, label });
    }
    Ok(out)
}
