//! Mask schedules, training-mask sampling and sentinel substitution.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::vq::TokenGrid;

/// Interface value marking a masked position.
pub const MASK_SENTINEL: i64 = -100;

/// Latent tokens with masked positions replaced by [`MASK_SENTINEL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    values: Vec<i64>,
    mask: Vec<bool>,
}

impl MaskedTokens {
    /// Every position masked: the starting state of iterative decoding.
    pub fn fully_masked(n: usize) -> Self {
        Self { values: vec![MASK_SENTINEL; n], mask: vec![true; n] }
    }

    /// Builds from raw values; positions holding the sentinel are masked.
    pub fn from_values(values: Vec<i64>, vocab: usize) -> Result<Self> {
        for &v in &values {
            ensure!(v == MASK_SENTINEL || (0..vocab as i64).contains(&v), "token value {v} outside [0, {vocab}) and not the mask sentinel");
        }
        let mask = values.iter().map(|&v| v == MASK_SENTINEL).collect();
        Ok(Self { values, mask })
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Commits `token` at a masked position.
    pub fn reveal(&mut self, pos: usize, token: usize) -> Result<()> {
        ensure!(self.mask[pos], "position {pos} is already revealed");
        self.values[pos] = token as i64;
        self.mask[pos] = false;
        Ok(())
    }
}

/// Masked-ratio draw for one training example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskScheduleSample {
    pub r: f64,
    pub ratio: f64,
    pub masked: usize,
}

/// Cosine schedule `R = cos(pi * r / 2)`.
pub fn cosine_ratio(r: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&r), "schedule input {r} outside [0, 1]");
    Ok((std::f64::consts::FRAC_PI_2 * r).cos().clamp(0.0, 1.0))
}

/// Draws `r ~ U(0,1)` and the masked count `round(R*N)` clamped to `[1, N]`.
pub fn sample_ratio(n: usize, rng: &mut Rng) -> MaskScheduleSample {
    let r: f64 = rng.random::<f64>();
    let ratio = cosine_ratio(r).expect("uniform draw lies in [0, 1)");
    let masked = ((ratio * n as f64).round() as usize).clamp(1, n.max(1));
    MaskScheduleSample { r, ratio, masked }
}

/// Training mask: `M` positions chosen uniformly without replacement.
pub fn sample_training_mask(n: usize, rng: &mut Rng) -> Result<Vec<bool>> {
    ensure!(n >= 1, "cannot mask an empty token grid");
    let draw = sample_ratio(n, rng);
    let mut mask = vec![false; n];
    for i in sample(rng, n, draw.masked) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Sentinel substitution: `z_i` where the mask is off, the sentinel where on.
pub fn apply_mask(z: &TokenGrid, mask: &[bool]) -> Result<MaskedTokens> {
    ensure!(z.len() == mask.len(), "mask length {} != token count {}", mask.len(), z.len());
    let values = z.indices().iter().zip(mask).map(|(&t, &m)| if m { MASK_SENTINEL } else { t as i64 }).collect();
    Ok(MaskedTokens { values, mask: mask.to_vec() })
}

/// Positions still masked after decoding down to time `t` out of `steps`:
/// `min(N, ceil(N * sin(pi * t / (2 * steps))))`.
pub fn inference_masked_count(t: usize, steps: usize, n: usize) -> Result<usize> {
    ensure!(steps >= 1, "decoding needs at least one step");
    ensure!(t <= steps, "time {t} beyond {steps} steps");
    if t == steps {
        return Ok(n);
    }
    let frac = (std::f64::consts::PI * t as f64 / (2.0 * steps as f64)).sin();
    Ok(((n as f64 * frac).ceil() as usize).min(n))
}
