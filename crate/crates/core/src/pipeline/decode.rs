use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::conditioning::{embed_style, style_from_scalar, StyleCondition};
use crate::data::GrayImage;
use crate::error::{ensure, Error, Result};
use crate::masking::{inference_masked_count, MaskedTokens};
use crate::rng::{rng_for, Rng};
use crate::transformer::{sample_tokens, ConditionedTransformer, TokenPredictor};
use crate::vq::TokenGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Number of decoding steps.
    pub steps: usize,
    /// 0 picks the argmax at every position.
    pub temperature: f64,
    pub seed: u64,
    /// Style scalar `s`, blending `anchors.0` (at 0) into `anchors.1` (at 1).
    pub style: f64,
    pub anchors: (usize, usize),
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { steps: 8, temperature: 0.0, seed: 0, style: 0.0, anchors: (0, 1) }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("decoding needs at least one step".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be finite and nonnegative", self.temperature)));
        }
        Ok(())
    }
}

/// Decodes from a fully masked grid. At the step for time `t` the predictor
/// scores the current grid, and the most confident masked positions (lowest
/// index on ties) are committed until `inference_masked_count(t - 1)`
/// remain. `on_step(t, grid)` sees the grid after each step.
pub fn iterative_decode_with(
    predictor: &dyn TokenPredictor,
    steps: usize,
    temperature: f64,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, &MaskedTokens),
) -> Result<TokenGrid> {
    ensure!(steps >= 1, "decoding needs at least one step");
    let (h, w) = predictor.grid();
    let (n, vocab) = (h * w, predictor.vocab());
    let mut cur = MaskedTokens::fully_masked(n);
    for t in (1..=steps).rev() {
        let logits = predictor.predict(&cur)?;
        ensure!(logits.len() == n && logits.vocab == vocab, "predictor returned {} rows of {} for a {n} x {vocab} grid", logits.len(), logits.vocab);
        let (tokens, conf) = sample_tokens(&logits, temperature, rng)?;
        let keep_masked = inference_masked_count(t - 1, steps, n)?;
        let mut open: Vec<usize> = (0..n).filter(|&i| cur.mask()[i]).collect();
        // stable sort keeps index order among equal confidences
        open.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
        let reveal = open.len().saturating_sub(keep_masked);
        for &i in &open[..reveal] {
            cur.reveal(i, tokens.indices()[i])?;
        }
        on_step(t, &cur);
    }
    let idx = cur.values().iter().map(|&v| v as usize).collect();
    TokenGrid::new(idx, h, w, vocab)
}

pub fn iterative_decode(predictor: &dyn TokenPredictor, steps: usize, temperature: f64, rng: &mut Rng) -> Result<TokenGrid> {
    iterative_decode_with(predictor, steps, temperature, rng, |_, _| {})
}

/// Photo to sketch at style `cfg.style`.
pub fn synthesize(model: &Model, photo: &GrayImage, cfg: &InferenceConfig) -> Result<GrayImage> {
    let cond = style_from_scalar(cfg.style, cfg.anchors.0, cfg.anchors.1, model.transformer.config.num_styles)?;
    synthesize_with(model, photo, &cond, cfg)
}

/// Photo to sketch under an arbitrary anchor mixture; `cfg.style` is unused.
pub fn synthesize_with(model: &Model, photo: &GrayImage, cond: &StyleCondition, cfg: &InferenceConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let tf = &model.transformer;
    let feats = model.encoder.extract(photo)?;
    let context = tf.photo_context(&feats)?;
    let style = embed_style(cond, tf.style_anchors())?;
    let predictor = ConditionedTransformer { model: tf, photo: &context, style: &style };
    let mut rng = rng_for(cfg.seed, "decode");
    let grid = iterative_decode(&predictor, cfg.steps, cfg.temperature, &mut rng)?;
    model.codec.decode(&grid)
}

/// Decodes a uniformly random token grid, the no-information reference.
pub fn random_token_baseline(model: &Model, rng: &mut Rng) -> Result<GrayImage> {
    let c = &model.codec.config;
    let idx = (0..c.tokens()).map(|_| rng.random_range(0..c.codebook_size)).collect();
    model.codec.decode(&TokenGrid::new(idx, c.grid_h, c.grid_w, c.codebook_size)?)
}
