//! Whole-stage drivers shared by the command line and the test suites.

use super::{finetune, prepare, pretrain_transformer, synthesize_with, Model, Stage, StepMetrics};
use crate::config::RunConfig;
use crate::conditioning::StyleCondition;
use crate::data::{ssim, GrayImage, PhotoSketchPair};
use crate::error::{Error, Result};
use crate::losses::{pixel_loss, PixelNorm};
use crate::rng::rng_for;
use crate::vq::train_vq_stage0;

/// Stage 0 on the sketches of the given pairs, wrapped into a fresh model.
pub fn run_codec_stage(cfg: &RunConfig, pairs: &[PhotoSketchPair], mut on_step: impl FnMut(&StepMetrics)) -> Result<Model> {
    cfg.validate()?;
    let sketches: Vec<GrayImage> = pairs.iter().map(|p| p.sketch.clone()).collect();
    let seed = cfg.stage_seed(Stage::Codec);
    let codec = train_vq_stage0::<f32>(&sketches, cfg.codec.clone(), &cfg.training.codec, seed, |l| {
        on_step(&StepMetrics { step: l.step, stage: Stage::Codec, mim: 0.0, pixel: l.reconstruction, perceptual: 0.0, total: l.total() })
    })?;
    let mut model = Model::with_codec(cfg.model_config(), codec, seed)?;
    model.completed = Some(Stage::Codec);
    Ok(model)
}

pub fn run_pretrain_stage(cfg: &RunConfig, model: Model, pairs: &[PhotoSketchPair], on_step: impl FnMut(&StepMetrics)) -> Result<Model> {
    check_model(cfg, &model)?;
    let data = prepare(&model, pairs)?;
    Ok(pretrain_transformer(model, &data, &cfg.train_config(Stage::Pretrain), &cfg.losses, on_step)?.model)
}

pub fn run_finetune_stage(cfg: &RunConfig, model: Model, pairs: &[PhotoSketchPair], on_step: impl FnMut(&StepMetrics)) -> Result<Model> {
    check_model(cfg, &model)?;
    let data = prepare(&model, pairs)?;
    Ok(finetune(model, &data, &cfg.train_config(Stage::Finetune), &cfg.losses, on_step)?.model)
}

fn check_model(cfg: &RunConfig, model: &Model) -> Result<()> {
    cfg.validate()?;
    if model.config != cfg.model_config() {
        return Err(Error::Config("checkpoint architecture differs from the run configuration".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub mean_ssim: f64,
    pub mean_pixel: f64,
    /// Mean SSIM of decoded uniform random token grids against the same
    /// targets.
    pub baseline_ssim: f64,
}

/// Synthesizes each pair's sketch in its own style and compares it with the
/// target.
pub fn evaluate(cfg: &RunConfig, model: &Model, pairs: &[PhotoSketchPair]) -> Result<(EvalReport, Vec<GrayImage>)> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation needs at least one pair".into()));
    }
    let k = model.config.transformer.num_styles;
    let mut rng = rng_for(cfg.seed, "baseline");
    let (mut s, mut p, mut b) = (0.0, 0.0, 0.0);
    let mut outputs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let out = synthesize_with(model, &pair.photo, &StyleCondition::one_hot(pair.style, k)?, &cfg.inference)?;
        s += ssim(&out, &pair.sketch)?;
        p += pixel_loss(&out, &pair.sketch, PixelNorm::Mean)?;
        b += ssim(&super::random_token_baseline(model, &mut rng)?, &pair.sketch)?;
        outputs.push(out);
    }
    let n = pairs.len() as f64;
    Ok((EvalReport { pairs: pairs.len(), mean_ssim: s / n, mean_pixel: p / n, baseline_ssim: b / n }, outputs))
}
