//! Two-stage transformer training on top of a trained codec, iterative
//! decoding, and checkpoint persistence.

mod checkpoint;
mod decode;
mod run;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use decode::{iterative_decode, iterative_decode_with, random_token_baseline, synthesize, synthesize_with, InferenceConfig};
pub use run::{evaluate, run_codec_stage, run_finetune_stage, run_pretrain_stage, EvalReport};

use crate::conditioning::{EncoderConfig, FeatureEncoder};
use crate::data::PhotoSketchPair;
use crate::error::{ensure, Error, Result};
use crate::losses::{mim_loss, perceptual_loss_var, pixel_loss_var, total_objective, LossConfig};
use crate::masking::{apply_mask, sample_training_mask, MaskedTokens};
use crate::rng::step_rng;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};
use crate::transformer::{PhotoContext, Transformer, TransformerConfig, TransformerShape};
use crate::vq::{images_var, TokenGrid, VqCodec, VqConfig};
use crate::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Codec training on sketches.
    Codec,
    /// Transformer trained on the masked-token loss alone.
    Pretrain,
    /// Transformer and decoder trained on the full objective.
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Architecture of every model component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub codec: VqConfig,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.encoder.validate()?;
        self.transformer.validate()?;
        if self.codec.resolution != self.encoder.resolution {
            return Err(Error::Config(format!(
                "codec resolution {} differs from encoder resolution {}",
                self.codec.resolution, self.encoder.resolution
            )));
        }
        TransformerShape::new(&self.codec, &self.encoder)?;
        Ok(())
    }
}

/// Settings of one transformer training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self { stage: Stage::Pretrain, steps: 2000, batch_size: 16, lr: 3e-4, seed }
    }

    pub fn finetune(seed: u64) -> Self {
        Self { stage: Stage::Finetune, steps: 800, batch_size: 16, lr: 3e-4, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Codec {
            return Err(Error::Config("codec training has its own configuration".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("{} needs positive steps and batch size", self.stage.name())));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// The codec, the frozen encoder and the transformer, plus how far
/// training has progressed.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub codec: VqCodec<f32>,
    pub encoder: FeatureEncoder<f32>,
    pub transformer: Transformer<f32>,
    /// Last finished stage, `None` for a fresh model.
    pub completed: Option<Stage>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let codec = VqCodec::new(config.codec.clone(), crate::rng::derive_seed(seed, "codec"))?;
        Self::with_codec(config, codec, seed)
    }

    /// Wraps a trained codec with a fresh transformer.
    pub fn with_codec(config: ModelConfig, codec: VqCodec<f32>, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(codec.config == config.codec, "codec was built with a different configuration");
        let encoder = FeatureEncoder::new(config.encoder.clone())?;
        let shape = TransformerShape::new(&config.codec, &config.encoder)?;
        let transformer = Transformer::new(config.transformer.clone(), shape, crate::rng::derive_seed(seed, "transformer"))?;
        Ok(Self { config, codec, encoder, transformer, completed: None })
    }
}

/// One training pair with everything the loops need precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: PhotoContext<f32>,
    pub tokens: TokenGrid,
    pub style: usize,
    pub sketch: GrayImage,
    /// Encoder block outputs of the sketch, `[C, H, W]` each.
    pub sketch_features: Vec<Tensor<f32>>,
}

/// Tokenizes sketches and extracts photo features once, up front.
pub fn prepare(model: &Model, pairs: &[PhotoSketchPair]) -> Result<Vec<Example>> {
    let k = model.config.transformer.num_styles;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let sketches: Vec<&GrayImage> = chunk.iter().map(|p| &p.sketch).collect();
        let photos: Vec<&GrayImage> = chunk.iter().map(|p| &p.photo).collect();
        let tokens = model.codec.tokenize_batch(&sketches)?;
        let photo_feats = model.encoder.extract_batch(&photos)?;
        let sketch_feats = model.encoder.extract_batch(&sketches)?;
        for (((pair, tokens), pf), sf) in chunk.iter().zip(tokens).zip(photo_feats).zip(sketch_feats) {
            ensure!(pair.style < k, "style label {} outside the model's {k} styles", pair.style);
            out.push(Example {
                context: model.transformer.photo_context(&pf)?,
                tokens,
                style: pair.style,
                sketch: pair.sketch.clone(),
                sketch_features: sf.intermediates,
            });
        }
    }
    Ok(out)
}

/// Loss values of one step; terms a stage does not use are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub mim: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "# step stage l_mim l_pix l_pcpt total";

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!("{} {} {:.6} {:.6} {:.6} {:.6}", self.step, self.stage.name(), self.mim, self.pixel, self.perceptual, self.total)
    }
}

/// A model mid-stage: resuming from this state replays the remaining steps
/// exactly as an uninterrupted run would.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub stage: Stage,
    /// Steps of `stage` already taken.
    pub step: u64,
    pub adam: Adam<f32>,
}

impl TrainState {
    /// Starts `cfg.stage` on `model`, checking the previous stage finished.
    pub fn begin(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let needed = match cfg.stage {
            Stage::Pretrain => Stage::Codec,
            _ => Stage::Pretrain,
        };
        if model.completed.is_none_or(|s| s < needed) {
            return Err(Error::Config(format!("{} needs a model through the {} stage", cfg.stage.name(), needed.name())));
        }
        Ok(Self { model, stage: cfg.stage, step: 0, adam: Adam::new(cfg.adam()) })
    }
}

fn sample_batch(data: &[Example], cfg: &TrainConfig, step: u64) -> Result<(Vec<usize>, Vec<MaskedTokens>)> {
    let mut rng = step_rng(cfg.seed, "transformer-batch", step);
    let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
    let mut masked = Vec::with_capacity(picks.len());
    for &i in &picks {
        let mask = sample_training_mask(data[i].tokens.len(), &mut rng)?;
        masked.push(apply_mask(&data[i].tokens, &mask)?);
    }
    Ok((picks, masked))
}

/// One optimizer step of the state's stage.
pub fn train_step(state: &mut TrainState, data: &[Example], cfg: &TrainConfig, losses: &LossConfig) -> Result<StepMetrics> {
    ensure!(!data.is_empty(), "training set is empty");
    ensure!(state.stage == cfg.stage, "state is in {} but the config is for {}", state.stage.name(), cfg.stage.name());
    let (picks, masked) = sample_batch(data, cfg, state.step)?;
    let batch = picks.len();
    let model = &mut state.model;
    let tf = &model.transformer;

    let mut g = Graph::new();
    let photos: Vec<&PhotoContext<f32>> = picks.iter().map(|&i| &data[i].context).collect();
    let styles: Vec<usize> = picks.iter().map(|&i| data[i].style).collect();
    let style = tf.style_rows(&mut g, &styles)?;
    let refs: Vec<&MaskedTokens> = masked.iter().collect();
    let logits = tf.forward(&mut g, &photos, style, &refs)?;
    let targets: Vec<usize> = picks.iter().flat_map(|&i| data[i].tokens.indices().iter().copied()).collect();
    let mask: Vec<bool> = masked.iter().flat_map(|m| m.mask().iter().copied()).collect();
    let mim = mim_loss(&mut g, logits, &targets, &mask, batch, losses.mim_norm)?;

    let (loss, pix, pcpt) = if state.stage == Stage::Finetune {
        let codec = &model.codec;
        let (c, d) = (codec.config.codebook_size, codec.config.code_dim);
        let book = g.constant(&[c, d], codec.codebook_tensor().data().to_vec())?;
        // straight-through: forward uses the argmax code, backward the soft mixture
        let probs = g.softmax(logits)?;
        let soft = g.matmul(probs, book)?;
        let argmax: Vec<usize> = g
            .value(logits)
            .chunks(c)
            .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
            .collect();
        let hard = g.gather_rows(book, &argmax)?;
        let gap = g.sub(hard, soft)?;
        let gap = g.detach(gap);
        let st = g.add(soft, gap)?;
        // visible positions keep their true code
        let keep: Vec<f32> = mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d)).collect();
        let keep = g.constant(&[targets.len(), d], keep)?;
        let known: Vec<f32> = targets
            .iter()
            .zip(&mask)
            .flat_map(|(&t, &m)| {
                let row = &codec.codebook_tensor().data()[t * d..(t + 1) * d];
                row.iter().map(move |&v| if m { 0.0 } else { v })
            })
            .collect();
        let known = g.constant(&[targets.len(), d], known)?;
        let z = g.mul(st, keep)?;
        let z = g.add(z, known)?;
        let z = g.rows_to_nchw(z, batch, codec.config.grid_h, codec.config.grid_w)?;
        let pred = codec.decode_latents(&mut g, z)?;

        let sketches: Vec<&GrayImage> = picks.iter().map(|&i| &data[i].sketch).collect();
        let target = images_var(&mut g, &sketches)?;
        let pix = pixel_loss_var(&mut g, pred, target, losses.pixel_norm)?;
        let mut feats = Vec::with_capacity(model.encoder.num_layers());
        for l in 0..model.encoder.num_layers() {
            let shape = data[picks[0]].sketch_features[l].shape().to_vec();
            let rows: Vec<f32> = picks.iter().flat_map(|&i| data[i].sketch_features[l].data().iter().copied()).collect();
            feats.push(g.constant(&[batch, shape[0], shape[1], shape[2]], rows)?);
        }
        let pcpt = perceptual_loss_var(&mut g, &model.encoder, pred, &feats, &losses.perceptual)?;
        let wp = g.scale(pix, losses.weights.pixel as f32);
        let wc = g.scale(pcpt, losses.weights.perceptual as f32);
        let d2 = g.add(wp, wc)?;
        let loss = g.add(mim, d2)?;
        (loss, Some(pix), Some(pcpt))
    } else {
        (mim, None, None)
    };

    let grads = g.backward(loss)?;
    model.transformer.params.accumulate(&grads)?;
    if state.stage == Stage::Finetune {
        model.codec.decoder.accumulate(&grads)?;
        state.adam.step(&mut [&mut model.transformer.params, &mut model.codec.decoder])?;
        model.codec.decoder.zero_grad();
    } else {
        state.adam.step(&mut [&mut model.transformer.params])?;
    }
    model.transformer.params.zero_grad();

    let value = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v)[0] as f64);
    let (mim, pixel, perceptual) = (value(Some(mim)), value(pix), value(pcpt));
    let metrics = StepMetrics {
        step: state.step,
        stage: state.stage,
        mim,
        pixel,
        perceptual,
        total: total_objective(mim, pixel, perceptual, &losses.weights).total,
    };
    state.step += 1;
    Ok(metrics)
}

/// Runs the state's stage up to `cfg.steps`, marking it finished at the end.
pub fn run_stage(
    state: &mut TrainState,
    data: &[Example],
    cfg: &TrainConfig,
    losses: &LossConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<()> {
    losses.validate(state.model.encoder.num_layers())?;
    while state.step < cfg.steps {
        let m = train_step(state, data, cfg, losses)?;
        if !m.total.is_finite() {
            return Err(Error::Config(format!("{} diverged at step {}", cfg.stage.name(), m.step)));
        }
        on_step(&m);
    }
    state.model.completed = Some(cfg.stage);
    Ok(())
}

/// Stage 1: trains the transformer and style anchors on the masked-token
/// loss; codec and encoder stay fixed.
pub fn pretrain_transformer(
    model: Model,
    data: &[Example],
    cfg: &TrainConfig,
    losses: &LossConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<TrainState> {
    ensure!(cfg.stage == Stage::Pretrain, "pretraining needs a pretrain config");
    let mut state = TrainState::begin(model, cfg)?;
    run_stage(&mut state, data, cfg, losses, on_step)?;
    Ok(state)
}

/// Stage 2: trains transformer and decoder on the full objective, with a
/// fresh optimizer.
pub fn finetune(
    model: Model,
    data: &[Example],
    cfg: &TrainConfig,
    losses: &LossConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<TrainState> {
    ensure!(cfg.stage == Stage::Finetune, "finetuning needs a finetune config");
    let mut state = TrainState::begin(model, cfg)?;
    run_stage(&mut state, data, cfg, losses, on_step)?;
    Ok(state)
}
