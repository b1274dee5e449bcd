//! Masked-token cross-entropy, pixel and perceptual losses, and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::conditioning::FeatureEncoder;
use crate::data::GrayImage;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::vq::images_var;

/// Normalisation of the masked cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MimNorm {
    /// `1/M` over the M masked positions.
    #[default]
    Masked,
    /// `1/(N-M)`, undefined when every position is masked.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelNorm {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ1, on the pixel loss.
    pub pixel: f64,
    /// λ2, on the perceptual loss.
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pixel: 4.0, perceptual: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel >= 0.0 && self.perceptual >= 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    /// Encoder block indices f_l.
    pub layers: Vec<usize>,
    /// W_l, one per layer.
    pub weights: Vec<f64>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { layers: vec![0, 1, 2], weights: vec![1.0 / 3.0; 3] }
    }
}

impl PerceptualConfig {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        if self.layers.len() != self.weights.len() {
            return Err(Error::Config(format!("{} perceptual layers but {} weights", self.layers.len(), self.weights.len())));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= encoder_layers) {
            return Err(Error::Config(format!("perceptual layer {l} beyond the encoder's {encoder_layers} blocks")));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("perceptual weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Every loss setting of the training objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub perceptual: PerceptualConfig,
    pub mim_norm: MimNorm,
    pub pixel_norm: PixelNorm,
}

impl LossConfig {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        self.weights.validate()?;
        self.perceptual.validate(encoder_layers)
    }
}

/// Masked cross-entropy on logits `[B*N, C]`. `targets` and `mask` hold
/// `B*N` entries; each sample is normalised on its own and the batch mean
/// taken. Unmasked rows never enter the graph's loss.
pub fn mim_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[bool], batch: usize, norm: MimNorm) -> Result<Var> {
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    ensure!(g.shape(logits).len() == 2, "logits must be [B*N, C], got {:?}", g.shape(logits));
    ensure!(batch > 0 && rows % batch == 0, "{rows} logit rows do not split into {batch} samples");
    ensure!(targets.len() == rows && mask.len() == rows, "{} targets and {} mask entries for {rows} rows", targets.len(), mask.len());
    let n = rows / batch;
    let mut picked_rows = Vec::new();
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    for b in 0..batch {
        let m = &mask[b * n..(b + 1) * n];
        let masked = m.iter().filter(|&&x| x).count();
        ensure!(masked >= 1, "sample {b} has no masked position");
        let denom = match norm {
            MimNorm::Masked => masked,
            MimNorm::Literal => {
                ensure!(masked < n, "literal normalisation 1/(N-M) is undefined with every position masked");
                n - masked
            }
        };
        for (i, _) in m.iter().enumerate().filter(|(_, &x)| x) {
            picked_rows.push(b * n + i);
            cols.push(targets[b * n + i]);
            weights.push(T::of(-1.0 / (denom as f64 * batch as f64)));
        }
    }
    let logp = g.log_softmax(logits)?;
    let rows = g.gather_rows(logp, &picked_rows)?;
    let picked = g.pick(rows, &cols)?;
    let w = g.constant(&[weights.len()], weights)?;
    let terms = g.mul(picked, w)?;
    Ok(g.sum(terms))
}

/// Pixel distance between two image batches of equal shape.
pub fn pixel_loss_var<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, norm: PixelNorm) -> Result<Var> {
    ensure!(g.shape(pred) == g.shape(target), "pixel loss shapes {:?} and {:?} differ", g.shape(pred), g.shape(target));
    let d = g.sub(pred, target)?;
    let d = g.abs(d);
    Ok(match norm {
        PixelNorm::Mean => g.mean(d),
        PixelNorm::Sum => g.sum(d),
    })
}

pub fn pixel_loss(pred: &GrayImage, target: &GrayImage, norm: PixelNorm) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let (a, b) = (images_var(&mut g, &[pred])?, images_var(&mut g, &[target])?);
    let l = pixel_loss_var(&mut g, a, b, norm)?;
    Ok(g.value(l)[0])
}

/// `sum_l W_l * mean((f_l(pred) - f_l(target))^2)` through the frozen encoder.
/// `target_feats` are the encoder block outputs of the target, usually
/// precomputed.
pub fn perceptual_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &FeatureEncoder<T>,
    pred: Var,
    target_feats: &[Var],
    cfg: &PerceptualConfig,
) -> Result<Var> {
    cfg.validate(encoder.num_layers())?;
    ensure!(target_feats.len() == encoder.num_layers(), "{} target feature maps for {} blocks", target_feats.len(), encoder.num_layers());
    let feats = encoder.forward(g, pred)?;
    let mut total = g.constant(&[], vec![T::zero()])?;
    for (&l, &w) in cfg.layers.iter().zip(&cfg.weights) {
        ensure!(g.shape(feats[l]) == g.shape(target_feats[l]), "feature shapes differ at layer {l}");
        let d = g.sub(feats[l], target_feats[l])?;
        let d = g.square(d);
        let m = g.mean(d);
        let m = g.scale(m, T::of(w));
        total = g.add(total, m)?;
    }
    Ok(total)
}

pub fn perceptual_loss(encoder: &FeatureEncoder<f64>, pred: &GrayImage, target: &GrayImage, cfg: &PerceptualConfig) -> Result<f64> {
    ensure!(
        pred.width() == target.width() && pred.height() == target.height(),
        "perceptual loss shapes {}x{} and {}x{} differ",
        pred.width(),
        pred.height(),
        target.width(),
        target.height()
    );
    let mut g = Graph::new();
    let t = images_var(&mut g, &[target])?;
    let tf = encoder.forward(&mut g, t)?;
    let p = images_var(&mut g, &[pred])?;
    let l = perceptual_loss_var(&mut g, encoder, p, &tf, cfg)?;
    Ok(g.value(l)[0])
}

/// Loss groups of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    /// The MIM term.
    pub d1: f64,
    /// `λ1 * pixel + λ2 * perceptual`.
    pub d2: f64,
    pub total: f64,
}

pub fn total_objective(mim: f64, pix: f64, pcpt: f64, w: &LossWeights) -> Objective {
    let d2 = w.pixel * pix + w.perceptual * pcpt;
    Objective { d1: mim, d2, total: mim + d2 }
}

/// Standalone MIM loss of one `N x C` logit matrix, evaluated in `f64`.
pub fn mim_loss_value(logits: &Tensor<f64>, targets: &[usize], mask: &[bool], norm: MimNorm) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits);
    let loss = mim_loss(&mut g, l, targets, mask, 1, norm)?;
    Ok(g.value(loss)[0])
}
