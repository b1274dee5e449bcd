//! Frozen photo feature encoder and the continuous style condition.

use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{ensure, Error, Result};
use crate::nn::Conv2d;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::vq::images_var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub resolution: usize,
    /// Output channels of the stride-2 blocks; the last is the feature width.
    pub channels: Vec<usize>,
    /// Seed of the fixed random weights.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { resolution: 32, channels: vec![16, 32, 64], seed: 0x5eed }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config(format!("encoder needs at least two nonzero blocks, got {:?}", self.channels)));
        }
        if !self.resolution.is_multiple_of(1 << self.channels.len()) {
            return Err(Error::Config(format!(
                "encoder resolution {} not divisible by 2^{}",
                self.resolution,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial side of block `l`'s output.
    pub fn side(&self, l: usize) -> usize {
        self.resolution >> (l + 1)
    }
}

/// Hidden states of one photo.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<T> {
    /// Block outputs, `[C_l, H_l, W_l]` each.
    pub intermediates: Vec<Tensor<T>>,
    /// Global average pool of the last block, length `d_E`.
    pub pooled: Vec<T>,
}

/// Stand-in for a large pretrained image encoder: strided conv blocks with
/// fixed seeded weights. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder<T> {
    pub config: EncoderConfig,
    params: ParamStore<T>,
    layers: Vec<Conv2d>,
}

impl<T: Scalar> FeatureEncoder<T> {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "feature-encoder");
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut ch = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            layers.push(Conv2d::new(&mut params, &format!("enc.{i}"), ch, c, 3, 2, 2f64.sqrt(), &mut rng));
            ch = c;
        }
        params.set_trainable(false);
        Ok(Self { config, params, layers })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        let r = self.config.resolution;
        ensure!(img.width() == r && img.height() == r, "photo is {}x{}, encoder expects {r}x{r}", img.width(), img.height());
        Ok(())
    }

    /// Block outputs for images `[B, 1, H, W]`; gradients reach `images` only.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Vec<Var>> {
        let centered = g.scale(images, T::of(2.0));
        let mut x = g.add_scalar(centered, -T::one());
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = layer.forward(g, &self.params, x)?;
            x = g.relu(y);
            out.push(x);
        }
        Ok(out)
    }

    pub fn extract_batch(&self, photos: &[&GrayImage]) -> Result<Vec<EncoderFeatures<T>>> {
        for p in photos {
            self.check_image(p)?;
        }
        let mut g = Graph::new();
        let x = images_var(&mut g, photos)?;
        let blocks = self.forward(&mut g, x)?;
        let mut feats: Vec<EncoderFeatures<T>> =
            (0..photos.len()).map(|_| EncoderFeatures { intermediates: Vec::new(), pooled: Vec::new() }).collect();
        for &b in &blocks {
            let shape = g.shape(b).to_vec();
            let per = shape[1] * shape[2] * shape[3];
            for (f, chunk) in feats.iter_mut().zip(g.value(b).chunks(per)) {
                f.intermediates.push(Tensor::new(&shape[1..], chunk.to_vec())?);
            }
        }
        for f in &mut feats {
            let last = f.intermediates.last().expect("at least two blocks");
            let hw = last.shape()[1] * last.shape()[2];
            f.pooled = last.data().chunks(hw).map(|c| T::of(crate::scalar::sum64(c) / hw as f64)).collect();
        }
        Ok(feats)
    }

    pub fn extract(&self, photo: &GrayImage) -> Result<EncoderFeatures<T>> {
        Ok(self.extract_batch(&[photo])?.remove(0))
    }

    pub fn cast<U: Scalar>(&self) -> FeatureEncoder<U> {
        FeatureEncoder { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }
}

/// Mixture weights over the K style anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCondition {
    weights: Vec<f64>,
    scalar: Option<f64>,
}

impl StyleCondition {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        ensure!(!weights.is_empty(), "style condition needs at least one anchor");
        ensure!(weights.iter().all(|&w| w >= 0.0 && w.is_finite()), "style weights must be nonnegative: {weights:?}");
        let total: f64 = weights.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-6, "style weights sum to {total}, expected 1");
        Ok(Self { weights, scalar: None })
    }

    /// All weight on anchor `k`.
    pub fn one_hot(k: usize, num_styles: usize) -> Result<Self> {
        ensure!(k < num_styles, "style {k} out of range for {num_styles} anchors");
        let mut weights = vec![0.0; num_styles];
        weights[k] = 1.0;
        Self::new(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The `s` this condition was built from, if any.
    pub fn scalar(&self) -> Option<f64> {
        self.scalar
    }
}

/// Weight `1 - s` on anchor `a` and `s` on anchor `b`.
pub fn style_from_scalar(s: f64, a: usize, b: usize, num_styles: usize) -> Result<StyleCondition> {
    ensure!((0.0..=1.0).contains(&s), "style scalar {s} outside [0, 1]");
    ensure!(a != b, "style anchors must differ, got {a} twice");
    ensure!(a < num_styles && b < num_styles, "anchors ({a}, {b}) out of range for {num_styles} styles");
    let mut weights = vec![0.0; num_styles];
    weights[a] = 1.0 - s;
    weights[b] = s;
    Ok(StyleCondition { weights, scalar: Some(s) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding<T> {
    pub vector: Vec<T>,
}

/// `sum_k w_k * anchor_k` over the rows of `anchors[K, d]`.
pub fn embed_style<T: Scalar>(cond: &StyleCondition, anchors: &Tensor<T>) -> Result<StyleEmbedding<T>> {
    let (k, d) = match anchors.shape() {
        &[k, d] => (k, d),
        s => return Err(Error::Contract(format!("style anchors must be [K, d], got {s:?}"))),
    };
    ensure!(cond.weights.len() == k, "condition has {} weights for {k} anchors", cond.weights.len());
    let mut vector = vec![T::zero(); d];
    for (row, &w) in anchors.data().chunks(d).zip(&cond.weights) {
        if w == 0.0 {
            continue;
        }
        let w = T::of(w);
        for (v, &a) in vector.iter_mut().zip(row) {
            *v += w * a;
        }
    }
    Ok(StyleEmbedding { vector })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn photo(seed: u64) -> GrayImage {
        let cfg = crate::data::CorpusConfig::default();
        crate::data::generate_pair(&cfg, seed, 0, crate::data::Domain::Pretrain).unwrap().photo
    }

    #[test]
    fn features_are_deterministic_and_shaped() {
        let enc = FeatureEncoder::<f32>::new(EncoderConfig::default()).unwrap();
        let p = photo(3);
        let a = enc.extract(&p).unwrap();
        let b = enc.extract(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pooled.len(), 64);
        let shapes: Vec<&[usize]> = a.intermediates.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[16, 16, 16][..], &[32, 8, 8], &[64, 4, 4]]);
    }

    #[test]
    fn local_change_moves_features() {
        let enc = FeatureEncoder::<f32>::new(EncoderConfig::default()).unwrap();
        let p = photo(5);
        let mut q = p.clone();
        for y in 0..6 {
            for x in 0..6 {
                q.set(x, y, 1.0 - q.get(x, y));
            }
        }
        assert_ne!(enc.extract(&p).unwrap().pooled, enc.extract(&q).unwrap().pooled);
    }

    #[test]
    fn encoder_rejects_wrong_resolution() {
        let enc = FeatureEncoder::<f32>::new(EncoderConfig::default()).unwrap();
        assert!(matches!(enc.extract(&GrayImage::filled(16, 16, 0.5)), Err(Error::Contract(_))));
    }

    #[test]
    fn encoder_is_frozen() {
        let enc = FeatureEncoder::<f64>::new(EncoderConfig::default()).unwrap();
        assert!(enc.params().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn scalar_style_weights() {
        assert_eq!(style_from_scalar(0.0, 0, 1, 3).unwrap().weights(), &[1.0, 0.0, 0.0]);
        assert_eq!(style_from_scalar(1.0, 0, 1, 3).unwrap().weights(), &[0.0, 1.0, 0.0]);
        assert_eq!(style_from_scalar(0.3, 0, 1, 2).unwrap().weights(), &[0.7, 0.3]);
        assert!(style_from_scalar(1.2, 0, 1, 3).is_err());
        assert!(style_from_scalar(0.5, 1, 1, 3).is_err());
    }

    #[test]
    fn condition_validates_weights() {
        assert!(StyleCondition::new(vec![0.5, 0.6]).is_err());
        assert!(StyleCondition::new(vec![-0.5, 1.5]).is_err());
        assert!(StyleCondition::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn embedding_endpoints_and_midpoint() {
        let anchors = Tensor::new(&[2, 3], vec![1.0f64, -2.0, 0.5, 3.0, 4.0, -1.5]).unwrap();
        let e0 = embed_style(&StyleCondition::one_hot(0, 2).unwrap(), &anchors).unwrap();
        assert_eq!(e0.vector, vec![1.0, -2.0, 0.5]);
        let e1 = embed_style(&StyleCondition::one_hot(1, 2).unwrap(), &anchors).unwrap();
        assert_eq!(e1.vector, vec![3.0, 4.0, -1.5]);
        let mid = embed_style(&style_from_scalar(0.5, 0, 1, 2).unwrap(), &anchors).unwrap();
        assert_eq!(mid.vector, vec![2.0, 1.0, -0.5]);
    }
}
