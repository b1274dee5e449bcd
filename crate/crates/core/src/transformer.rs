//! Conditional token transformer: U-ViT style blocks with long skips,
//! cross-attention to encoder features and adaptive layer norm driven by
//! the pooled feature and the style embedding.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::conditioning::{EncoderConfig, EncoderFeatures, StyleEmbedding};
use crate::error::{ensure, Error, Result};
use crate::masking::{MaskedTokens, MASK_SENTINEL};
use crate::nn::Linear;
use crate::rng::{normal, rng_for, Rng};
use crate::scalar::{sum64, Scalar};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::vq::{TokenGrid, VqConfig};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub depth: usize,
    /// Model width; also the style embedding size.
    pub width: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward layers as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Number of learned style anchors K.
    pub num_styles: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { depth: 4, width: 64, heads: 4, mlp_ratio: 4, num_styles: 3 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.num_styles == 0 {
            return Err(Error::Config(format!("transformer sizes must be positive: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Sizes the transformer takes from the codec and the feature encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerShape {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Codebook size C; the embedding table has C + 1 rows.
    pub vocab: usize,
    /// Pooled feature width d_E.
    pub feature_dim: usize,
    /// `(channels, side)` of each encoder block output.
    pub context: Vec<(usize, usize)>,
}

impl TransformerShape {
    pub fn new(vq: &VqConfig, encoder: &EncoderConfig) -> Result<Self> {
        ensure!(vq.resolution == encoder.resolution, "codec resolution {} != encoder resolution {}", vq.resolution, encoder.resolution);
        let context = encoder.channels.iter().enumerate().map(|(l, &c)| (c, encoder.side(l))).collect();
        let shape = Self {
            grid_h: vq.grid_h,
            grid_w: vq.grid_w,
            vocab: vq.codebook_size,
            feature_dim: encoder.feature_dim(),
            context,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn validate(&self) -> Result<()> {
        for &(_, side) in &self.context {
            if side % self.grid_h != 0 || side % self.grid_w != 0 || side / self.grid_h != side / self.grid_w {
                return Err(Error::Config(format!(
                    "encoder map of side {side} cannot be pooled onto a {}x{} grid",
                    self.grid_h, self.grid_w
                )));
            }
        }
        Ok(())
    }
}

/// Encoder features pooled onto the token grid: the transformer's view of
/// one photo.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoContext<T> {
    /// Per encoder block, `[N, C_l]` rows in grid order.
    pub layers: Vec<Tensor<T>>,
    pub pooled: Vec<T>,
}

/// `N x C` unnormalised scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLogits {
    pub grid_h: usize,
    pub grid_w: usize,
    pub vocab: usize,
    pub values: Vec<f64>,
}

impl TokenLogits {
    pub fn new(grid_h: usize, grid_w: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(values.len() == grid_h * grid_w * vocab, "{} logits for a {grid_h}x{grid_w} grid over {vocab} tokens", values.len());
        ensure!(values.iter().all(|v| v.is_finite()), "logits must be finite");
        Ok(Self { grid_h, grid_w, vocab, values })
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.vocab..(i + 1) * self.vocab]
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Argmax per position (lowest index on ties) and the softmax probability
/// of the chosen token.
pub fn greedy_tokens(logits: &TokenLogits) -> Result<(TokenGrid, Vec<f64>)> {
    let mut tokens = Vec::with_capacity(logits.len());
    let mut conf = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let row = logits.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        tokens.push(best);
        conf.push(softmax(row)[best]);
    }
    Ok((TokenGrid::new(tokens, logits.grid_h, logits.grid_w, logits.vocab)?, conf))
}

/// Samples each position from `softmax(logits / temperature)`; confidence
/// is the untempered probability of the drawn token. Temperature 0 is
/// [`greedy_tokens`].
pub fn sample_tokens(logits: &TokenLogits, temperature: f64, rng: &mut Rng) -> Result<(TokenGrid, Vec<f64>)> {
    ensure!(temperature >= 0.0 && temperature.is_finite(), "temperature {temperature} must be finite and nonnegative");
    if temperature == 0.0 {
        return greedy_tokens(logits);
    }
    let mut tokens = Vec::with_capacity(logits.len());
    let mut conf = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let row = logits.row(i);
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let probs = softmax(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        tokens.push(pick);
        conf.push(softmax(row)[pick]);
    }
    Ok((TokenGrid::new(tokens, logits.grid_h, logits.grid_w, logits.vocab)?, conf))
}

/// Anything that scores every position of a partially masked grid.
pub trait TokenPredictor {
    fn grid(&self) -> (usize, usize);
    fn vocab(&self) -> usize;
    fn predict(&self, masked: &MaskedTokens) -> Result<TokenLogits>;
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ada: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    xq: Linear,
    xk: Linear,
    xv: Linear,
    xo: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: TransformerConfig,
    pub shape: TransformerShape,
    /// Every trainable tensor, including the style anchors `tf.style`.
    pub params: ParamStore<T>,
    tok: usize,
    pos: usize,
    ctx_pos: usize,
    style: usize,
    ctx_proj: Vec<Linear>,
    blocks: Vec<Block>,
    skips: Vec<Linear>,
    head: Linear,
}

fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(std * normal(rng)))
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: TransformerConfig, shape: TransformerShape, seed: u64) -> Result<Self> {
        config.validate()?;
        shape.validate()?;
        let mut rng = rng_for(seed, "transformer-init");
        let (w, n) = (config.width, shape.tokens());
        let mut p = ParamStore::new();
        let tok = p.add("tf.tok", gaussian(&[shape.vocab + 1, w], 0.5, &mut rng));
        let pos = p.add("tf.pos", gaussian(&[n, w], 0.5, &mut rng));
        let ctx_pos = p.add("tf.ctx_pos", gaussian(&[shape.context.len() * n, w], 0.5, &mut rng));
        let style = p.add("tf.style", gaussian(&[config.num_styles, w], 1.0, &mut rng));
        let ctx_proj = shape
            .context
            .iter()
            .enumerate()
            .map(|(l, &(c, _))| Linear::new(&mut p, &format!("tf.ctx.{l}"), c, w, 1.0, &mut rng))
            .collect();
        let cond = shape.feature_dim + w;
        let hidden = w * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|b| {
                let mut lin = |name: &str, i: usize, o: usize, gain: f64| Linear::new(&mut p, &format!("tf.blk{b}.{name}"), i, o, gain, &mut rng);
                Block {
                    ada: lin("ada", cond, 6 * w, 0.1),
                    q: lin("q", w, w, 1.0),
                    k: lin("k", w, w, 1.0),
                    v: lin("v", w, w, 1.0),
                    o: lin("o", w, w, 0.5),
                    xq: lin("xq", w, w, 1.0),
                    xk: lin("xk", w, w, 1.0),
                    xv: lin("xv", w, w, 1.0),
                    xo: lin("xo", w, w, 0.5),
                    fc1: lin("fc1", w, hidden, 2f64.sqrt()),
                    fc2: lin("fc2", hidden, w, 0.5),
                }
            })
            .collect();
        let skips = (0..config.depth / 2).map(|j| Linear::new(&mut p, &format!("tf.skip{j}"), 2 * w, w, 1.0, &mut rng)).collect();
        let head = Linear::new(&mut p, "tf.head", w, shape.vocab, 1.0, &mut rng);
        Ok(Self { config, shape, params: p, tok, pos, ctx_pos, style, ctx_proj, blocks, skips, head })
    }

    pub fn style_anchors(&self) -> &Tensor<T> {
        self.params.get(self.style)
    }

    /// Pools encoder block outputs onto the token grid.
    pub fn photo_context(&self, features: &EncoderFeatures<T>) -> Result<PhotoContext<T>> {
        let s = &self.shape;
        ensure!(features.intermediates.len() == s.context.len(), "{} feature maps, expected {}", features.intermediates.len(), s.context.len());
        ensure!(features.pooled.len() == s.feature_dim, "pooled feature has {} entries, expected {}", features.pooled.len(), s.feature_dim);
        let (gh, gw) = (s.grid_h, s.grid_w);
        let mut layers = Vec::with_capacity(s.context.len());
        for (t, &(c, side)) in features.intermediates.iter().zip(&s.context) {
            ensure!(t.shape() == [c, side, side], "feature map {:?}, expected [{c}, {side}, {side}]", t.shape());
            let k = side / gh;
            let mut rows = vec![T::zero(); gh * gw * c];
            for ch in 0..c {
                let plane = &t.data()[ch * side * side..(ch + 1) * side * side];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let mut acc = 0.0;
                        for y in gy * k..(gy + 1) * k {
                            acc += sum64(&plane[y * side + gx * k..y * side + (gx + 1) * k]);
                        }
                        rows[(gy * gw + gx) * c + ch] = T::of(acc / (k * k) as f64);
                    }
                }
            }
            layers.push(Tensor::new(&[gh * gw, c], rows)?);
        }
        Ok(PhotoContext { layers, pooled: features.pooled.clone() })
    }

    fn token_indices(&self, tokens: &[&MaskedTokens]) -> Result<Vec<usize>> {
        let (n, c) = (self.shape.tokens(), self.shape.vocab);
        let mut idx = Vec::with_capacity(tokens.len() * n);
        for t in tokens {
            ensure!(t.len() == n, "{} tokens, expected {n}", t.len());
            for &v in t.values() {
                ensure!(v == MASK_SENTINEL || (0..c as i64).contains(&v), "token value {v} outside [0, {c}) and not the mask sentinel");
                idx.push(if v == MASK_SENTINEL { c } else { v as usize });
            }
        }
        Ok(idx)
    }

    fn modulated_norm(&self, g: &mut Graph<T>, x: Var, mods: Var, which: usize) -> Result<Var> {
        let w = self.config.width;
        let h = g.layer_norm(x, LN_EPS)?;
        let gamma = g.slice_cols(mods, 2 * which * w, w)?;
        let beta = g.slice_cols(mods, (2 * which + 1) * w, w)?;
        let scaled = g.mul(h, gamma)?;
        let h = g.add(h, scaled)?;
        g.add(h, beta)
    }

    fn block(&self, g: &mut Graph<T>, b: &Block, x: Var, cond: Var, ctx: Var, batch: usize) -> Result<Var> {
        let p = &self.params;
        let heads = self.config.heads;
        let mods = b.ada.forward(g, p, cond)?;
        let mods = g.repeat_rows(mods, self.shape.tokens())?;

        let h = self.modulated_norm(g, x, mods, 0)?;
        let (q, k, v) = (b.q.forward(g, p, h)?, b.k.forward(g, p, h)?, b.v.forward(g, p, h)?);
        let a = g.attention(q, k, v, batch, heads)?;
        let a = b.o.forward(g, p, a)?;
        let x = g.add(x, a)?;

        let h = self.modulated_norm(g, x, mods, 1)?;
        let q = b.xq.forward(g, p, h)?;
        let (k, v) = (b.xk.forward(g, p, ctx)?, b.xv.forward(g, p, ctx)?);
        let a = g.attention(q, k, v, batch, heads)?;
        let a = b.xo.forward(g, p, a)?;
        let x = g.add(x, a)?;

        let h = self.modulated_norm(g, x, mods, 2)?;
        let h = b.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = b.fc2.forward(g, p, h)?;
        g.add(x, h)
    }

    /// Logits `[B*N, C]` for a batch; `style` is `[B, width]`.
    pub fn forward(&self, g: &mut Graph<T>, photos: &[&PhotoContext<T>], style: Var, tokens: &[&MaskedTokens]) -> Result<Var> {
        let batch = photos.len();
        ensure!(batch > 0 && tokens.len() == batch, "{} photos for {} token grids", batch, tokens.len());
        let (n, w) = (self.shape.tokens(), self.config.width);
        ensure!(g.shape(style) == [batch, w], "style embedding shape {:?}, expected [{batch}, {w}]", g.shape(style));
        let p = &self.params;

        let idx = self.token_indices(tokens)?;
        let table = g.param(p, self.tok);
        let x = g.gather_rows(table, &idx)?;
        let pos = g.param(p, self.pos);
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.gather_rows(pos, &tiled)?;
        let mut x = g.add(x, pos)?;

        let mut parts = Vec::with_capacity(self.ctx_proj.len());
        for (l, proj) in self.ctx_proj.iter().enumerate() {
            let c = self.shape.context[l].0;
            let mut rows = Vec::with_capacity(batch * n * c);
            for ph in photos {
                ensure!(ph.layers.len() == self.ctx_proj.len() && ph.layers[l].shape() == [n, c], "photo context does not match the transformer");
                rows.extend_from_slice(ph.layers[l].data());
            }
            let rows = g.constant(&[batch * n, c], rows)?;
            parts.push(proj.forward(g, p, rows)?);
        }
        let ctx = g.concat_rows(&parts, batch)?;
        let lc = self.ctx_proj.len() * n;
        let cpos = g.param(p, self.ctx_pos);
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..lc).collect();
        let cpos = g.gather_rows(cpos, &tiled)?;
        let ctx = g.add(ctx, cpos)?;

        let mut pooled = Vec::with_capacity(batch * self.shape.feature_dim);
        for ph in photos {
            ensure!(ph.pooled.len() == self.shape.feature_dim, "pooled feature width mismatch");
            pooled.extend_from_slice(&ph.pooled);
        }
        let pooled = g.constant(&[batch, self.shape.feature_dim], pooled)?;
        let cond = g.concat_cols(&[pooled, style])?;

        let half = self.config.depth / 2;
        let mut stack = Vec::with_capacity(half);
        for b in &self.blocks[..half] {
            x = self.block(g, b, x, cond, ctx, batch)?;
            stack.push(x);
        }
        for b in &self.blocks[half..self.config.depth - half] {
            x = self.block(g, b, x, cond, ctx, batch)?;
        }
        for (j, b) in self.blocks[self.config.depth - half..].iter().enumerate() {
            let skip = stack.pop().expect("one skip per output block");
            let joined = g.concat_cols(&[x, skip])?;
            x = self.skips[j].forward(g, p, joined)?;
            x = self.block(g, b, x, cond, ctx, batch)?;
        }
        let x = g.layer_norm(x, LN_EPS)?;
        self.head.forward(g, p, x)
    }

    /// Style rows `[B, width]` looked up from the trainable anchors.
    pub fn style_rows(&self, g: &mut Graph<T>, styles: &[usize]) -> Result<Var> {
        let anchors = g.param(&self.params, self.style);
        g.gather_rows(anchors, styles)
    }

    pub fn predict_logits(&self, photo: &PhotoContext<T>, style: &StyleEmbedding<T>, masked: &MaskedTokens) -> Result<TokenLogits> {
        let mut g = Graph::new();
        let s = g.constant(&[1, self.config.width], style.vector.clone())?;
        let out = self.forward(&mut g, &[photo], s, &[masked])?;
        let values = g.value(out).iter().map(|v| v.to_f64_lossy()).collect();
        TokenLogits::new(self.shape.grid_h, self.shape.grid_w, self.shape.vocab, values)
    }

    /// Zeroes the cross-attention outputs and the adaptive-norm maps, so the
    /// photo no longer reaches the logits.
    pub fn zero_conditioning(&mut self) {
        for b in &self.blocks {
            for id in [b.xo.weight, b.xo.bias, b.ada.weight, b.ada.bias] {
                self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            shape: self.shape.clone(),
            params: self.params.cast(),
            tok: self.tok,
            pos: self.pos,
            ctx_pos: self.ctx_pos,
            style: self.style,
            ctx_proj: self.ctx_proj.clone(),
            blocks: self.blocks.clone(),
            skips: self.skips.clone(),
            head: self.head,
        }
    }
}

/// A transformer bound to one photo and style.
pub struct ConditionedTransformer<'a, T> {
    pub model: &'a Transformer<T>,
    pub photo: &'a PhotoContext<T>,
    pub style: &'a StyleEmbedding<T>,
}

impl<T: Scalar> TokenPredictor for ConditionedTransformer<'_, T> {
    fn grid(&self) -> (usize, usize) {
        (self.model.shape.grid_h, self.model.shape.grid_w)
    }

    fn vocab(&self) -> usize {
        self.model.shape.vocab
    }

    fn predict(&self, masked: &MaskedTokens) -> Result<TokenLogits> {
        self.model.predict_logits(self.photo, self.style, masked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{embed_style, FeatureEncoder, StyleCondition};
    use crate::masking::apply_mask;

    fn small() -> (Transformer<f64>, FeatureEncoder<f64>) {
        let vq = VqConfig { resolution: 8, grid_h: 2, grid_w: 2, codebook_size: 5, ..VqConfig::default() };
        let enc = EncoderConfig { resolution: 8, channels: vec![3, 4], seed: 1 };
        let shape = TransformerShape::new(&vq, &enc).unwrap();
        let cfg = TransformerConfig { depth: 3, width: 8, heads: 2, mlp_ratio: 2, num_styles: 3 };
        (Transformer::new(cfg, shape, 9).unwrap(), FeatureEncoder::new(enc).unwrap())
    }

    fn photo(v: f32) -> crate::data::GrayImage {
        let mut img = crate::data::GrayImage::filled(8, 8, 0.2);
        for i in 0..8 {
            img.set(i, (i * 3) % 8, v);
        }
        img
    }

    #[test]
    fn greedy_examples() {
        let l = TokenLogits::new(1, 2, 4, vec![0.0, 5.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let (t, c) = greedy_tokens(&l).unwrap();
        assert_eq!(t.indices(), &[1, 0]);
        let e5 = 5f64.exp();
        assert!((c[0] - e5 / (e5 + 3.0)).abs() < 1e-12);
        assert!((c[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_sampling_is_greedy() {
        let l = TokenLogits::new(1, 1, 3, vec![0.1, 0.3, 0.2]).unwrap();
        let mut rng = rng_for(0, "t");
        assert_eq!(sample_tokens(&l, 0.0, &mut rng).unwrap(), greedy_tokens(&l).unwrap());
    }

    #[test]
    fn logits_shape_and_determinism() {
        let (tf, enc) = small();
        let ctx = tf.photo_context(&enc.extract(&photo(0.9)).unwrap()).unwrap();
        let style = embed_style(&StyleCondition::one_hot(1, 3).unwrap(), tf.style_anchors()).unwrap();
        let masked = MaskedTokens::from_values(vec![2, MASK_SENTINEL, 4, MASK_SENTINEL], 5).unwrap();
        let a = tf.predict_logits(&ctx, &style, &masked).unwrap();
        assert_eq!(a.values.len(), 4 * 5);
        assert_eq!(a, tf.predict_logits(&ctx, &style, &masked).unwrap());
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let (tf, enc) = small();
        let ctx = tf.photo_context(&enc.extract(&photo(0.9)).unwrap()).unwrap();
        let style = embed_style(&StyleCondition::one_hot(0, 3).unwrap(), tf.style_anchors()).unwrap();
        let mut g = Graph::new();
        let s = g.constant(&[1, 8], style.vector.clone()).unwrap();
        let bad = MaskedTokens::from_values(vec![0, 1, 2, 3], 9).unwrap();
        let bad = MaskedTokens::from_values(bad.values().iter().map(|&v| if v == 3 { 7 } else { v }).collect(), 9).unwrap();
        assert!(matches!(tf.forward(&mut g, &[&ctx], s, &[&bad]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_network_is_uniform() {
        let (mut tf, enc) = small();
        for (_, t) in tf.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ctx = tf.photo_context(&enc.extract(&photo(0.9)).unwrap()).unwrap();
        let style = StyleEmbedding { vector: vec![0.0; 8] };
        let l = tf.predict_logits(&ctx, &style, &MaskedTokens::fully_masked(4)).unwrap();
        assert!(l.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_conditioning_ignores_photo() {
        let (mut tf, enc) = small();
        let style = embed_style(&StyleCondition::one_hot(2, 3).unwrap(), tf.style_anchors()).unwrap();
        let z = TokenGrid::new(vec![1, 0, 3, 2], 2, 2, 5).unwrap();
        let masked = apply_mask(&z, &[true, false, true, false]).unwrap();
        let a = tf.photo_context(&enc.extract(&photo(0.9)).unwrap()).unwrap();
        let b = tf.photo_context(&enc.extract(&photo(0.0)).unwrap()).unwrap();
        assert_ne!(tf.predict_logits(&a, &style, &masked).unwrap(), tf.predict_logits(&b, &style, &masked).unwrap());
        tf.zero_conditioning();
        assert_eq!(tf.predict_logits(&a, &style, &masked).unwrap(), tf.predict_logits(&b, &style, &masked).unwrap());
    }

    #[test]
    fn context_pooling_averages_cells() {
        let (tf, _) = small();
        let feats = EncoderFeatures {
            intermediates: vec![
                Tensor::from_fn(&[3, 4, 4], |i| (i % 16) as f64),
                Tensor::from_fn(&[4, 2, 2], |i| i as f64),
            ],
            pooled: vec![0.0; 4],
        };
        let ctx = tf.photo_context(&feats).unwrap();
        // top-left 2x2 cell of 0..16 laid out 4 wide: 0, 1, 4, 5
        assert_eq!(ctx.layers[0].data()[0], 2.5);
        assert_eq!(ctx.layers[1].shape(), &[4, 4]);
        assert_eq!(ctx.layers[1].data()[..4], [0.0, 4.0, 8.0, 12.0]);
    }
}
