//! Vector-quantized convolutional autoencoder: tokenizer, nearest-entry
//! quantizer and decoder over an `h x w` token grid.
//!
//! Encoder and decoder are plain strided/upsampling convolution stacks with
//! no attention. Stage-0 training uses the straight-through estimator, an
//! L1 reconstruction term, the codebook term and a commitment term.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{ensure, Error, Result};
use crate::nn::Conv2d;
use crate::rng::{normal, rng_for, step_rng};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

/// Negative slope of the codec activations.
const LEAK: f64 = 0.1;

/// Latent token grid: `h * w` codebook indices in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    indices: Vec<usize>,
    h: usize,
    w: usize,
}

impl TokenGrid {
    pub fn new(indices: Vec<usize>, h: usize, w: usize, vocab: usize) -> Result<Self> {
        ensure!(indices.len() == h * w, "{} tokens for a {h}x{w} grid", indices.len());
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { indices, h, w })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub resolution: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Commitment weight (beta).
    pub commitment: f64,
    /// Output channels of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Channels after the input projection and after each upsampling stage.
    pub decoder_channels: Vec<usize>,
    /// Entries unused for this many steps are re-seeded from encoder outputs.
    pub dead_code_steps: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            grid_h: 4,
            grid_w: 4,
            codebook_size: 64,
            code_dim: 16,
            commitment: 0.25,
            encoder_channels: vec![16, 32, 32],
            decoder_channels: vec![32, 32, 32, 16],
            dead_code_steps: 500,
        }
    }
}

impl VqConfig {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Number of 2x down/upsampling stages between pixels and tokens.
    pub fn stages(&self) -> usize {
        (self.resolution / self.grid_h).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.grid_h == 0 || self.grid_w == 0 || self.resolution % self.grid_h != 0 || self.resolution % self.grid_w != 0 {
            return cfg_err(format!("resolution {} not divisible by grid {}x{}", self.resolution, self.grid_h, self.grid_w));
        }
        let f = self.resolution / self.grid_h;
        if f != self.resolution / self.grid_w || !f.is_power_of_two() {
            return cfg_err(format!("downsampling factor {f} must be a power of two shared by both axes"));
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            return cfg_err(format!("codebook {}x{} too small", self.codebook_size, self.code_dim));
        }
        if self.commitment <= 0.0 || !self.commitment.is_finite() {
            return cfg_err(format!("commitment weight {} must be positive", self.commitment));
        }
        if self.encoder_channels.len() != self.stages() || self.decoder_channels.len() != self.stages() + 1 {
            return cfg_err(format!(
                "{} stages need {} encoder and {} decoder channel entries",
                self.stages(),
                self.stages(),
                self.stages() + 1
            ));
        }
        Ok(())
    }
}

/// Index of the nearest codebook row for each `d`-dim latent in `latents`,
/// by squared Euclidean distance with ties going to the lowest index.
pub fn quantize_nearest<T: Scalar>(latents: &[T], codebook: &Tensor<T>) -> Result<Vec<usize>> {
    ensure!(codebook.shape().len() == 2, "codebook must be a [C, d] matrix");
    let d = codebook.shape()[1];
    ensure!(d > 0 && latents.len() % d == 0, "latent length {} is not a multiple of code dimension {d}", latents.len());
    let entries = codebook.data();
    Ok(latents
        .chunks(d)
        .map(|x| {
            let mut best = (0usize, f64::INFINITY);
            for (c, e) in entries.chunks(d).enumerate() {
                let dist: f64 = x.iter().zip(e).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum();
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Stacks images into a `[B, 1, H, W]` constant.
pub fn images_var<T: Scalar>(g: &mut Graph<T>, images: &[&GrayImage]) -> Result<Var> {
    ensure!(!images.is_empty(), "empty image batch");
    let (w, h) = (images[0].width(), images[0].height());
    ensure!(images.iter().all(|i| i.width() == w && i.height() == h), "images in a batch differ in size");
    let data = images.iter().flat_map(|i| i.pixels().iter().map(|&v| T::of(v as f64))).collect();
    g.constant(&[images.len(), 1, h, w], data)
}

fn var_to_images<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<GrayImage> {
    let shape = g.shape(v).to_vec();
    let (h, w) = (shape[2], shape[3]);
    g.value(v)
        .chunks(h * w)
        .map(|px| GrayImage::new(w, h, px.iter().map(|&x| x.to_f64_lossy().clamp(0.0, 1.0) as f32).collect()).unwrap())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqCodec<T> {
    pub config: VqConfig,
    pub encoder: ParamStore<T>,
    pub decoder: ParamStore<T>,
    /// Holds the single `[C, d]` tensor `vq.codebook`.
    pub codebook: ParamStore<T>,
    enc_layers: Vec<Conv2d>,
    dec_layers: Vec<Conv2d>,
}

impl<T: Scalar> VqCodec<T> {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "vq-init");
        let mut encoder = ParamStore::new();
        let mut enc_layers = Vec::new();
        let mut ch = 1;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            enc_layers.push(Conv2d::uniform(&mut encoder, &format!("vq.enc.{i}"), ch, c, 3, 2, &mut rng));
            ch = c;
        }
        enc_layers.push(Conv2d::uniform(&mut encoder, "vq.enc.out", ch, config.code_dim, 1, 1, &mut rng));

        let mut decoder = ParamStore::new();
        let dc = &config.decoder_channels;
        let mut dec_layers = vec![Conv2d::uniform(&mut decoder, "vq.dec.in", config.code_dim, dc[0], 3, 1, &mut rng)];
        for i in 0..config.stages() {
            dec_layers.push(Conv2d::uniform(&mut decoder, &format!("vq.dec.{i}"), dc[i], dc[i + 1], 3, 1, &mut rng));
        }
        let out = Conv2d::uniform(&mut decoder, "vq.dec.out", dc[config.stages()], 1, 3, 1, &mut rng);
        // start from blank paper rather than black
        decoder.get_mut(out.bias).data_mut()[0] = T::one();
        dec_layers.push(out);

        let mut codebook = ParamStore::new();
        let (c, d) = (config.codebook_size, config.code_dim);
        codebook.add("vq.codebook", Tensor::from_fn(&[c, d], |_| T::of(normal(&mut rng))));
        Ok(Self { config, encoder, decoder, codebook, enc_layers, dec_layers })
    }

    pub fn codebook_tensor(&self) -> &Tensor<T> {
        self.codebook.get(0)
    }

    /// Continuous latents `[B, d, h, w]` of images `[B, 1, H, W]` in `[0, 1]`.
    pub fn encode(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let centered = g.scale(images, T::of(2.0));
        let mut x = g.add_scalar(centered, -T::one());
        let last = self.enc_layers.len() - 1;
        for (i, layer) in self.enc_layers.iter().enumerate() {
            x = layer.forward(g, &self.encoder, x)?;
            if i < last {
                x = g.leaky_relu(x, T::of(LEAK));
            }
        }
        Ok(x)
    }

    /// Unclamped reconstruction `[B, 1, H, W]` of latents `[B, d, h, w]`.
    pub fn decode_latents(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let mut x = self.dec_layers[0].forward(g, &self.decoder, z)?;
        x = g.leaky_relu(x, T::of(LEAK));
        for layer in &self.dec_layers[1..self.dec_layers.len() - 1] {
            x = g.upsample2x(x)?;
            x = layer.forward(g, &self.decoder, x)?;
            x = g.leaky_relu(x, T::of(LEAK));
        }
        self.dec_layers[self.dec_layers.len() - 1].forward(g, &self.decoder, x)
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        let r = self.config.resolution;
        ensure!(img.width() == r && img.height() == r, "image is {}x{}, codec expects {r}x{r}", img.width(), img.height());
        Ok(())
    }

    pub fn tokenize_batch(&self, images: &[&GrayImage]) -> Result<Vec<TokenGrid>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let x = images_var(&mut g, images)?;
        let z = self.encode(&mut g, x)?;
        let rows = g.nchw_to_rows(z)?;
        let idx = quantize_nearest(g.value(rows), self.codebook_tensor())?;
        let (h, w, c) = (self.config.grid_h, self.config.grid_w, self.config.codebook_size);
        idx.chunks(h * w).map(|t| TokenGrid::new(t.to_vec(), h, w, c)).collect()
    }

    pub fn tokenize(&self, image: &GrayImage) -> Result<TokenGrid> {
        Ok(self.tokenize_batch(&[image])?.remove(0))
    }

    /// Code vectors of token grids as `[B, d, h, w]` latents.
    pub fn embed_tokens(&self, g: &mut Graph<T>, grids: &[&TokenGrid]) -> Result<Var> {
        let (h, w, c) = (self.config.grid_h, self.config.grid_w, self.config.codebook_size);
        let mut idx = Vec::with_capacity(grids.len() * h * w);
        for grid in grids {
            ensure!(grid.height() == h && grid.width() == w, "token grid {}x{} != codec grid {h}x{w}", grid.height(), grid.width());
            ensure!(grid.indices().iter().all(|&i| i < c), "token outside codebook");
            idx.extend_from_slice(grid.indices());
        }
        let book = g.leaf(self.codebook_tensor());
        let rows = g.gather_rows(book, &idx)?;
        g.rows_to_nchw(rows, grids.len(), h, w)
    }

    pub fn decode_batch(&self, grids: &[&TokenGrid]) -> Result<Vec<GrayImage>> {
        let mut g = Graph::new();
        let z = self.embed_tokens(&mut g, grids)?;
        let y = self.decode_latents(&mut g, z)?;
        Ok(var_to_images(&g, y))
    }

    /// Decodes to an image clamped to `[0, 1]`.
    pub fn decode(&self, tokens: &TokenGrid) -> Result<GrayImage> {
        Ok(self.decode_batch(&[tokens])?.remove(0))
    }

    /// Decodes raw token values; the mask sentinel is rejected.
    pub fn decode_values(&self, values: &[i64]) -> Result<GrayImage> {
        let c = self.config.codebook_size;
        let mut idx = Vec::with_capacity(values.len());
        for &v in values {
            ensure!(v != crate::masking::MASK_SENTINEL, "decoder received a masked token");
            ensure!((0..c as i64).contains(&v), "token {v} outside codebook of {c}");
            idx.push(v as usize);
        }
        self.decode(&TokenGrid::new(idx, self.config.grid_h, self.config.grid_w, c)?)
    }

    pub fn cast<U: Scalar>(&self) -> VqCodec<U> {
        VqCodec {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            codebook: self.codebook.cast(),
            enc_layers: self.enc_layers.clone(),
            dec_layers: self.dec_layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 16, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() } }
    }
}

/// Loss terms of one stage-0 step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqStepLoss {
    pub step: u64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqStepLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

/// Stage-0 codec training on sketches. `on_step` sees every step's losses.
pub fn train_vq_stage0<T: Scalar>(
    sketches: &[GrayImage],
    config: VqConfig,
    train: &VqTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&VqStepLoss),
) -> Result<VqCodec<T>> {
    if sketches.is_empty() {
        return Err(Error::Config("stage-0 training needs a nonempty corpus".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut codec = VqCodec::<T>::new(config, seed)?;
    for s in sketches {
        codec.check_image(s)?;
    }
    let (c, d) = (codec.config.codebook_size, codec.config.code_dim);
    let beta = T::of(codec.config.commitment);
    let mut adam = Adam::new(train.adam);
    let mut last_used = vec![0u64; c];

    for step in 0..train.steps {
        let mut rng = step_rng(seed, "vq-train", step);
        let batch: Vec<&GrayImage> =
            (0..train.batch_size).map(|_| &sketches[rand::Rng::random_range(&mut rng, 0..sketches.len())]).collect();

        let mut g = Graph::new();
        let x = images_var(&mut g, &batch)?;
        let z = codec.encode(&mut g, x)?;
        let ze = g.nchw_to_rows(z)?;

        if step == 0 {
            // seed the codebook with distinct encoder outputs plus jitter
            let rows = g.value(ze).len() / d;
            let book = codec.codebook.get_mut(0).data_mut();
            let picks: Vec<usize> = if rows >= c { sample(&mut rng, rows, c).into_vec() } else { (0..c).map(|i| i % rows).collect() };
            for (entry, &r) in picks.iter().enumerate() {
                for k in 0..d {
                    book[entry * d + k] = g.value(ze)[r * d + k] + T::of(1e-3 * normal(&mut rng));
                }
            }
        }

        let idx = quantize_nearest(g.value(ze), codec.codebook_tensor())?;
        for &i in &idx {
            last_used[i] = step;
        }
        let book = g.param(&codec.codebook, 0);
        let e = g.gather_rows(book, &idx)?;
        let shift: Vec<T> = g.value(e).iter().zip(g.value(ze)).map(|(&a, &b)| a - b).collect();
        let shape = g.shape(ze).to_vec();
        let shift = g.constant(&shape, shift)?;
        let zq = g.add(ze, shift)?;
        let n = batch.len();
        let (gh, gw) = (codec.config.grid_h, codec.config.grid_w);
        let zq = g.rows_to_nchw(zq, n, gh, gw)?;
        let y = codec.decode_latents(&mut g, zq)?;

        let diff = g.sub(y, x)?;
        let diff = g.abs(diff);
        let recon = g.mean(diff);
        let ze_stop = g.detach(ze);
        let e_stop = g.detach(e);
        let cb = g.sub(e, ze_stop)?;
        let cb = g.square(cb);
        let cb = g.mean(cb);
        let cm = g.sub(ze, e_stop)?;
        let cm = g.square(cm);
        let cm = g.mean(cm);
        let cm = g.scale(cm, beta);
        let partial = g.add(recon, cb)?;
        let loss = g.add(partial, cm)?;

        let grads = g.backward(loss)?;
        codec.encoder.accumulate(&grads)?;
        codec.decoder.accumulate(&grads)?;
        codec.codebook.accumulate(&grads)?;
        adam.step(&mut [&mut codec.encoder, &mut codec.decoder, &mut codec.codebook])?;
        codec.encoder.zero_grad();
        codec.decoder.zero_grad();
        codec.codebook.zero_grad();

        let dead: Vec<usize> = (0..c).filter(|&i| step - last_used[i] >= codec.config.dead_code_steps).collect();
        if !dead.is_empty() {
            let rows = g.value(ze).len() / d;
            let book = codec.codebook.get_mut(0).data_mut();
            for i in dead {
                let r = rand::Rng::random_range(&mut rng, 0..rows);
                for k in 0..d {
                    book[i * d + k] = g.value(ze)[r * d + k] + T::of(1e-3 * normal(&mut rng));
                }
                last_used[i] = step;
            }
        }

        on_step(&VqStepLoss {
            step,
            reconstruction: g.value(recon)[0].to_f64_lossy(),
            codebook: g.value(cb)[0].to_f64_lossy(),
            commitment: g.value(cm)[0].to_f64_lossy(),
        });
    }
    Ok(codec)
}

/// Mean absolute error of `decode(tokenize(y))` against `y`.
pub fn reconstruction_error<T: Scalar>(codec: &VqCodec<T>, images: &[GrayImage]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(32) {
        let refs: Vec<&GrayImage> = chunk.iter().collect();
        let tokens = codec.tokenize_batch(&refs)?;
        let grids: Vec<&TokenGrid> = tokens.iter().collect();
        for (rec, orig) in codec.decode_batch(&grids)?.iter().zip(chunk) {
            total += rec.pixels().iter().zip(orig.pixels()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            count += rec.pixels().len();
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MASK_SENTINEL;

    fn book(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn nearest_neighbour_cases() {
        let b = book(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(quantize_nearest(&[0.9, 0.8], &b).unwrap(), vec![1]);
        assert_eq!(quantize_nearest(&[0.0, 0.0], &b).unwrap(), vec![0]);
        assert_eq!(quantize_nearest(&[0.5, 0.5], &b).unwrap(), vec![0]);
        assert!(quantize_nearest(&[0.5, 0.5, 0.5], &b).is_err());
    }

    #[test]
    fn codebook_entries_map_to_themselves() {
        let codec = VqCodec::<f32>::new(VqConfig::default(), 1).unwrap();
        let idx = quantize_nearest(codec.codebook_tensor().data(), codec.codebook_tensor()).unwrap();
        assert_eq!(idx, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn tokenize_shape_and_determinism() {
        let codec = VqCodec::<f32>::new(VqConfig::default(), 3).unwrap();
        let img = GrayImage::new(32, 32, (0..1024).map(|i| (i % 7) as f32 / 6.0).collect()).unwrap();
        let a = codec.tokenize(&img).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, codec.tokenize(&img).unwrap());
        assert!(codec.tokenize(&GrayImage::filled(16, 16, 1.0)).is_err());
    }

    #[test]
    fn decode_is_total_and_bounded() {
        let codec = VqCodec::<f32>::new(VqConfig::default(), 4).unwrap();
        let grid = TokenGrid::new((0..16).map(|i| (i * 5) % 64).collect(), 4, 4, 64).unwrap();
        let img = codec.decode(&grid).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img, codec.decode(&grid).unwrap());
    }

    #[test]
    fn sentinel_never_decoded() {
        let codec = VqCodec::<f32>::new(VqConfig::default(), 4).unwrap();
        let mut values = vec![0i64; 16];
        values[3] = MASK_SENTINEL;
        assert!(matches!(codec.decode_values(&values), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(VqConfig { resolution: 30, ..Default::default() }.validate().is_err());
        assert!(VqConfig { commitment: 0.0, ..Default::default() }.validate().is_err());
        assert!(VqConfig { codebook_size: 1, ..Default::default() }.validate().is_err());
        assert!(VqConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let r = train_vq_stage0::<f32>(&[], VqConfig::default(), &VqTrainConfig::default(), 0, |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
