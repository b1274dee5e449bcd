//! Parameter bundles for the layers the models are assembled from.

use rand::Rng as _;

use crate::error::Result;
use crate::rng::{normal, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(normal(rng) * std))
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    /// Gaussian weights scaled by `gain / sqrt(fan_in)`, zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), gaussian(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            gaussian(&[out_ch, in_ch, kernel, kernel], gain / (fan_in as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn uniform<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        let weight = store.add(format!("{name}.weight"), draw(&[out_ch, in_ch, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), draw(&[out_ch]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}
