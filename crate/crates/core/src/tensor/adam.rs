use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with bias correction. State is keyed by parameter name, so several
/// stores can be stepped together as long as their names do not collide.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    pub fn from_parts(config: AdamConfig, step: u64, state: BTreeMap<String, Moments<T>>) -> Self {
        Self { config, step, state }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    /// One update of every trainable parameter that holds a gradient.
    /// Parameters without a gradient are skipped; gradients are left as-is.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
        for store in stores.iter() {
            for (name, p) in store.iter() {
                if let (Some(g), Some(s)) = (p.grad(), self.state.get(name)) {
                    ensure!(
                        g.len() == p.numel() && s.m.shape() == p.shape(),
                        "adam: parameter {name} shape {:?} does not match its state {:?}",
                        p.shape(),
                        s.m.shape()
                    );
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for store in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                if !p.requires_grad() {
                    continue;
                }
                let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
                let shape = p.shape().to_vec();
                let st = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| Moments { m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) });
                let (m, v) = (st.m.data_mut(), st.v.data_mut());
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    let gi = g[i].to_f64_lossy();
                    let mi = beta1 * m[i].to_f64_lossy() + (1.0 - beta1) * gi;
                    let vi = beta2 * v[i].to_f64_lossy() + (1.0 - beta2) * gi * gi;
                    m[i] = T::of(mi);
                    v[i] = T::of(vi);
                    let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                    *w = T::of(w.to_f64_lossy() - update);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(value: f32, grad: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[3], vec![value; 3]).unwrap());
        s.get_mut(0).accumulate_grad(&[grad; 3]).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with_grad(0.5, 1.0);
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
        adam.step(&mut [&mut s]).unwrap();
        for &w in s.get(0).data() {
            assert!((w - (0.5 - 1e-3)).abs() < 1e-7, "{w}");
        }
        assert_eq!(s.get(0).grad().unwrap(), &[1.0; 3]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with_grad(0.25, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut s]).unwrap();
        }
        assert_eq!(s.get(0).data(), &[0.25; 3]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = ParamStore::<f32>::new();
            s.add("p", Tensor::from_fn(&[8], |i| (i as f32 * 0.3).sin()));
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..20 {
                s.zero_grad();
                let g: Vec<f32> = s.get(0).data().iter().map(|w| w * 2.0 + k as f32 * 0.01).collect();
                s.get_mut(0).accumulate_grad(&g).unwrap();
                adam.step(&mut [&mut s]).unwrap();
            }
            s.get(0).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_shape_mismatch_rejected() {
        let mut a = store_with_grad(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut a]).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add("p", Tensor::zeros(&[4]));
        b.get_mut(0).accumulate_grad(&[1.0; 4]).unwrap();
        assert!(adam.step(&mut [&mut b]).is_err());
    }
}
