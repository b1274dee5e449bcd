//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over elements of `|g_analytic - g_fd| / max(1, |g_fd|)` for the
/// scalar function `f` at `x`, with central differences of step `h`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    ensure!(h > 0.0, "finite difference step must be positive, got {h}");
    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().with_grad());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = match grads.wrt(xv) {
        Some(gr) => gr.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; x.numel()],
    };

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out)[0].to_f64_lossy())
    };
    let mut worst = 0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::of(orig.to_f64_lossy() + h);
        let up = eval(&probe)?;
        probe.data_mut()[i] = T::of(orig.to_f64_lossy() - h);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)` for every trainable parameter.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Finite-difference check of a loss with respect to every trainable
/// parameter of `store`, one element at a time.
pub fn finite_diff_check_params<T, F>(f: F, store: &mut ParamStore<T>, h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    ensure!(h > 0.0, "finite difference step must be positive, got {h}");
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;

    let mut per_param = Vec::new();
    for id in 0..store.len() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let name = store.name(id).to_string();
        let analytic = grads.param(&name).unwrap_or_else(|| vec![T::zero(); store.get(id).numel()]);
        let mut worst = 0f64;
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[i] = T::of(v);
                let mut g = Graph::new();
                let out = f(&mut g, store)?;
                Ok(g.value(out)[0].to_f64_lossy())
            };
            let up = eval(orig.to_f64_lossy() + h)?;
            let down = eval(orig.to_f64_lossy() - h)?;
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i].to_f64_lossy(), (up - down) / (2.0 * h)));
        }
        per_param.push((name, worst));
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = Tensor::scalar(3.0f64);
        let err = finite_diff_check(|g, x| g.mul(x, x), &x, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_detected() {
        // relu at a kink: the one-sided analytic derivative disagrees with
        // the symmetric difference.
        let x = Tensor::new(&[1], vec![0.0f64]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn nonpositive_step_rejected() {
        let x = Tensor::scalar(1.0f64);
        assert!(finite_diff_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }
}
