use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    assert!(max_norm > T::zero(), "max_norm must be positive");
    let norm = grads.iter().map(Tensor::norm_sq).sum::<T>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 5.0,
        }
    }
}

/// AdamW moments and step counter, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(Tensor::zeros_like).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One decoupled-weight-decay Adam update. Gradients must already be clipped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer expects {} gradients, got {}",
                params.len(),
                grads.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adamw_step", params.get(id).shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numerics(format!(
                    "non-finite gradient for parameter `{}`",
                    params.name(id)
                )));
            }
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(values.to_vec()));
        s
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut g = vec![Tensor::row(vec![6.0, 8.0])];
        let norm = clip_grad_norm(&mut g, 5.0);
        assert_eq!(norm, 10.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);

        let mut g = vec![Tensor::row(vec![3.0, 4.0])];
        clip_grad_norm(&mut g, 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);

        let mut g = vec![Tensor::row(vec![1.8]), Tensor::row(vec![2.4])];
        clip_grad_norm(&mut g, 5.0);
        assert_eq!(g[0].data(), &[1.8]);
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut params = store(&[2.0, -4.0]);
        let mut opt = OptimizerState::new(cfg, &params);
        opt.step(&mut params, &[Tensor::zeros(1, 2)]).unwrap();
        let factor = 1.0 - 0.1 * 0.5;
        assert_eq!(params.tensors()[0].data(), &[2.0 * factor, -4.0 * factor]);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut params = store(&[0.0]);
        let mut opt = OptimizerState::new(cfg, &params);
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut params, &[Tensor::row(vec![0.37])]).unwrap();
            let now = params.tensors()[0].data()[0];
            let delta: f64 = prev - now;
            assert!((delta - 1e-3).abs() < 1e-3 * 1e-6, "delta {delta}");
            prev = now;
        }
    }

    #[test]
    fn zero_lr_and_decay_leave_params_unchanged() {
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut params = store(&[1.5, -0.25]);
        let before = params.clone();
        let mut opt = OptimizerState::new(cfg, &params);
        opt.step(&mut params, &[Tensor::row(vec![3.0, -7.0])]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = store(&[1.0]);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &params);
        let err = opt.step(&mut params, &[Tensor::row(vec![f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(opt.step, 0);
    }
}
