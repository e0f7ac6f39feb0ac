//! AdamW: Adam with decoupled weight decay.
//!
//! ```text
//! m_t = b1 m + (1 - b1) g
//! v_t = b2 v + (1 - b2) g^2
//! p  <- p - lr * wd * p - lr * (m_t / (1 - b1^t)) / (sqrt(v_t / (1 - b2^t)) + eps)
//! ```

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Restores moment buffers and step count, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        let check = |bufs: &[Tensor], what: &str| -> Result<()> {
            if bufs.len() != self.first.len() {
                return Err(Error::Checkpoint(format!(
                    "{what}: {} buffers for {} parameters",
                    bufs.len(),
                    self.first.len()
                )));
            }
            for (i, (b, own)) in bufs.iter().zip(&self.first).enumerate() {
                if b.shape() != own.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{what} buffer {i} has shape {:?}, expected {:?}",
                        b.shape(),
                        own.shape()
                    )));
                }
            }
            Ok(())
        };
        check(&first, "first moment")?;
        check(&second, "second moment")?;
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update of every parameter in `store` from its current gradient.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), m), v) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * weight_decay * *x + lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;
    use approx::assert_abs_diff_eq;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = scalar_store(1.5, 0.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 1.5);
    }

    #[test]
    fn single_step_hand_value() {
        // m_hat = 1, v_hat = 1 -> p = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut s = scalar_store(1.0, 1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert_abs_diff_eq!(s.value(ParamId(0)).item(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(s.value(ParamId(0)).item(), 0.9, epsilon = 1e-8);
    }

    #[test]
    fn decay_only_shrinks_by_factor() {
        let mut s = scalar_store(2.0, 0.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        assert_abs_diff_eq!(s.value(ParamId(0)).item(), 2.0 * (1.0 - 0.1 * 0.01), epsilon = 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let err = opt.step(&mut s).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(s.value(ParamId(0)).item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn step_count_increases() {
        let mut s = scalar_store(1.0, 0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        for i in 1..=3 {
            opt.step(&mut s).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }
}
