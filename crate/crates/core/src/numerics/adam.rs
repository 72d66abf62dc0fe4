use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are zero-initialized and
/// parallel the parameter store by id.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |(_, p): (_, &super::Parameter<T>)| Tensor::zeros(p.value.shape());
        Self {
            config,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((w, &g), mi), vi) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                let m_hat = *mi * ibc1;
                let v_hat = *vi * ibc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn defaults_match_reported_betas() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.99));
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.25, 1e-3] {
            let mut s = store_with(1.0, g);
            let cfg = AdamConfig {
                lr: 0.01,
                ..Default::default()
            };
            let mut opt = Adam::new(cfg, &s);
            opt.step(&mut s);
            let moved = 1.0 - s.get(super::super::ParamId(0)).value.item();
            let expected = 0.01 * g.abs() / (g.abs() + cfg.eps) * g.signum();
            assert!((moved - expected).abs() < 1e-15, "{moved} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(0.7, 0.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s.get(super::super::ParamId(0)).value.item(), 0.7);
    }
}
