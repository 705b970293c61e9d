use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are shaped like their parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter; `grads` is aligned with `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, g) in grads.iter().enumerate() {
            let shape = store.iter().nth(i).map(|p| p.value.shape().to_vec()).unwrap_or_default();
            if g.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch { op: "adamw_step", lhs: shape, rhs: g.shape().to_vec() });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let id = super::ParamId(i);
            if !store.get(id).trainable {
                continue;
            }
            let p = store.value_mut(id).data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] *= 1.0 - c.lr * c.weight_decay;
                p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![v]), true);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = store(0.75);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(s.by_name("p").unwrap().data(), &[0.75]);
    }

    #[test]
    fn single_step_oracle() {
        // First step: m̂ = g, v̂ = g², so Δp = −lr·g/(|g| + eps).
        let lr = 1e-5;
        let mut s = store(1.0);
        let cfg = AdamWConfig { lr, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[Tensor::from_vec(vec![1.0])]).unwrap();
        let expected = 1.0 - lr * (1.0 / (1.0 + 1e-8));
        assert!((s.by_name("p").unwrap().data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut s = store(1.0);
        s.insert("stats", Tensor::from_vec(vec![2.0]), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let g = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![1.0])];
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.by_name("stats").unwrap().data(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let bad = opt.step(&mut s, &[Tensor::zeros(&[2])]);
        assert!(matches!(bad, Err(TensorError::ShapeMismatch { .. })));
    }
}
