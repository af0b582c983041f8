use std::collections::HashMap;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// AdamW (decoupled decay, then bias-corrected Adam) or SGD with L2 decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimizerKind::AdamW, lr, weight_decay)
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, lr, weight_decay)
    }

    pub fn with_kind(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its accumulated gradient, then zeroes gradients.
    /// Parameters with `requires_grad == false` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in store.iter() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (lr, wd) = (self.lr, self.weight_decay);
        for (name, p) in store.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in p.data_mut().iter_mut().zip(&g) {
                        *w -= lr * (gv + wd * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let n = g.len();
                    let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        *w -= lr * wd * *w;
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *w -= lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::new(&[1], vec![value], true).unwrap();
        t.grad_mut().unwrap()[0] = grad;
        s.insert("theta", t);
        s
    }

    #[test]
    fn sgd_hand_step() {
        let mut s = one_param(1.0, 2.0);
        Optimizer::sgd(0.1, 0.0).step(&mut s).unwrap();
        assert!((s.get("theta").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.get("theta").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn sgd_zero_lr_is_bitwise_noop() {
        let mut s = one_param(0.123456789, 3.0);
        Optimizer::sgd(0.0, 0.01).step(&mut s).unwrap();
        assert_eq!(s.get("theta").unwrap().data()[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut s = one_param(1.0, 1.0);
        Optimizer::adamw(1e-3, 0.0).step(&mut s).unwrap();
        let delta = s.get("theta").unwrap().data()[0] - 1.0;
        assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let lr = 1e-3;
        let mut a = one_param(1.0, 1.0);
        let mut b = one_param(1.0, 1.0);
        Optimizer::adamw(lr, 0.0).step(&mut a).unwrap();
        Optimizer::adamw(lr, 1e-8).step(&mut b).unwrap();
        let diff = b.get("theta").unwrap().data()[0] - a.get("theta").unwrap().data()[0];
        assert!((diff + lr * 1e-8).abs() < 1e-18, "{diff}");
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut s = one_param(1.0, 1.0);
        let mut frozen = Tensor::new(&[1], vec![1.0], false).unwrap();
        frozen.set_requires_grad(false);
        s.insert("frozen", frozen);
        assert!(Optimizer::sgd(0.1, 0.0).step(&mut s).is_ok());

        s.get_mut("theta").unwrap().take_grad();
        let err = Optimizer::sgd(0.1, 0.0).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "theta"));
    }
}
