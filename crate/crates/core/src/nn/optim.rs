use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// First-order optimizer state. Only trainable non-buffer tensors are touched.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. If `clip` is set the gradients are rescaled so
    /// their global norm does not exceed it. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, clip: Option<f64>) -> f64 {
        let norm = grads.norm(params).to_f64().unwrap();
        let scale = match clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let lr = T::c(self.lr);
        let s = T::c(scale);
        for (name, p) in params.iter_mut() {
            if !p.trainable || p.buffer {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mom = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let mu = T::c(MOMENTUM);
                    for ((w, m), &gv) in p.value.data_mut().iter_mut().zip(mom.data_mut()).zip(g.data()) {
                        *m = mu * *m + gv * s;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let (b1, b2) = (T::c(BETA1), T::c(BETA2));
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    let eps = T::c(ADAM_EPS);
                    for (((w, mv), vv), &gv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        let gs = gv * s;
                        *mv = b1 * *mv + (T::one() - b1) * gs;
                        *vv = b2 * *vv + (T::one() - b2) * gs * gs;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_loss(w: f64) -> f64 {
        (w - 3.0) * (w - 3.0)
    }

    #[test]
    fn one_step_on_convex_probe_descends() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut store = ParamStore::<f64>::new();
            store.insert("w", Tensor::full(&[1], 0.0), false).unwrap();
            let before = probe_loss(store.get("w").data()[0]);
            let mut grads = Grads::new();
            grads.accumulate("w", Tensor::full(&[1], 2.0 * (0.0 - 3.0)));
            let mut opt = Optimizer::new(kind, 0.1);
            opt.step(&mut store, &grads, None);
            let after = probe_loss(store.get("w").data()[0]);
            assert!(after < before, "{kind:?}: {after} !< {before}");
        }
    }

    #[test]
    fn frozen_and_buffer_tensors_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::full(&[2], 1.0), false).unwrap();
        store.insert("b", Tensor::full(&[2], 1.0), true).unwrap();
        store.set_trainable("a", false);
        let mut grads = Grads::new();
        grads.accumulate("a", Tensor::full(&[2], 5.0));
        grads.accumulate("b", Tensor::full(&[2], 5.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        for _ in 0..10 {
            opt.step(&mut store, &grads, Some(1.0));
        }
        assert_eq!(store.get("a").data(), &[1.0, 1.0]);
        assert_eq!(store.get("b").data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(&[1], 0.0), false).unwrap();
        let mut grads = Grads::new();
        grads.accumulate("w", Tensor::full(&[1], 100.0));
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 1.0);
        let norm = opt.step(&mut store, &grads, Some(5.0));
        assert_eq!(norm, 100.0);
        assert!((store.get("w").data()[0] + 5.0).abs() < 1e-12);
    }
}
