//! Detection and intention losses with their gradients w.r.t. the raw
//! grid-layout logits. Arithmetic is carried out in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::activation::{sigmoid, softplus};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetLossWeights {
    pub noobj: f64,
    #[serde(rename = "box")]
    pub box_: f64,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        DetLossWeights { noobj: 0.5, box_: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLossTerms {
    pub objectness: f64,
    pub class: f64,
    #[serde(rename = "box")]
    pub box_: f64,
}

impl DetLossTerms {
    pub fn total(&self) -> f64 {
        self.objectness + self.class + self.box_
    }
}

pub struct LossOut<T, Terms> {
    pub loss: f64,
    pub terms: Terms,
    /// One gradient tensor per input tensor, same shapes.
    pub grads: Vec<Tensor<T>>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Summed over cells per image, averaged over the batch. Objectness is a
/// logistic cross entropy on every slot (no-object slots weighted by
/// `noobj`); class cross entropy and the squared error on
/// `(σ(tx), σ(ty), tw, th)` apply only where objectness is 1.
pub fn detection_loss<T: Scalar>(
    raw: &[Tensor<T>],
    targets: &[&Tensor<f64>],
    spec: &GridSpec,
    weights: DetLossWeights,
) -> Result<LossOut<T, DetLossTerms>> {
    if raw.len() != targets.len() || raw.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", raw.len(), targets.len())));
    }
    let nc = spec.n_classes;
    let c = spec.det_channels();
    let scale = 1.0 / raw.len() as f64;
    let mut terms = DetLossTerms::default();
    let mut grads = Vec::with_capacity(raw.len());
    for (r, t) in raw.iter().zip(targets) {
        if r.shape() != t.shape() || r.shape().last() != Some(&c) {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?}", r.shape(), t.shape())));
        }
        if !r.all_finite() {
            return Err(Error::Numeric("non-finite detection logits".into()));
        }
        let mut g = vec![T::zero(); r.numel()];
        for (slot, (z, y)) in r.data().chunks(c).zip(t.data().chunks(c)).enumerate() {
            let z: Vec<f64> = z.iter().map(|v| v.to_f64().unwrap()).collect();
            let gs = &mut g[slot * c..(slot + 1) * c];
            let obj = y[0] > 0.5;
            let w = if obj { 1.0 } else { weights.noobj };
            let target = if obj { 1.0 } else { 0.0 };
            terms.objectness += scale * w * (softplus(z[0]) - target * z[0]);
            gs[0] = T::c(scale * w * (sigmoid(z[0]) - target));
            if !obj {
                continue;
            }
            let p = softmax(&z[1..1 + nc]);
            let cls = y[1..1 + nc].iter().position(|&v| v > 0.5).unwrap_or(0);
            terms.class += scale * -(p[cls].max(f64::MIN_POSITIVE)).ln();
            for k in 0..nc {
                let onehot = if k == cls { 1.0 } else { 0.0 };
                gs[1 + k] = T::c(scale * (p[k] - onehot));
            }
            for b in 0..4 {
                let idx = 1 + nc + b;
                if b < 2 {
                    let s = sigmoid(z[idx]);
                    let d = s - y[idx];
                    terms.box_ += scale * weights.box_ * d * d;
                    gs[idx] = T::c(scale * weights.box_ * 2.0 * d * s * (1.0 - s));
                } else {
                    let d = z[idx] - y[idx];
                    terms.box_ += scale * weights.box_ * d * d;
                    gs[idx] = T::c(scale * weights.box_ * 2.0 * d);
                }
            }
        }
        grads.push(Tensor::from_vec(r.shape(), g)?);
    }
    Ok(LossOut {
        loss: terms.total(),
        terms,
        grads,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentLossTerms {
    pub masked_cells: usize,
}

/// Softmax cross entropy summed over masked slots of the whole batch and
/// divided by the number of masked slots (0 when there are none).
/// Gradients are exactly zero at unmasked slots.
pub fn intent_loss<T: Scalar>(
    logits: &[Tensor<T>],
    targets: &[&Tensor<f64>],
    masks: &[&Tensor<f64>],
) -> Result<LossOut<T, IntentLossTerms>> {
    if logits.len() != targets.len() || logits.len() != masks.len() {
        return Err(Error::Shape("intent loss batch sizes differ".into()));
    }
    let count: usize = masks.iter().map(|m| m.data().iter().filter(|&&v| v > 0.5).count()).sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((z, y), m) in logits.iter().zip(targets).zip(masks) {
        let ni = *z.shape().last().unwrap_or(&0);
        if z.shape() != y.shape() || z.numel() != m.numel() * ni {
            return Err(Error::Shape(format!(
                "logits {:?}, target {:?}, mask {:?}",
                z.shape(),
                y.shape(),
                m.shape()
            )));
        }
        let mut g = vec![T::zero(); z.numel()];
        for (slot, &mv) in m.data().iter().enumerate() {
            if mv <= 0.5 {
                continue;
            }
            let zs: Vec<f64> = z.data()[slot * ni..(slot + 1) * ni]
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect();
            let ys = &y.data()[slot * ni..(slot + 1) * ni];
            let p = softmax(&zs);
            let inv = 1.0 / count as f64;
            for k in 0..ni {
                if ys[k] > 0.0 {
                    loss -= inv * ys[k] * p[k].max(f64::MIN_POSITIVE).ln();
                }
                g[slot * ni + k] = T::c(inv * (p[k] - ys[k]));
            }
        }
        grads.push(Tensor::from_vec(z.shape(), g)?);
    }
    Ok(LossOut {
        loss,
        terms: IntentLossTerms { masked_cells: count },
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::grid::{encode_targets, target_to_logits, GtObject};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> GridSpec {
        GridSpec {
            h: 3,
            w: 4,
            stride: 32,
            anchors: vec![(16.0, 40.0), (48.0, 48.0)],
            n_classes: 4,
            n_intents: 2,
        }
    }

    #[test]
    fn empty_target_at_even_odds() {
        let s = spec();
        let raw = Tensor::<f64>::zeros(&[3, 4, 2, 9]);
        let t = Tensor::zeros(&[3, 4, 2, 9]);
        let out = detection_loss(&[raw], &[&t], &s, DetLossWeights::default()).unwrap();
        let want = 0.5 * 3.0 * 4.0 * 2.0 * 2f64.ln();
        assert!((out.loss - want).abs() < 1e-12);
    }

    #[test]
    fn logit_encoded_target_leaves_background_only() {
        let s = spec();
        let objs = vec![
            GtObject {
                bbox: BBox::new(40.0, 50.0, 14.0, 36.0),
                class: 0,
                intent: Some(1),
            },
            GtObject {
                bbox: BBox::new(100.0, 20.0, 50.0, 40.0),
                class: 2,
                intent: None,
            },
        ];
        let enc = encode_targets(&objs, &s);
        let raw = target_to_logits(&enc.detection, &s, 30.0);
        let out = detection_loss(&[raw], &[&enc.detection], &s, DetLossWeights::default()).unwrap();
        assert!(out.terms.class < 1e-8);
        assert!(out.terms.box_ < 1e-8);
        assert!(out.terms.objectness < 1e-8);
    }

    #[test]
    fn equal_intent_logits_cost_ln2() {
        let z = Tensor::<f64>::zeros(&[1, 2, 1, 2]);
        let mut y = Tensor::zeros(&[1, 2, 1, 2]);
        y.data_mut()[1] = 1.0;
        let mut m = Tensor::zeros(&[1, 2, 1]);
        m.data_mut()[0] = 1.0;
        let out = intent_loss(&[z], &[&y], &[&m]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(&out.grads[0].data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn empty_mask_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::from_vec(&[2, 2, 3, 2], (0..24).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = Tensor::zeros(&[2, 2, 3, 2]);
        let m = Tensor::zeros(&[2, 2, 3]);
        let out = intent_loss(&[z], &[&y], &[&m]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads[0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nan_logits_rejected() {
        let s = spec();
        let mut raw = Tensor::<f32>::zeros(&[3, 4, 2, 9]);
        raw.data_mut()[5] = f32::NAN;
        let t = Tensor::zeros(&[3, 4, 2, 9]);
        assert!(matches!(
            detection_loss(&[raw], &[&t], &s, DetLossWeights::default()),
            Err(Error::Numeric(_))
        ));
    }
}
