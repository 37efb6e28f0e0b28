//! Per-channel batch normalisation over (N, H, W).

use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
}

pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

fn dims<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "batchnorm expects NCHW");
    [s[0], s[1], s[2], s[3]]
}

/// Training-mode forward with batch statistics.
pub fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, BnCache<T>, BnBatchStats<T>) {
    let [n, c, h, w] = dims(x);
    let hw = h * w;
    let m = (n * hw) as f64;
    let eps = T::c(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            s += x.data()[base..base + hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            ss += x.data()[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::c(mu);
        var[ch] = T::c(ss / m);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for p in base..base + hw {
                let xh = (x.data()[p] - mean[ch]) * inv_std[ch];
                xhat[p] = xh;
                y.data_mut()[p] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    let unbiased = if m > 1.0 { T::c(m / (m - 1.0)) } else { T::one() };
    let stats = BnBatchStats {
        var: var.iter().map(|&v| v * unbiased).collect(),
        mean,
    };
    (
        y,
        BnCache {
            xhat,
            inv_std,
            shape: [n, c, h, w],
        },
        stats,
    )
}

/// Inference-mode forward with running statistics.
pub fn bn_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = dims(x);
    let hw = h * w;
    let eps = T::c(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let scale = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
        let shift = beta.data()[ch] - mean.data()[ch] * scale;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for p in base..base + hw {
                y.data_mut()[p] = x.data()[p] * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = cache.shape;
    let hw = h * w;
    let m = T::c((n * hw) as f64);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for p in base..base + hw {
                sum_dy += dy.data()[p];
                sum_dy_xhat += dy.data()[p] * cache.xhat[p];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for p in base..base + hw {
                dx.data_mut()[p] = k * (m * dy.data()[p] - sum_dy - cache.xhat[p] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running<T: Scalar>(running: &mut Tensor<T>, batch: &[T]) {
    let m = T::c(BN_MOMENTUM);
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_normalised_per_channel() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 0.0, 20.0]).unwrap();
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let (y, _, stats) = bn_forward_train(&x, &ones, &zeros);
        assert!((stats.mean[0] - 4.0).abs() < 1e-12);
        assert!((stats.mean[1] - 10.0).abs() < 1e-12);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|i| y.data()[(i * 2 + ch) * 2..(i * 2 + ch) * 2 + 2].to_vec())
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn eval_with_identity_stats_is_affine() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![2.0, -1.0]).unwrap();
        let g = Tensor::full(&[1], 3.0);
        let b = Tensor::full(&[1], 0.5);
        let y = bn_forward_eval(&x, &g, &b, &Tensor::zeros(&[1]), &Tensor::full(&[1], 1.0 - BN_EPS));
        assert!((y.data()[0] - 6.5).abs() < 1e-9);
        assert!((y.data()[1] + 2.5).abs() < 1e-9);
    }
}
