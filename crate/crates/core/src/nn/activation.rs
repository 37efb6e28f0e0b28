use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Leaky,
    Linear,
}

impl Activation {
    pub fn forward<T: Scalar>(self, x: Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Linear => x,
            Activation::Leaky => {
                let s = T::c(LEAKY_SLOPE);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
        }
    }

    /// Gradient through the activation given its output `y` (the sign of
    /// the output equals the sign of the input for both activations).
    pub fn backward<T: Scalar>(self, dy: Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Linear => dy,
            Activation::Leaky => {
                let s = T::c(LEAKY_SLOPE);
                let mut dx = dy;
                for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *d *= s;
                    }
                }
                dx
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_zero_is_zero() {
        let y = Activation::Leaky.forward(Tensor::<f32>::zeros(&[3]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(-40.0f64) - (-40.0f64).exp()).abs() < 1e-25);
        assert!((logit(sigmoid(1.3f64)) - 1.3).abs() < 1e-12);
    }
}
