use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Pointwise nonlinearities available to the model and the adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    /// Exact form `x·Φ(x)`.
    Gelu,
    /// Cubic tanh approximation of GELU.
    GeluNew,
    Silu,
    Sigmoid,
    Mish,
}

impl Activation {
    pub const ALL: [Activation; 7] = [
        Activation::None,
        Activation::Relu,
        Activation::Gelu,
        Activation::GeluNew,
        Activation::Silu,
        Activation::Sigmoid,
        Activation::Mish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::GeluNew => "gelu_new",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Mish => "mish",
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        let half = T::lit(0.5);
        match self {
            Activation::None => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => half * x * (one + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            Activation::GeluNew => {
                let inner = gelu_new_inner(x);
                half * x * (one + inner.tanh())
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Mish => x * softplus(x).tanh(),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let one = T::one();
        let half = T::lit(0.5);
        match self {
            Activation::None => one,
            Activation::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let cdf = half * (one + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Activation::GeluNew => {
                let k = T::lit(GELU_K);
                let c = T::lit(GELU_C);
                let t = gelu_new_inner(x).tanh();
                half * (one + t) + half * x * (one - t * t) * k * (one + T::lit(3.0) * c * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (one - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (one - s)
            }
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (one - t * t) * sigmoid(x)
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_new_inner<T: Scalar>(x: T) -> T {
    T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0f64), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Mish.apply(0.0f64), 0.0);
        assert_eq!(Activation::None.apply(-2.5f64), -2.5);
    }

    #[test]
    fn gelu_variants_agree_roughly() {
        for i in -30..=30 {
            let x = i as f64 * 0.2;
            let exact = Activation::Gelu.apply(x);
            let approx = Activation::GeluNew.apply(x);
            assert!((exact - approx).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for act in Activation::ALL {
            for &x in &[-2.3f64, -0.7, 0.4, 1.9, 3.1] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let an = act.derivative(x);
                assert!((fd - an).abs() < 1e-8, "{act} at {x}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!(Activation::Mish.apply(-800.0f64).abs() < 1e-300);
    }
}
