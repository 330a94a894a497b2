//! GELU activation (tanh approximation), rank-agnostic.

use ndarray::ArrayD;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// d gelu / dx for the tanh approximation.
pub fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug)]
pub struct GeluCache {
    input: ArrayD<f64>,
}

pub fn gelu_forward(x: &ArrayD<f64>) -> (ArrayD<f64>, GeluCache) {
    (x.mapv(gelu), GeluCache { input: x.clone() })
}

pub fn gelu_backward(cache: &GeluCache, grad_out: &ArrayD<f64>) -> ArrayD<f64> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(&cache.input).for_each(|g, &x| *g *= gelu_prime(x));
    g
}
