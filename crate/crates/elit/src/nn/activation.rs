//! Elementwise activations with explicit derivatives.

use ndarray::Array2;

use super::param::{c, Scalar};

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_COEF: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| {
        let inner = c::<F>(SQRT_2_OVER_PI) * (v + c::<F>(GELU_COEF) * v * v * v);
        c::<F>(0.5) * v * (F::one() + inner.tanh())
    })
}

/// `d gelu/dx` evaluated at the cached input, times the incoming grad.
pub fn gelu_backward<F: Scalar>(x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
    let mut gx = gy.clone();
    for (g, &v) in gx.iter_mut().zip(x.iter()) {
        let inner = c::<F>(SQRT_2_OVER_PI) * (v + c::<F>(GELU_COEF) * v * v * v);
        let t = inner.tanh();
        let sech2 = F::one() - t * t;
        let dinner = c::<F>(SQRT_2_OVER_PI) * (F::one() + c::<F>(3.0 * GELU_COEF) * v * v);
        let d = c::<F>(0.5) * (F::one() + t) + c::<F>(0.5) * v * sech2 * dinner;
        *g = *g * d;
    }
    gx
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// SiLU (x·sigmoid(x)) on a 1-D slice, returning output.
pub fn silu<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// SiLU derivative at the cached input, times the incoming grad.
pub fn silu_backward<F: Scalar>(x: &[F], gy: &[F]) -> Vec<F> {
    x.iter()
        .zip(gy.iter())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (F::one() - s))
        })
        .collect()
}
