//! Dense layer with explicit backward pass.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::count::{Bucket, Ctx, MatKind};
use super::param::{trunc_normal, Param, ParamVisitor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, std 0.02.
    TruncNormal,
    /// All-zero weight and bias (adaLN gates, final projection).
    Zeros,
}

/// `y = x · w + b` with `w: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: Param<F, ndarray::Ix2>,
    pub b: Param<F, ndarray::Ix1>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, init: Init) -> Self {
        let w = match init {
            Init::TruncNormal => {
                Array2::from_shape_simple_fn((d_in, d_out), || trunc_normal(rng, 0.02))
            }
            Init::Zeros => Array2::zeros((d_in, d_out)),
        };
        Linear {
            w: Param::new(w),
            b: Param::new(Array1::zeros(d_out)),
        }
    }

    pub fn forward(&self, x: &Array2<F>, ctx: &mut Ctx, bucket: Bucket) -> Array2<F> {
        let mut y = ctx.matmul(x.view(), self.w.v.view(), bucket, MatKind::Proj);
        y += &self.b.v;
        y
    }

    /// Accumulates weight/bias grads; returns the input grad.
    pub fn backward(&mut self, x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
        self.w.g += &x.t().dot(gy);
        self.b.g += &gy.sum_axis(Axis(0));
        gy.dot(&self.w.v.t())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.w.visit(&format!("{prefix}.w"), f);
        self.b.visit(&format!("{prefix}.b"), f);
    }

    pub fn zero_grad(&mut self) {
        self.w.zero_grad();
        self.b.zero_grad();
    }
}
