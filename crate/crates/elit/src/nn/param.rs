//! Learnable parameters and the visitor used by the optimizer, EMA,
//! checkpointing, and gradient checks.

use ndarray::{Array, ArrayViewMutD, Dimension};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type the whole model is generic over.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE: &'static str;

    fn of_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn std_normal<R: Rng>(rng: &mut R) -> Self;
    fn to_le_bytes(self) -> Vec<u8>;
    fn from_le_bytes(bytes: &[u8]) -> Self;
    /// Bytes per element.
    const WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;

    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn to_le_bytes(self) -> Vec<u8> {
        f32::to_le_bytes(self).to_vec()
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;

    fn of_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn to_le_bytes(self) -> Vec<u8> {
        f64::to_le_bytes(self).to_vec()
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Shorthand for converting literal constants into the model scalar type.
pub fn c<F: Scalar>(x: f64) -> F {
    F::of_f64(x)
}

/// A value tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar, D: Dimension> {
    pub v: Array<F, D>,
    pub g: Array<F, D>,
}

impl<F: Scalar, D: Dimension> Param<F, D> {
    pub fn new(v: Array<F, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Param { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(F::zero());
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn ParamVisitor<F>) {
        f.visit(name, self.v.view_mut().into_dyn(), self.g.view_mut().into_dyn());
    }
}

/// Callback over every named parameter (value view, grad view).
///
/// Visit order is fixed by construction, which makes checkpoint bytes stable.
pub trait ParamVisitor<F: Scalar> {
    fn visit(&mut self, name: &str, value: ArrayViewMutD<F>, grad: ArrayViewMutD<F>);
}

impl<F: Scalar, T: FnMut(&str, ArrayViewMutD<F>, ArrayViewMutD<F>)> ParamVisitor<F> for T {
    fn visit(&mut self, name: &str, value: ArrayViewMutD<F>, grad: ArrayViewMutD<F>) {
        self(name, value, grad)
    }
}

/// Truncated-normal init (std `std`, resampled outside two standard deviations).
pub fn trunc_normal<F: Scalar, R: Rng>(rng: &mut R, std: f64) -> F {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return c(z * std);
        }
    }
}
