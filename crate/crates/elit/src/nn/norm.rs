//! Layer normalization (affine-free, pre-norm style) and RMS normalization
//! with a learnable gain (QK-norm).

use ndarray::{Array1, Array2, Axis};

use super::param::{c, Param, ParamVisitor, Scalar};

const EPS: f64 = 1e-6;

/// Cache for the LayerNorm backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<F: Scalar> {
    /// Normalized input (the output itself, since there is no affine).
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

/// LayerNorm without learnable affine; scale/shift come from adaLN modulation.
#[derive(Debug, Clone, Default)]
pub struct LayerNorm;

impl LayerNorm {
    pub fn forward<F: Scalar>(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let n = c::<F>(x.ncols() as f64);
        let mean = x.mean_axis(Axis(1)).expect("nonempty rows");
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.axis_iter_mut(Axis(0)).zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| F::one() / (v + c::<F>(EPS)).sqrt());
        for (mut row, &s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let cache = LnCache {
            xhat: xhat.clone(),
            inv_std,
        };
        (xhat, cache)
    }

    pub fn backward<F: Scalar>(&self, cache: &LnCache<F>, gy: &Array2<F>) -> Array2<F> {
        let n = c::<F>(gy.ncols() as f64);
        let mut gx = gy.clone();
        // gx = inv_std * (gy - mean(gy) - xhat * mean(gy * xhat)) per row
        let gy_mean = gy.sum_axis(Axis(1)) / n;
        let proj = (gy * &cache.xhat).sum_axis(Axis(1)) / n;
        for ((mut row, xr), (&gm, (&p, &s))) in gx
            .axis_iter_mut(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(gy_mean.iter().zip(proj.iter().zip(cache.inv_std.iter())))
        {
            for (v, &xh) in row.iter_mut().zip(xr.iter()) {
                *v = s * (*v - gm - xh * p);
            }
        }
        gx
    }
}

/// Cache for the RmsNorm backward pass.
#[derive(Debug, Clone)]
pub struct RmsCache<F: Scalar> {
    /// `x / rms(x)` before the gain.
    pub u: Array2<F>,
    pub inv_rms: Array1<F>,
}

/// RMSNorm over the last axis with a learnable gain vector.
#[derive(Debug, Clone)]
pub struct RmsNorm<F: Scalar> {
    pub gain: Param<F, ndarray::Ix1>,
}

impl<F: Scalar> RmsNorm<F> {
    pub fn new(dim: usize) -> Self {
        RmsNorm {
            gain: Param::new(Array1::ones(dim)),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, RmsCache<F>) {
        let n = c::<F>(x.ncols() as f64);
        let ms = x.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_rms = ms.mapv(|v| F::one() / (v + c::<F>(EPS)).sqrt());
        let mut u = x.clone();
        for (mut row, &s) in u.axis_iter_mut(Axis(0)).zip(inv_rms.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let y = &u * &self.gain.v;
        (y, RmsCache { u, inv_rms })
    }

    pub fn backward(&mut self, cache: &RmsCache<F>, gy: &Array2<F>) -> Array2<F> {
        let n = c::<F>(gy.ncols() as f64);
        self.gain.g += &(gy * &cache.u).sum_axis(Axis(0));
        let gu = gy * &self.gain.v;
        let proj = (&gu * &cache.u).sum_axis(Axis(1)) / n;
        let mut gx = gu;
        for ((mut row, ur), (&p, &s)) in gx
            .axis_iter_mut(Axis(0))
            .zip(cache.u.axis_iter(Axis(0)))
            .zip(proj.iter().zip(cache.inv_rms.iter()))
        {
            for (v, &uu) in row.iter_mut().zip(ur.iter()) {
                *v = s * (*v - uu * p);
            }
        }
        gx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn ParamVisitor<F>) {
        self.gain.visit(&format!("{prefix}.gain"), f);
    }

    pub fn zero_grad(&mut self) {
        self.gain.zero_grad();
    }
}
