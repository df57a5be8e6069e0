//! Rectified-flow objective: linear probability path, logit-normal timestep
//! sampling, velocity regression loss, and a uniform-grid Euler ODE sampler.

use ndarray::ArrayD;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::param::c;
use crate::nn::Scalar;

/// Logit-normal distribution over timesteps: `t = sigmoid(location + scale·z)`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TimestepDistribution {
    pub location: f64,
    pub scale: f64,
}

impl Default for TimestepDistribution {
    fn default() -> Self {
        TimestepDistribution {
            location: 0.0,
            scale: 1.0,
        }
    }
}

impl TimestepDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::config(format!(
                "flow.timestep.scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// One training draw from the linear noise→data path.
#[derive(Debug, Clone)]
pub struct FlowSample<F: Scalar> {
    pub x0: ArrayD<F>,
    pub x1: ArrayD<F>,
    pub t: F,
    pub xt: ArrayD<F>,
    /// Constant along the path: `x1 − x0`.
    pub v_target: ArrayD<F>,
}

impl<F: Scalar> FlowSample<F> {
    pub fn new(x0: ArrayD<F>, x1: ArrayD<F>, t: F) -> Result<Self> {
        let xt = interpolate_path(&x0, &x1, t)?;
        let v_target = &x1 - &x0;
        Ok(FlowSample {
            x0,
            x1,
            t,
            xt,
            v_target,
        })
    }
}

/// Draw `n` timesteps in the open interval (0,1). Sigmoid of a Gaussian never
/// reaches the endpoints exactly in floating point for reasonable scales.
pub fn sample_timesteps<F: Scalar, R: Rng>(
    n: usize,
    dist: &TimestepDistribution,
    rng: &mut R,
) -> Result<Vec<F>> {
    dist.validate()?;
    Ok((0..n)
        .map(|_| {
            let z: F = F::std_normal(rng);
            let x = c::<F>(dist.location) + c::<F>(dist.scale) * z;
            let t = F::one() / (F::one() + (-x).exp());
            // clamp away from the closed endpoints that extreme draws can hit
            t.max(c(1e-7)).min(c(1.0 - 1e-7))
        })
        .collect())
}

/// `(1−t)·x0 + t·x1`.
pub fn interpolate_path<F: Scalar>(x0: &ArrayD<F>, x1: &ArrayD<F>, t: F) -> Result<ArrayD<F>> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(format!(
            "interpolate_path: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    Ok(x0 * (F::one() - t) + &(x1 * t))
}

/// Mean squared error between `pred_v` and `x1 − x0` over unmasked positions.
pub fn rf_loss<F: Scalar>(
    pred_v: &ArrayD<F>,
    x0: &ArrayD<F>,
    x1: &ArrayD<F>,
    mask: Option<&ArrayD<bool>>,
) -> Result<F> {
    if pred_v.shape() != x0.shape() || x0.shape() != x1.shape() {
        return Err(Error::shape("rf_loss: operand shapes differ"));
    }
    let mut sum = F::zero();
    let mut count = 0usize;
    match mask {
        None => {
            for ((&p, &a), &b) in pred_v.iter().zip(x0.iter()).zip(x1.iter()) {
                let e = p - (b - a);
                sum = sum + e * e;
            }
            count = pred_v.len();
        }
        Some(m) => {
            if m.shape() != pred_v.shape() {
                return Err(Error::shape("rf_loss: mask shape differs"));
            }
            for (((&p, &a), &b), &keep) in
                pred_v.iter().zip(x0.iter()).zip(x1.iter()).zip(m.iter())
            {
                if keep {
                    let e = p - (b - a);
                    sum = sum + e * e;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::config("rf_loss: mask excludes every element"));
    }
    Ok(sum / c(count as f64))
}

/// Gradient of [`rf_loss`] w.r.t. `pred_v`: `2(pred−target)/count` on kept
/// positions, zero elsewhere.
pub fn rf_loss_grad<F: Scalar>(
    pred_v: &ArrayD<F>,
    x0: &ArrayD<F>,
    x1: &ArrayD<F>,
    mask: Option<&ArrayD<bool>>,
) -> Result<ArrayD<F>> {
    let count = match mask {
        None => pred_v.len(),
        Some(m) => m.iter().filter(|&&k| k).count(),
    };
    if count == 0 {
        return Err(Error::config("rf_loss: mask excludes every element"));
    }
    let scale = c::<F>(2.0 / count as f64);
    let mut g = pred_v - &(x1 - x0);
    g.mapv_inplace(|v| v * scale);
    if let Some(m) = mask {
        for (gv, &keep) in g.iter_mut().zip(m.iter()) {
            if !keep {
                *gv = F::zero();
            }
        }
    }
    Ok(g)
}

/// Integrate `x ← x + Δt·v(x, t)` on the uniform grid `t = i/steps`,
/// `i = 0..steps`. Deterministic given `x0` and the velocity field.
pub fn euler_sample<F: Scalar>(
    velocity: &mut dyn FnMut(&ArrayD<F>, F) -> Result<ArrayD<F>>,
    x0: &ArrayD<F>,
    steps: usize,
) -> Result<ArrayD<F>> {
    if steps == 0 {
        return Err(Error::config("euler_sample: steps must be >= 1"));
    }
    let dt = c::<F>(1.0 / steps as f64);
    let mut x = x0.clone();
    for i in 0..steps {
        let t = c::<F>(i as f64 / steps as f64);
        let v = velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler_sample: velocity shape differs"));
        }
        x = x + v * dt;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn timesteps_concentrate_at_half_for_tiny_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dist = TimestepDistribution {
            location: 0.0,
            scale: 1e-9,
        };
        let ts: Vec<f64> = sample_timesteps(100, &dist, &mut rng).unwrap();
        for t in ts {
            assert!((t - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn timesteps_deterministic_given_seed() {
        let dist = TimestepDistribution::default();
        let a: Vec<f64> =
            sample_timesteps(4, &dist, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b: Vec<f64> =
            sample_timesteps(4, &dist, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn timesteps_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = TimestepDistribution {
            location: 0.0,
            scale: 10.0,
        };
        let ts: Vec<f64> = sample_timesteps(10_000, &dist, &mut rng).unwrap();
        for t in ts {
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn timesteps_logit_mean_matches_location() {
        // Monte-Carlo check against the defining transform: logit(t) ~ N(0, 1).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ts: Vec<f64> =
            sample_timesteps(n, &TimestepDistribution::default(), &mut rng).unwrap();
        let mean_logit: f64 =
            ts.iter().map(|&t| (t / (1.0 - t)).ln()).sum::<f64>() / n as f64;
        // 3σ band for the sample mean of a standard normal
        assert!(
            mean_logit.abs() < 3.0 / (n as f64).sqrt(),
            "mean logit {mean_logit}"
        );
    }

    #[test]
    fn timesteps_reject_bad_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dist = TimestepDistribution {
            location: 0.0,
            scale: 0.0,
        };
        assert!(sample_timesteps::<f64, _>(1, &dist, &mut rng).is_err());
    }

    #[test]
    fn path_endpoints_and_linearity() {
        let x0 = arr(&[1.0, -2.0, 0.5]);
        let x1 = arr(&[0.0, 4.0, 0.5]);
        assert_eq!(interpolate_path(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate_path(&x0, &x1, 1.0).unwrap(), x1);
        let mid = interpolate_path(&arr(&[0.0]), &arr(&[2.0]), 0.25).unwrap();
        assert!((mid[[0]] - 0.5).abs() < 1e-12);
        // second finite difference in t vanishes for a linear path
        let h = 0.1;
        let a = interpolate_path(&x0, &x1, 0.3 - h).unwrap();
        let b = interpolate_path(&x0, &x1, 0.3).unwrap();
        let cc = interpolate_path(&x0, &x1, 0.3 + h).unwrap();
        let second = &a - &(&b * 2.0) + &cc;
        assert!(second.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn path_shape_mismatch_rejected() {
        assert!(interpolate_path(&arr(&[1.0]), &arr(&[1.0, 2.0]), 0.5).is_err());
    }

    #[test]
    fn loss_zero_iff_exact() {
        let x0 = arr(&[0.0, 1.0]);
        let x1 = arr(&[2.0, -1.0]);
        let target = &x1 - &x0;
        assert_eq!(rf_loss(&target, &x0, &x1, None).unwrap(), 0.0);
        let zero = arr(&[0.0, 0.0]);
        // all entries of x1 − x0 are ±2 → mean square 4
        assert_eq!(rf_loss(&zero, &x0, &x1, None).unwrap(), 4.0);
    }

    #[test]
    fn loss_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 64;
        let x0 = ArrayD::from_shape_simple_fn(IxDyn(&[n]), || f64::std_normal(&mut rng));
        let x1 = ArrayD::from_shape_simple_fn(IxDyn(&[n]), || f64::std_normal(&mut rng));
        let pv = ArrayD::from_shape_simple_fn(IxDyn(&[n]), || f64::std_normal(&mut rng));
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            let e = pv[[i]] - (x1[[i]] - x0[[i]]);
            sum += e * e;
            count += 1.0;
        }
        let oracle = sum / count;
        assert!((rf_loss(&pv, &x0, &x1, None).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_empty_mask() {
        let x = arr(&[1.0]);
        let mask = ArrayD::from_elem(IxDyn(&[1]), false);
        assert!(rf_loss(&x, &x, &x, Some(&mask)).is_err());
    }

    #[test]
    fn loss_grad_matches_finite_difference() {
        let x0 = arr(&[0.3, -0.7, 1.1]);
        let x1 = arr(&[1.0, 0.2, -0.4]);
        let pv = arr(&[0.5, 0.5, 0.5]);
        let mask_v = ArrayD::from_shape_vec(IxDyn(&[3]), vec![true, false, true]).unwrap();
        let g = rf_loss_grad(&pv, &x0, &x1, Some(&mask_v)).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut hi = pv.clone();
            hi[[i]] += eps;
            let mut lo = pv.clone();
            lo[[i]] -= eps;
            let fd = (rf_loss(&hi, &x0, &x1, Some(&mask_v)).unwrap()
                - rf_loss(&lo, &x0, &x1, Some(&mask_v)).unwrap())
                / (2.0 * eps);
            assert!((g[[i]] - fd).abs() < 1e-6, "param {i}: {} vs {fd}", g[[i]]);
        }
    }

    #[test]
    fn euler_constant_field_telescopes() {
        let x0 = arr(&[1.0, 2.0]);
        let v = arr(&[3.0, -1.0]);
        for steps in [1usize, 7, 40] {
            let out = euler_sample(&mut |_, _| Ok(v.clone()), &x0, steps).unwrap();
            let expect = &x0 + &v;
            assert!(out
                .iter()
                .zip(expect.iter())
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn euler_linear_field_approximates_exponential() {
        let x0 = arr(&[1.0, -0.5]);
        let out = euler_sample(&mut |x, _| Ok(x.clone()), &x0, 1000).unwrap();
        let e = std::f64::consts::E;
        for (o, x) in out.iter().zip(x0.iter()) {
            assert!((o - e * x).abs() / (e * x).abs() < 1e-2);
        }
    }

    #[test]
    fn euler_zero_steps_rejected() {
        let x0 = arr(&[1.0]);
        assert!(euler_sample(&mut |x, _| Ok(x.clone()), &x0, 0).is_err());
    }
}
