//! Velocity-space guidance combinators.
//!
//! All three guided modes are the same affine combination
//! `(λ+1)·G(main) − λ·G(weak)`; they differ only in what the weak branch is:
//! the unconditional model at full budget (cfg), the conditional model at a
//! reduced budget (ag), or the unconditional model at a reduced budget
//! (ccfg).

use ndarray::Array3;

use crate::cost::{cost_breakdown, CostConfig};
use crate::error::{Error, Result};
use crate::nn::param::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Cfg,
    Ag,
    Ccfg,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub lambda: f64,
    pub j_main: usize,
    pub j_weak: usize,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec::none(16)
    }
}

impl GuidanceSpec {
    pub fn none(j_main: usize) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::None,
            lambda: 0.0,
            j_main,
            j_weak: j_main,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::config(format!(
                "guidance.lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.j_main == 0 {
            return Err(Error::config("guidance.J_main must be >= 1"));
        }
        if self.j_weak > self.j_main {
            return Err(Error::config(format!(
                "guidance.J_weak {} exceeds J_main {}",
                self.j_weak, self.j_main
            )));
        }
        if self.j_weak == 0 {
            return Err(Error::config("guidance.J_weak must be >= 1"));
        }
        Ok(())
    }

    /// Model evaluations per sampler step.
    pub fn calls_per_step(&self) -> usize {
        match self.mode {
            GuidanceMode::None => 1,
            _ => 2,
        }
    }
}

/// A conditional velocity field evaluated at a latent budget. `class: None`
/// is the unconditional (null-token) branch.
pub trait VelocityModel<F: Scalar> {
    fn velocity(
        &self,
        xt: &Array3<F>,
        t: F,
        class: Option<usize>,
        j_tilde: usize,
    ) -> Result<Array3<F>>;
}

impl<F: Scalar, T: Fn(&Array3<F>, F, Option<usize>, usize) -> Result<Array3<F>>> VelocityModel<F>
    for T
{
    fn velocity(
        &self,
        xt: &Array3<F>,
        t: F,
        class: Option<usize>,
        j_tilde: usize,
    ) -> Result<Array3<F>> {
        self(xt, t, class, j_tilde)
    }
}

/// Evaluate the guided velocity at one `(xt, t)` point.
pub fn guided_velocity<F: Scalar>(
    model: &dyn VelocityModel<F>,
    xt: &Array3<F>,
    t: F,
    class: Option<usize>,
    spec: &GuidanceSpec,
) -> Result<Array3<F>> {
    spec.validate()?;
    let main = model.velocity(xt, t, class, spec.j_main)?;
    let weak = match spec.mode {
        GuidanceMode::None => return Ok(main),
        GuidanceMode::Cfg => model.velocity(xt, t, None, spec.j_main)?,
        GuidanceMode::Ag => model.velocity(xt, t, class, spec.j_weak)?,
        GuidanceMode::Ccfg => model.velocity(xt, t, None, spec.j_weak)?,
    };
    let lam = F::of_f64(spec.lambda);
    Ok(&main * (lam + F::one()) - &weak * lam)
}

/// Largest budget whose forward cost is at most `frac` of the main budget's.
/// Falls back to J̃=1 when even the smallest budget exceeds the target.
pub fn select_weak_budget(base: &CostConfig, j_main: usize, frac: f64) -> Result<usize> {
    if j_main == 0 || !(0.0..=1.0).contains(&frac) {
        return Err(Error::config(format!(
            "weak budget selection: J_main {j_main}, frac {frac}"
        )));
    }
    let main_cost = cost_breakdown(&base.with_budget(j_main)).total() as f64;
    let mut best = 1;
    for jt in 1..=j_main {
        if cost_breakdown(&base.with_budget(jt)).total() as f64 <= frac * main_cost {
            best = jt;
        }
    }
    Ok(best)
}

/// Default cost target for the weak branch.
pub const WEAK_COST_FRAC: f64 = 0.35;

/// Per-step guided FLOPs: main pass plus (for two-call modes) the weak pass,
/// which runs at the reduced budget only for ag/ccfg.
pub fn guided_step_cost(base: &CostConfig, spec: &GuidanceSpec) -> u64 {
    let main = cost_breakdown(&base.with_budget(spec.j_main)).total();
    match spec.mode {
        GuidanceMode::None => main,
        GuidanceMode::Cfg => 2 * main,
        GuidanceMode::Ag | GuidanceMode::Ccfg => {
            main + cost_breakdown(&base.with_budget(spec.j_weak)).total()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::cell::RefCell;

    struct Stub {
        calls: RefCell<Vec<(Option<usize>, usize)>>,
    }

    impl Stub {
        fn new() -> Self {
            Stub {
                calls: RefCell::new(Vec::new()),
            }
        }
    }

    impl VelocityModel<f64> for Stub {
        fn velocity(
            &self,
            _xt: &Array3<f64>,
            _t: f64,
            class: Option<usize>,
            j: usize,
        ) -> Result<Array3<f64>> {
            self.calls.borrow_mut().push((class, j));
            // distinguishable outputs: conditional 2.0, unconditional 1.0
            let v = if class.is_some() { 2.0 } else { 1.0 };
            Ok(Array3::from_elem((1, 2, 2), v))
        }
    }

    fn x() -> Array3<f64> {
        Array3::zeros((1, 2, 2))
    }

    fn spec(mode: GuidanceMode, lambda: f64) -> GuidanceSpec {
        GuidanceSpec {
            mode,
            lambda,
            j_main: 8,
            j_weak: 2,
        }
    }

    #[test]
    fn ccfg_arithmetic_example() {
        // (1+1)*2.0 - 1*1.0 = 3.0
        let m = Stub::new();
        let v = guided_velocity(&m, &x(), 0.5, Some(0), &spec(GuidanceMode::Ccfg, 1.0)).unwrap();
        assert!(v.iter().all(|&e| e == 3.0));
    }

    #[test]
    fn lambda_zero_equals_unguided() {
        let m = Stub::new();
        let base = guided_velocity(&m, &x(), 0.5, Some(1), &spec(GuidanceMode::None, 0.0)).unwrap();
        for mode in [GuidanceMode::Cfg, GuidanceMode::Ag, GuidanceMode::Ccfg] {
            let v = guided_velocity(&m, &x(), 0.5, Some(1), &spec(mode, 0.0)).unwrap();
            assert_eq!(v, base);
        }
    }

    #[test]
    fn affine_coefficients_sum_to_one() {
        // with main == weak output the combination is the common value
        let constant = |_x: &Array3<f64>, _t: f64, _c: Option<usize>, _j: usize| {
            Ok(Array3::from_elem((1, 2, 2), 5.0))
        };
        for lam in [0.0, 0.5, 1.0, 4.0] {
            let v =
                guided_velocity(&constant, &x(), 0.5, Some(0), &spec(GuidanceMode::Ag, lam))
                    .unwrap();
            assert!(v.iter().all(|&e| (e - 5.0).abs() < 1e-12), "λ={lam}");
        }
    }

    #[test]
    fn call_count_and_branch_contract() {
        let m = Stub::new();
        guided_velocity(&m, &x(), 0.5, Some(3), &spec(GuidanceMode::None, 0.0)).unwrap();
        assert_eq!(*m.calls.borrow(), vec![(Some(3), 8)]);

        m.calls.borrow_mut().clear();
        guided_velocity(&m, &x(), 0.5, Some(3), &spec(GuidanceMode::Cfg, 1.0)).unwrap();
        assert_eq!(*m.calls.borrow(), vec![(Some(3), 8), (None, 8)]);

        m.calls.borrow_mut().clear();
        guided_velocity(&m, &x(), 0.5, Some(3), &spec(GuidanceMode::Ag, 1.0)).unwrap();
        assert_eq!(*m.calls.borrow(), vec![(Some(3), 8), (Some(3), 2)]);

        m.calls.borrow_mut().clear();
        guided_velocity(&m, &x(), 0.5, Some(3), &spec(GuidanceMode::Ccfg, 1.0)).unwrap();
        assert_eq!(*m.calls.borrow(), vec![(Some(3), 8), (None, 2)]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let m = Stub::new();
        let mut s = spec(GuidanceMode::Cfg, 1.0);
        s.j_weak = 9;
        assert!(guided_velocity(&m, &x(), 0.5, None, &s).is_err());
        s = spec(GuidanceMode::Cfg, -0.5);
        assert!(guided_velocity(&m, &x(), 0.5, None, &s).is_err());
    }

    #[test]
    fn weak_budget_cost_at_most_frac() {
        let base = CostConfig::xl_reference(64);
        let jw = select_weak_budget(&base, 64, WEAK_COST_FRAC).unwrap();
        let main = cost_breakdown(&base.with_budget(64)).total() as f64;
        let weak = cost_breakdown(&base.with_budget(jw)).total() as f64;
        assert!(weak <= WEAK_COST_FRAC * main);
        // next budget up would exceed the target
        let over = cost_breakdown(&base.with_budget(jw + 1)).total() as f64;
        assert!(over > WEAK_COST_FRAC * main);
    }

    #[test]
    fn ccfg_step_cost_well_under_cfg() {
        let base = CostConfig::xl_reference(64);
        let jw = select_weak_budget(&base, 64, WEAK_COST_FRAC).unwrap();
        let ccfg = guided_step_cost(
            &base,
            &GuidanceSpec {
                mode: GuidanceMode::Ccfg,
                lambda: 1.0,
                j_main: 64,
                j_weak: jw,
            },
        );
        let cfg = guided_step_cost(
            &base,
            &GuidanceSpec {
                mode: GuidanceMode::Cfg,
                lambda: 1.0,
                j_main: 64,
                j_weak: 64,
            },
        );
        assert!((ccfg as f64) <= 0.70 * cfg as f64, "ratio {}", ccfg as f64 / cfg as f64);
    }
}
