//! Comparison update rules: TRPO, CPO (with infeasible recovery and an
//! optional backtracking line search), primal-dual PDO and fixed-multiplier FPO.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, conjugate_gradient, dot};
use crate::subproblem::{trust_region_step, UpdateError, UpdateInputs, QUAD_FORM_FLOOR};

/// Multiplier state for the primal-dual baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualState {
    pub lambda: f64,
    pub beta: f64,
}

impl DualState {
    pub fn new(lambda: f64, beta: f64) -> Result<Self, UpdateError> {
        let s = Self { lambda, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), UpdateError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(UpdateError::InvalidInput(format!("dual lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(UpdateError::InvalidInput(format!("dual beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Projected dual ascent `lambda <- max(0, lambda + beta (jc - h))`.
    pub fn ascend(&self, jc: f64, h: f64) -> Self {
        Self {
            lambda: (self.lambda + self.beta * (jc - h)).max(0.0),
            beta: self.beta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSearchConfig {
    pub enabled: bool,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
        }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<(), UpdateError> {
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return Err(UpdateError::InvalidInput(format!(
                "backtrack_ratio must lie in (0, 1), got {}",
                self.backtrack_ratio
            )));
        }
        if self.max_backtracks == 0 {
            return Err(UpdateError::InvalidInput("max_backtracks must be positive".into()));
        }
        Ok(())
    }
}

/// Unconstrained natural-gradient step; ignores `a` and `b`.
pub fn trpo_update(inp: &UpdateInputs) -> Result<Vec<f64>, UpdateError> {
    Ok(trust_region_step(&inp.theta, &inp.g, &inp.fisher, inp.delta, inp.cg)?.theta_half)
}

/// Which branch of the CPO case analysis produced the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpoCase {
    /// Constraint multiplier is zero: the TRPO step.
    Inactive,
    /// Both multipliers positive.
    Active,
    /// No point of the trust region satisfies the constraint: pure cost decrease.
    Recovery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpoStep {
    pub theta_next: Vec<f64>,
    pub case: CpoCase,
    /// Trust-region multiplier (absent for recovery).
    pub lambda: Option<f64>,
    /// Constraint multiplier.
    pub nu: f64,
    /// Number of backtracking halvings applied (0 without line search).
    pub backtracks: usize,
    /// The line search ran out of budget and the update was abandoned.
    pub line_search_failed: bool,
}

/// Closed-form solution of
/// `max g^T x  s.t.  1/2 x^T H x <= delta,  a^T x + b <= 0`
/// expressed through `q = g^T H^-1 g`, `r = g^T H^-1 a`, `s = a^T H^-1 a`.
///
/// Returns the coefficients `(lambda, nu)` of `x = (H^-1 g - nu H^-1 a) / lambda`.
fn cpo_dual(q: f64, r: f64, s: f64, b: f64, delta: f64) -> (f64, f64, CpoCase) {
    let lambda_b = (q / (2.0 * delta)).sqrt();
    // The TRPO step already satisfies the linearised constraint.
    if r / lambda_b + b <= 0.0 {
        return (lambda_b, 0.0, CpoCase::Inactive);
    }
    let big_a = (q - r * r / s).max(0.0);
    let big_b = 2.0 * delta - b * b / s;
    let dual_a = |l: f64| big_a / (2.0 * l) + l * big_b / 2.0 - r * b / s;
    let dual_b = |l: f64| q / (2.0 * l) + l * delta;

    // Region where nu*(lambda) = (lambda b + r)/s is positive.
    let tiny = 1e-300;
    let (a_lo, a_hi, b_lo, b_hi) = if b > 0.0 {
        let mid = (-r / b).max(0.0);
        (mid, f64::INFINITY, 0.0, mid)
    } else if b < 0.0 {
        let mid = (-r / b).max(0.0);
        (0.0, mid, mid, f64::INFINITY)
    } else if r > 0.0 {
        (0.0, f64::INFINITY, 0.0, 0.0)
    } else {
        (0.0, 0.0, 0.0, f64::INFINITY)
    };

    let mut best: Option<(f64, f64)> = None;
    let mut consider = |lambda: f64, value: f64| {
        if lambda.is_finite() && lambda > 0.0 && value.is_finite()
            && best.is_none_or(|(_, v)| value < v) {
                best = Some((lambda, value));
            }
    };
    if a_hi > a_lo && big_b > 0.0 {
        let unconstrained = if big_a > 0.0 { (big_a / big_b).sqrt() } else { tiny };
        let l = unconstrained.clamp(a_lo.max(tiny), a_hi);
        consider(l, dual_a(l));
    }
    if b_hi > b_lo {
        let l = lambda_b.clamp(b_lo.max(tiny), b_hi);
        consider(l, dual_b(l));
    }
    let lambda = best.map_or(lambda_b, |(l, _)| l);
    let nu = ((lambda * b + r) / s).max(0.0);
    let case = if nu > 0.0 { CpoCase::Active } else { CpoCase::Inactive };
    (lambda, nu, case)
}

/// Constrained trust-region update.
///
/// `kl_eval` and `cost_eval` are only consulted when the line search is
/// enabled. `cost_eval` returns the (surrogate) constraint value
/// `J_C(theta) - h`; a candidate is accepted when its KL is at most `delta`
/// and its cost is no larger than `max(0, b)`, i.e. it does not worsen an
/// existing violation. If no candidate is accepted the current parameters
/// are returned unchanged.
pub fn cpo_update(
    inp: &UpdateInputs,
    ls: &LineSearchConfig,
    kl_eval: &dyn Fn(&[f64]) -> f64,
    cost_eval: &dyn Fn(&[f64]) -> f64,
) -> Result<CpoStep, UpdateError> {
    let cg = inp.cg;
    let v = conjugate_gradient(&inp.fisher, &inp.g, cg.max_iters, cg.tol)?.x;
    let w = conjugate_gradient(&inp.fisher, &inp.a, cg.max_iters, cg.tol)?.x;
    let q = dot(&inp.g, &v);
    let r = dot(&inp.g, &w);
    let s = dot(&inp.a, &w);

    let (step, case, lambda, nu) = if !(s > QUAD_FORM_FLOOR) {
        if inp.b > 0.0 {
            log::warn!("CPO: cost gradient vanishes while the constraint is violated");
            return Err(UpdateError::UnprojectableConstraint {
                violation: inp.b,
                quad: s,
            });
        }
        if !(q > QUAD_FORM_FLOOR) {
            return Err(UpdateError::DegenerateRewardGradient { quad: q });
        }
        let eta = (2.0 * inp.delta / q).sqrt();
        (linalg::scaled(eta, &v), CpoCase::Inactive, Some(eta.recip()), 0.0)
    } else if inp.b > 0.0 && inp.b * inp.b >= 2.0 * inp.delta * s {
        let coef = (2.0 * inp.delta / s).sqrt();
        (linalg::scaled(-coef, &w), CpoCase::Recovery, None, 0.0)
    } else {
        if !(q > QUAD_FORM_FLOOR) {
            log::warn!("CPO: degenerate reward gradient (q = {q:e}); step skipped");
            return Err(UpdateError::DegenerateRewardGradient { quad: q });
        }
        let (lambda, nu, case) = cpo_dual(q, r, s, inp.b, inp.delta);
        if nu == 0.0 {
            // Written exactly like the TRPO step so the two agree bitwise.
            let eta = (2.0 * inp.delta / q).sqrt();
            (linalg::scaled(eta, &v), case, Some(lambda), nu)
        } else {
            let mut x = v.clone();
            linalg::axpy(-nu, &w, &mut x);
            (linalg::scaled(1.0 / lambda, &x), case, Some(lambda), nu)
        }
    };

    let mut out = CpoStep {
        theta_next: linalg::add(&inp.theta, &step),
        case,
        lambda,
        nu,
        backtracks: 0,
        line_search_failed: false,
    };
    if !ls.enabled {
        return Ok(out);
    }
    ls.validate()?;
    let cost_target = inp.b.max(0.0);
    let mut frac = 1.0;
    for k in 0..=ls.max_backtracks {
        let cand = linalg::add(&inp.theta, &linalg::scaled(frac, &step));
        let kl = kl_eval(&cand);
        let cost = cost_eval(&cand);
        if kl <= inp.delta && cost <= cost_target {
            out.theta_next = cand;
            out.backtracks = k;
            return Ok(out);
        }
        frac *= ls.backtrack_ratio;
    }
    log::warn!("CPO line search exhausted {} backtracks; keeping current parameters", ls.max_backtracks);
    out.theta_next = inp.theta.clone();
    out.backtracks = ls.max_backtracks;
    out.line_search_failed = true;
    Ok(out)
}

/// Primal-dual step along `g - lambda a`, then projected dual ascent.
///
/// A degenerate mixed gradient leaves `theta` unchanged (with a warning) but
/// still updates the multiplier.
pub fn pdo_update(
    inp: &UpdateInputs,
    dual: DualState,
    jc: f64,
    h: f64,
) -> Result<(Vec<f64>, DualState), UpdateError> {
    dual.validate()?;
    let theta = mixed_step(inp, dual.lambda)?.unwrap_or_else(|| inp.theta.clone());
    Ok((theta, dual.ascend(jc, h)))
}

/// Primal-dual step with a constant multiplier.
pub fn fpo_update(inp: &UpdateInputs, lambda_fixed: f64) -> Result<Vec<f64>, UpdateError> {
    if !(lambda_fixed >= 0.0) || !lambda_fixed.is_finite() {
        return Err(UpdateError::InvalidInput(format!(
            "fixed multiplier must be >= 0, got {lambda_fixed}"
        )));
    }
    Ok(mixed_step(inp, lambda_fixed)?.unwrap_or_else(|| inp.theta.clone()))
}

/// Trust-region step along `g - lambda a`; `None` when that direction is degenerate.
fn mixed_step(inp: &UpdateInputs, lambda: f64) -> Result<Option<Vec<f64>>, UpdateError> {
    let mut g_mix = inp.g.clone();
    linalg::axpy(-lambda, &inp.a, &mut g_mix);
    match trust_region_step(&inp.theta, &g_mix, &inp.fisher, inp.delta, inp.cg) {
        Ok(step) => Ok(Some(step.theta_half)),
        Err(UpdateError::DegenerateRewardGradient { quad }) => {
            log::warn!("mixed gradient g - lambda a is degenerate (quad {quad:e}); primal step skipped");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{CgConfig, DenseMatrix, SpdOperator};
    use crate::subproblem::reward_improvement_step;
    use approx::assert_relative_eq;

    fn inputs(theta: &[f64], g: &[f64], a: &[f64], b: f64, h: SpdOperator, delta: f64) -> UpdateInputs {
        let n = theta.len();
        UpdateInputs::new(theta.to_vec(), g.to_vec(), a.to_vec(), b, h, delta)
            .unwrap()
            .with_cg(CgConfig::exact(n))
    }

    fn never(_: &[f64]) -> f64 {
        panic!("line search callback must not run when disabled")
    }

    fn spd2() -> SpdOperator {
        SpdOperator::from_matrix(DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(), 0.0)
            .unwrap()
    }

    #[test]
    fn trpo_unit_example() {
        let inp = inputs(&[0.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], 3.0, SpdOperator::identity(2), 0.5);
        let out = trpo_update(&inp).unwrap();
        assert_eq!(out[0], 0.0);
        assert_relative_eq!(out[1], 1.0, epsilon = 1e-15);
        assert_eq!(out, reward_improvement_step(&inp).unwrap());
    }

    #[test]
    fn cpo_inactive_equals_trpo() {
        let inp = inputs(&[0.2, 0.1], &[1.0, 0.3], &[0.5, 1.0], -50.0, spd2(), 0.01);
        let ls = LineSearchConfig::default();
        let step = cpo_update(&inp, &ls, &never, &never).unwrap();
        assert_eq!(step.case, CpoCase::Inactive);
        let trpo = trpo_update(&inp).unwrap();
        for (x, y) in step.theta_next.iter().zip(&trpo) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12);
        }
    }

    #[test]
    fn cpo_recovery_step() {
        let inp = inputs(&[0.0, 0.0], &[0.3, 1.0], &[1.0, 0.0], 1.0, SpdOperator::identity(2), 0.01);
        let step = cpo_update(&inp, &LineSearchConfig::default(), &never, &never).unwrap();
        assert_eq!(step.case, CpoCase::Recovery);
        assert_relative_eq!(step.theta_next[0], -(0.02_f64).sqrt(), epsilon = 1e-15);
        assert_eq!(step.theta_next[1], 0.0);
    }

    #[test]
    fn cpo_branch_boundary_is_continuous() {
        let h = spd2();
        let a = [0.7, -0.4];
        let g = [0.2, 1.0];
        let delta = 0.02;
        let w = crate::linalg::conjugate_gradient(&h, &a, 2, 1e-14).unwrap().x;
        let s = dot(&a, &w);
        let boundary = (2.0 * delta * s).sqrt();
        let decrease = |b: f64| {
            let inp = inputs(&[0.0, 0.0], &g, &a, b, h.clone(), delta);
            let st = cpo_update(&inp, &LineSearchConfig::default(), &never, &never).unwrap();
            (dot(&a, &st.theta_next), st.case)
        };
        let (inside, c1) = decrease(boundary * (1.0 - 1e-10));
        let (outside, c2) = decrease(boundary * (1.0 + 1e-10));
        assert_eq!(c1, CpoCase::Active);
        assert_eq!(c2, CpoCase::Recovery);
        assert!((inside - outside).abs() <= 1e-6, "{inside} vs {outside}");
    }

    #[test]
    fn cpo_active_step_is_on_both_boundaries() {
        let h = spd2();
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.2], &[1.0, 0.5], 0.05, h.clone(), 0.02);
        let st = cpo_update(&inp, &LineSearchConfig::default(), &never, &never).unwrap();
        assert_eq!(st.case, CpoCase::Active);
        let x = &st.theta_next;
        assert_relative_eq!(0.5 * h.quad_form(x), 0.02, max_relative = 1e-9);
        assert!((dot(&inp.a, x) + inp.b).abs() < 1e-10);
    }

    #[test]
    fn line_search_backtracks_and_gives_up() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], -1.0, SpdOperator::identity(2), 0.5);
        let ls = LineSearchConfig {
            enabled: true,
            ..LineSearchConfig::default()
        };
        let kl = |th: &[f64]| 0.5 * dot(th, th) * 4.0;
        let st = cpo_update(&inp, &ls, &kl, &|_| -1.0).unwrap();
        assert!(!st.line_search_failed);
        assert!(st.backtracks > 0);
        assert!(kl(&st.theta_next) <= 0.5);

        let st = cpo_update(&inp, &ls, &kl, &|_| 1.0).unwrap();
        assert!(st.line_search_failed);
        assert_eq!(st.theta_next, inp.theta);
    }

    #[test]
    fn pdo_zero_multiplier_is_trpo() {
        let inp = inputs(&[0.5, 0.0], &[1.0, 2.0], &[1.0, 0.0], 0.3, spd2(), 0.05);
        let (theta, dual) = pdo_update(&inp, DualState::new(0.0, 0.1).unwrap(), 0.8, 0.5).unwrap();
        assert_eq!(theta, trpo_update(&inp).unwrap());
        assert_relative_eq!(dual.lambda, 0.03, epsilon = 1e-15);
        let (_, dual) = pdo_update(&inp, DualState::new(0.0, 0.1).unwrap(), 0.2, 0.5).unwrap();
        assert_eq!(dual.lambda, 0.0);
    }

    #[test]
    fn pdo_dual_unchanged_at_threshold() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 2.0], &[1.0, 0.0], 0.0, spd2(), 0.05);
        let d = DualState::new(0.7, 0.3).unwrap();
        assert_eq!(pdo_update(&inp, d, 0.5, 0.5).unwrap().1, d);
    }

    #[test]
    fn pdo_cancellation_skips_primal_step() {
        let inp = inputs(&[0.3, -0.1], &[1.0, 0.0], &[1.0, 0.0], 0.0, SpdOperator::identity(2), 0.05);
        let (theta, dual) = pdo_update(&inp, DualState::new(1.0, 0.5).unwrap(), 1.0, 0.5).unwrap();
        assert_eq!(theta, inp.theta);
        assert_relative_eq!(dual.lambda, 1.25);
    }

    #[test]
    fn pdo_dual_grows_linearly_under_violation() {
        let mut d = DualState::new(0.2, 0.05).unwrap();
        for _ in 0..40 {
            d = d.ascend(1.5, 1.0);
        }
        assert_relative_eq!(d.lambda, 0.2 + 40.0 * 0.05 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn fpo_limits() {
        let inp = inputs(&[0.0, 0.0], &[0.3, 1.0], &[2.0, -1.0], 0.1, SpdOperator::identity(2), 0.05);
        assert_eq!(fpo_update(&inp, 0.0).unwrap(), trpo_update(&inp).unwrap());
        let far = fpo_update(&inp, 1e9).unwrap();
        let cos = crate::linalg::cosine(&far, &[-2.0, 1.0]).unwrap();
        assert!(cos > 1.0 - 1e-12);
        assert!(fpo_update(&inp, -1.0).is_err());
    }

    #[test]
    fn dual_state_validation() {
        assert!(DualState::new(-0.1, 1.0).is_err());
        assert!(DualState::new(0.0, 0.0).is_err());
        let bad = LineSearchConfig {
            enabled: true,
            backtrack_ratio: 1.0,
            max_backtracks: 3,
        };
        assert!(bad.validate().is_err());
    }
}
