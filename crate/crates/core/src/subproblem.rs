//! The two-step projected update: a trust-region reward step followed by a
//! projection onto the linearised cost half-space, plus the multi-constraint
//! extension and the projection certificates used by the analysis code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, check_len, conjugate_gradient, dot, CgConfig, CgSolution, LinalgError, SpdOperator,
};

/// Smallest admissible value of `g^T H^-1 g` and `a^T L^-1 a`.
pub const QUAD_FORM_FLOOR: f64 = 1e-12;

/// Slack allowed when checking a linearised constraint.
pub const CONSTRAINT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("degenerate reward gradient: g^T H^-1 g = {quad:e} is below the floor")]
    DegenerateRewardGradient { quad: f64 },
    #[error("unprojectable constraint: violation {violation:e} with a^T L^-1 a = {quad:e}")]
    UnprojectableConstraint { violation: f64, quad: f64 },
    #[error("invalid update inputs: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl UpdateError {
    /// Degenerate quadratic forms are recoverable: the caller may skip the update.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Self::DegenerateRewardGradient { .. } | Self::UnprojectableConstraint { .. }
        )
    }
}

/// Everything one update consumes: current parameters, reward gradient `g`,
/// cost gradient `a`, violation `b = J_C - h`, curvature `H` and radius `delta`.
#[derive(Clone, Debug)]
pub struct UpdateInputs {
    pub theta: Vec<f64>,
    pub g: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    pub fisher: SpdOperator,
    pub delta: f64,
    pub cg: CgConfig,
}

impl UpdateInputs {
    pub fn new(
        theta: Vec<f64>,
        g: Vec<f64>,
        a: Vec<f64>,
        b: f64,
        fisher: SpdOperator,
        delta: f64,
    ) -> Result<Self, UpdateError> {
        let n = fisher.dim();
        check_len(n, &theta)?;
        check_len(n, &g)?;
        check_len(n, &a)?;
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(UpdateError::InvalidInput(format!("delta must be positive, got {delta}")));
        }
        if !linalg::all_finite(&theta) || !linalg::all_finite(&g) || !linalg::all_finite(&a) || !b.is_finite() {
            return Err(UpdateError::InvalidInput("non-finite entries in update inputs".into()));
        }
        Ok(Self {
            theta,
            g,
            a,
            b,
            fisher,
            delta,
            cg: CgConfig::default(),
        })
    }

    pub fn with_cg(mut self, cg: CgConfig) -> Self {
        self.cg = cg;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Geometry of the projection step: `L = H` for KL, `L = I` for L2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMetric {
    Kl,
    L2,
}

impl std::fmt::Display for ProjectionMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kl => "kl",
            Self::L2 => "l2",
        })
    }
}

/// Convergence summary of one conjugate-gradient solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

impl From<&CgSolution> for SolveReport {
    fn from(s: &CgSolution) -> Self {
        Self {
            iterations: s.iterations,
            relative_residual: s.relative_residual,
            converged: s.converged,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub reward_solve: Option<SolveReport>,
    /// Absent when the projection was inactive or the metric is L2.
    pub projection_solve: Option<SolveReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateResult {
    pub theta_next: Vec<f64>,
    pub eta: f64,
    pub projection_active: bool,
    pub lagrange_cost: f64,
    pub diagnostics: UpdateDiagnostics,
}

/// Result of the trust-region reward step.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardStep {
    pub theta_half: Vec<f64>,
    pub eta: f64,
    /// `H^-1 g` as returned by conjugate gradient.
    pub direction: Vec<f64>,
    pub solve: SolveReport,
}

/// Trust-region step of radius `delta` along `H^-1 grad` from `theta`.
pub(crate) fn trust_region_step(
    theta: &[f64],
    grad: &[f64],
    fisher: &SpdOperator,
    delta: f64,
    cg: CgConfig,
) -> Result<RewardStep, UpdateError> {
    let sol = conjugate_gradient(fisher, grad, cg.max_iters, cg.tol)?;
    let quad = dot(grad, &sol.x);
    if !(quad > QUAD_FORM_FLOOR) {
        log::warn!("degenerate reward gradient (g^T H^-1 g = {quad:e}); step skipped");
        return Err(UpdateError::DegenerateRewardGradient { quad });
    }
    let eta = (2.0 * delta / quad).sqrt();
    let mut theta_half = theta.to_vec();
    linalg::axpy(eta, &sol.x, &mut theta_half);
    Ok(RewardStep {
        theta_half,
        eta,
        solve: SolveReport::from(&sol),
        direction: sol.x,
    })
}

/// Reward improvement step: `theta + sqrt(2 delta / g^T H^-1 g) H^-1 g`.
pub fn reward_improvement_step(inp: &UpdateInputs) -> Result<Vec<f64>, UpdateError> {
    Ok(solve_reward_step(inp)?.theta_half)
}

/// Like [`reward_improvement_step`] but keeps the step length and solver report.
pub fn solve_reward_step(inp: &UpdateInputs) -> Result<RewardStep, UpdateError> {
    trust_region_step(&inp.theta, &inp.g, &inp.fisher, inp.delta, inp.cg)
}

/// `L^-1 a` for the chosen metric together with the solver report (KL only).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionDirection {
    pub direction: Vec<f64>,
    pub quad: f64,
    pub solve: Option<SolveReport>,
}

pub fn projection_direction(
    a: &[f64],
    fisher: &SpdOperator,
    metric: ProjectionMetric,
    cg: CgConfig,
) -> Result<ProjectionDirection, UpdateError> {
    check_len(fisher.dim(), a)?;
    let (direction, solve) = match metric {
        ProjectionMetric::L2 => (a.to_vec(), None),
        ProjectionMetric::Kl => {
            let sol = conjugate_gradient(fisher, a, cg.max_iters, cg.tol)?;
            let rep = SolveReport::from(&sol);
            (sol.x, Some(rep))
        }
    };
    let quad = dot(a, &direction);
    Ok(ProjectionDirection {
        direction,
        quad,
        solve,
    })
}

/// Outcome of projecting one point onto one half-space.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpaceProjection {
    pub theta: Vec<f64>,
    pub multiplier: f64,
}

/// Project `point` onto `{x : a^T (x - theta_k) + b <= 0}` along a precomputed
/// `L^-1 a`.
pub(crate) fn project_with_direction(
    point: &[f64],
    theta_k: &[f64],
    a: &[f64],
    b: f64,
    dir: &ProjectionDirection,
) -> Result<HalfSpaceProjection, UpdateError> {
    let violation = linearized_violation(point, theta_k, a, b);
    if violation <= 0.0 {
        return Ok(HalfSpaceProjection {
            theta: point.to_vec(),
            multiplier: 0.0,
        });
    }
    if !(dir.quad > QUAD_FORM_FLOOR) {
        log::warn!(
            "unprojectable constraint (violation {violation:e}, a^T L^-1 a = {:e}); update skipped",
            dir.quad
        );
        return Err(UpdateError::UnprojectableConstraint {
            violation,
            quad: dir.quad,
        });
    }
    let multiplier = violation / dir.quad;
    let mut theta = point.to_vec();
    linalg::axpy(-multiplier, &dir.direction, &mut theta);
    Ok(HalfSpaceProjection { theta, multiplier })
}

/// `a^T (point - theta_k) + b`
pub fn linearized_violation(point: &[f64], theta_k: &[f64], a: &[f64], b: f64) -> f64 {
    let mut s = b;
    for i in 0..a.len() {
        s += a[i] * (point[i] - theta_k[i]);
    }
    s
}

/// Project `theta_mid` onto the linearised cost half-space of `inp`.
pub fn projection_step(
    theta_mid: &[f64],
    inp: &UpdateInputs,
    metric: ProjectionMetric,
) -> Result<Vec<f64>, UpdateError> {
    Ok(project_once(theta_mid, inp, metric)?.0.theta)
}

fn project_once(
    theta_mid: &[f64],
    inp: &UpdateInputs,
    metric: ProjectionMetric,
) -> Result<(HalfSpaceProjection, Option<SolveReport>), UpdateError> {
    check_len(inp.dim(), theta_mid)?;
    if linearized_violation(theta_mid, &inp.theta, &inp.a, inp.b) <= 0.0 {
        return Ok((
            HalfSpaceProjection {
                theta: theta_mid.to_vec(),
                multiplier: 0.0,
            },
            None,
        ));
    }
    let dir = projection_direction(&inp.a, &inp.fisher, metric, inp.cg)?;
    let proj = project_with_direction(theta_mid, &inp.theta, &inp.a, inp.b, &dir)?;
    Ok((proj, dir.solve))
}

/// Full update: reward step, then projection.
pub fn pcpo_update(inp: &UpdateInputs, metric: ProjectionMetric) -> Result<UpdateResult, UpdateError> {
    let step = solve_reward_step(inp)?;
    let (proj, projection_solve) = project_once(&step.theta_half, inp, metric)?;
    Ok(UpdateResult {
        theta_next: proj.theta,
        eta: step.eta,
        projection_active: proj.multiplier > 0.0,
        lagrange_cost: proj.multiplier,
        diagnostics: UpdateDiagnostics {
            reward_solve: Some(step.solve),
            projection_solve,
        },
    })
}

/// A linearised constraint `a^T (theta - theta_k) + b <= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub a: Vec<f64>,
    pub b: f64,
}

/// Default number of sweeps for [`alternating_projections`].
pub const DEFAULT_SWEEPS: usize = 10;

/// Cyclic projections onto several linearised constraints, with Dykstra's
/// correction so that the limit is the projection onto the intersection
/// rather than just some point inside it.
///
/// Stops after a sweep that leaves every constraint satisfied and does not
/// move the iterate; in that case the iterate from before the sweep is
/// returned, so a single constraint reproduces [`projection_step`] exactly.
pub fn alternating_projections(
    theta_mid: &[f64],
    constraints: &[HalfSpace],
    inp: &UpdateInputs,
    metric: ProjectionMetric,
    sweeps: usize,
) -> Result<Vec<f64>, UpdateError> {
    if constraints.is_empty() {
        return Err(UpdateError::InvalidInput("at least one constraint is required".into()));
    }
    if sweeps == 0 {
        return Err(UpdateError::InvalidInput("sweeps must be at least 1".into()));
    }
    check_len(inp.dim(), theta_mid)?;
    let dirs = constraints
        .iter()
        .map(|c| {
            check_len(inp.dim(), &c.a)?;
            projection_direction(&c.a, &inp.fisher, metric, inp.cg)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = theta_mid.len();
    let mut x = theta_mid.to_vec();
    let mut increments = vec![vec![0.0; n]; constraints.len()];
    for sweep in 0..sweeps {
        let before = x.clone();
        for ((c, dir), inc) in constraints.iter().zip(&dirs).zip(increments.iter_mut()) {
            let z = linalg::add(&x, inc);
            let y = project_with_direction(&z, &inp.theta, &c.a, c.b, dir)?.theta;
            *inc = linalg::sub(&z, &y);
            x = y;
        }
        let feasible = constraints
            .iter()
            .all(|c| linearized_violation(&x, &inp.theta, &c.a, c.b) <= CONSTRAINT_TOL);
        let moved = linalg::norm(&linalg::sub(&x, &before));
        if sweep > 0 && feasible && moved <= 1e-12 * (1.0 + linalg::norm(&before)) {
            log::debug!("alternating projections settled after {sweep} sweeps");
            return Ok(before);
        }
    }
    Ok(x)
}

/// Lemma-style certificate that `theta_star` is the `L`-projection of `theta`
/// onto a convex set containing `probes`: `(theta - theta*)^T L (p - theta*) <= 1e-8`.
pub fn variational_inequality_check(
    theta: &[f64],
    theta_star: &[f64],
    probes: &[Vec<f64>],
    l: &SpdOperator,
) -> bool {
    let l_resid = l.apply(&linalg::sub(theta, theta_star));
    probes
        .iter()
        .all(|p| dot(&l_resid, &linalg::sub(p, theta_star)) <= 1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use approx::assert_relative_eq;
    use proptest::{prop_assert, proptest};

    fn inputs(theta: &[f64], g: &[f64], a: &[f64], b: f64, h: SpdOperator, delta: f64) -> UpdateInputs {
        let n = theta.len();
        UpdateInputs::new(theta.to_vec(), g.to_vec(), a.to_vec(), b, h, delta)
            .unwrap()
            .with_cg(CgConfig::exact(n))
    }

    #[test]
    fn reward_step_unit_example() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], -1.0, SpdOperator::identity(2), 0.5);
        let half = reward_improvement_step(&inp).unwrap();
        assert_relative_eq!(half[0], 1.0, epsilon = 1e-15);
        assert_eq!(half[1], 0.0);
    }

    #[test]
    fn reward_step_vanishes_with_delta() {
        let inp = inputs(&[0.0, 0.0], &[0.3, -2.0], &[0.0, 1.0], 0.0, SpdOperator::identity(2), 1e-14);
        let half = reward_improvement_step(&inp).unwrap();
        assert!(linalg::norm(&half) < 1e-6);
    }

    #[test]
    fn degenerate_gradient_is_reported() {
        let inp = inputs(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 0.0], 0.0, SpdOperator::identity(2), 0.1);
        let err = reward_improvement_step(&inp).unwrap_err();
        assert!(matches!(err, UpdateError::DegenerateRewardGradient { .. }));
        assert!(err.is_degenerate());
    }

    #[test]
    fn slack_projection_is_identity() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], -10.0, SpdOperator::identity(2), 0.5);
        assert_eq!(projection_step(&[1.0, 0.0], &inp, ProjectionMetric::L2).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn projection_onto_hyperplane() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 0.0, SpdOperator::identity(2), 0.5);
        assert_eq!(projection_step(&[1.0, 0.0], &inp, ProjectionMetric::L2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_cancels_step_along_normal() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 0.0, SpdOperator::identity(2), 0.5);
        let res = pcpo_update(&inp, ProjectionMetric::L2).unwrap();
        assert_relative_eq!(res.eta, 1.0, epsilon = 1e-15);
        assert_relative_eq!(res.lagrange_cost, 1.0, epsilon = 1e-15);
        assert!(res.projection_active);
        assert_eq!(res.theta_next, vec![0.0, 0.0]);
    }

    #[test]
    fn unprojectable_constraint() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 0.5, SpdOperator::identity(2), 0.5);
        let err = pcpo_update(&inp, ProjectionMetric::Kl).unwrap_err();
        assert!(matches!(err, UpdateError::UnprojectableConstraint { .. }));
    }

    #[test]
    fn kl_projection_satisfies_constraint() {
        let h = SpdOperator::diagonal(vec![2.0, 1.0], 0.0).unwrap();
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 2.0], 0.1, h, 0.01);
        let out = projection_step(&[1.0, 1.0], &inp, ProjectionMetric::Kl).unwrap();
        assert!(linearized_violation(&out, &inp.theta, &inp.a, inp.b).abs() <= 1e-12);
    }

    #[test]
    fn pcpo_is_composition() {
        let h = SpdOperator::from_matrix(
            DenseMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap(),
            1e-8,
        )
        .unwrap();
        let inp = inputs(&[0.1, -0.2], &[1.0, 0.5], &[0.4, 1.0], 0.02, h, 0.05);
        for metric in [ProjectionMetric::Kl, ProjectionMetric::L2] {
            let res = pcpo_update(&inp, metric).unwrap();
            let half = reward_improvement_step(&inp).unwrap();
            let two = projection_step(&half, &inp, metric).unwrap();
            assert_eq!(res.theta_next, two);
        }
    }

    #[test]
    fn orthogonal_constraints_one_sweep() {
        let inp = inputs(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 0.0, SpdOperator::identity(2), 0.5);
        let cons = vec![
            HalfSpace { a: vec![1.0, 0.0], b: 0.0 },
            HalfSpace { a: vec![0.0, 1.0], b: 0.0 },
        ];
        let out = alternating_projections(&[1.0, 1.0], &cons, &inp, ProjectionMetric::L2, 1).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_constraint_matches_projection_step() {
        let h = SpdOperator::diagonal(vec![3.0, 0.5, 1.0], 1e-8).unwrap();
        let inp = inputs(&[0.0, 0.1, 0.2], &[1.0, 0.0, 0.0], &[0.5, -1.0, 2.0], 0.3, h, 0.1);
        let mid = [0.7, -0.4, 1.1];
        for metric in [ProjectionMetric::Kl, ProjectionMetric::L2] {
            let cons = vec![HalfSpace { a: inp.a.clone(), b: inp.b }];
            let alt = alternating_projections(&mid, &cons, &inp, metric, DEFAULT_SWEEPS).unwrap();
            assert_eq!(alt, projection_step(&mid, &inp, metric).unwrap());
        }
    }

    #[test]
    fn alternating_rejects_empty() {
        let inp = inputs(&[0.0], &[1.0], &[1.0], 0.0, SpdOperator::identity(1), 0.5);
        assert!(alternating_projections(&[1.0], &[], &inp, ProjectionMetric::L2, 3).is_err());
    }

    #[test]
    fn certificate_examples() {
        let id = SpdOperator::identity(2);
        assert!(variational_inequality_check(&[0.3, 0.2], &[0.3, 0.2], &[vec![1.0, 5.0]], &id));
        let probes = vec![vec![-1.0, 0.0], vec![0.0, 1.0], vec![-2.0, -2.0]];
        assert!(variational_inequality_check(&[1.0, 0.0], &[0.0, 0.0], &probes, &id));
        assert!(!variational_inequality_check(&[1.0, 0.0], &[-0.5, 0.0], &probes, &id));
    }

    #[test]
    fn stationary_inputs_leave_theta_fixed() {
        // Reward gradient parallel to the cost gradient on the boundary (b = 0):
        // the projection removes the whole reward step under the KL metric.
        let h = SpdOperator::from_matrix(
            DenseMatrix::from_rows(&[vec![2.0, 0.4], vec![0.4, 1.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        let a = [0.3, -1.2];
        let g: Vec<f64> = a.iter().map(|v| 2.5 * v).collect();
        let theta = [0.4, 0.9];
        let inp = inputs(&theta, &g, &a, 0.0, h, 0.02);
        let res = pcpo_update(&inp, ProjectionMetric::Kl).unwrap();
        for (x, t) in res.theta_next.iter().zip(theta) {
            assert!((x - t).abs() <= 1e-8);
        }
    }

    proptest! {
        #[test]
        fn trust_region_is_tight(seed in 0u64..400, delta in 1e-5f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = SpdOperator::diagonal(diag, 0.0).unwrap();
            let inp = inputs(&[0.0; 4], &g, &[0.0; 4], -1.0, h.clone(), delta);
            let step = reward_improvement_step(&inp).unwrap();
            prop_assert!((0.5 * h.quad_form(&step) / delta - 1.0).abs() < 1e-6);
        }

        #[test]
        fn projection_is_non_expansive(seed in 0u64..400, kl in proptest::bool::ANY) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            let mut v = || (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (a, x, y, theta) = (v(), v(), v(), v());
            let h = SpdOperator::diagonal(diag, 0.0).unwrap();
            let inp = inputs(&theta, &a, &a, 0.3, h.clone(), 0.1);
            let metric = if kl { ProjectionMetric::Kl } else { ProjectionMetric::L2 };
            let l = if kl { h } else { SpdOperator::identity(n) };
            let px = projection_step(&x, &inp, metric).unwrap();
            let py = projection_step(&y, &inp, metric).unwrap();
            let before = l.quad_form(&linalg::sub(&x, &y)).sqrt();
            let after = l.quad_form(&linalg::sub(&px, &py)).sqrt();
            prop_assert!(after <= before * (1.0 + 1e-12) + 1e-14);
        }
    }
}
