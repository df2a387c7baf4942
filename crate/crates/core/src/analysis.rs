//! Diagnostics for the theory: per-update worst-case bounds on tabular
//! problems, objective-change inequalities along an iterate trajectory,
//! stationary-point certificates, and the two-dimensional non-convex toy
//! problem comparing KL and L2 projections.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{evaluate_exact, CmdpError, TabularCmdp};
use crate::linalg::{self, conjugate_gradient, CgConfig, DenseMatrix, LinalgError, SpdOperator};
use crate::policy::{weighted_kl, PolicyError, PolicyParams, State};
use crate::subproblem::{pcpo_update, ProjectionMetric, UpdateError, UpdateInputs, QUAD_FORM_FLOOR};
use crate::trainer::CSV_SCHEMA_LINE;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("internal consistency check failed: {0}")]
    Internal(String),
    #[error("certificate undefined: {0}")]
    CertificateUndefined(String),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Worst-case bound quantities of one update, computed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_r: f64,
    pub eps_c: f64,
    pub b_plus: f64,
    pub alpha_kl: f64,
    pub delta: f64,
    pub reward_lower_bound: f64,
    pub cost_upper_bound: f64,
    /// Bounds of the feasible-start theorem (no `b_plus` term).
    pub feasible_reward_bound: f64,
    pub feasible_cost_bound: f64,
    pub realized_dr: f64,
    pub realized_jc: f64,
    /// Mean KL(new || old) under the old discounted state distribution.
    pub realized_kl: f64,
}

impl BoundReport {
    pub fn reward_bound_holds(&self) -> bool {
        self.realized_dr >= self.reward_lower_bound
    }

    pub fn cost_bound_holds(&self) -> bool {
        self.realized_jc <= self.cost_upper_bound
    }

    /// The reduction `b_plus = 0 => bounds coincide` as a residual.
    pub fn reduction_gap(&self) -> f64 {
        (self.reward_lower_bound - self.feasible_reward_bound)
            .abs()
            .max((self.cost_upper_bound - self.feasible_cost_bound).abs())
    }
}

/// Tolerance for the internal `b_plus = 0` reduction check.
pub const REDUCTION_TOL: f64 = 1e-12;

/// Compute the bound report for the update `p_old -> p_new`.
///
/// `a` is the cost gradient and `fisher` the curvature used for the update;
/// `alpha_kl = 1 / (2 a^T H^-1 a)` is solved to full accuracy.
pub fn bound_report(
    spec: &TabularCmdp,
    p_old: &PolicyParams,
    p_new: &PolicyParams,
    delta: f64,
    a: &[f64],
    fisher: &SpdOperator,
) -> Result<BoundReport, AnalysisError> {
    let old = evaluate_exact(spec, p_old)?;
    let new = evaluate_exact(spec, p_new)?;
    let gamma = spec.gamma;
    let mut eps_r = 0.0_f64;
    let mut eps_c = 0.0_f64;
    for s in 0..spec.n_states {
        let pi = &new.pi[s];
        eps_r = eps_r.max(linalg::dot(pi, &old.adv_r[s]).abs());
        eps_c = eps_c.max(linalg::dot(pi, &old.adv_c[s]).abs());
    }
    let b_plus = (old.j_c - spec.h).max(0.0);
    let cg = CgConfig::exact(fisher.dim());
    let w = conjugate_gradient(fisher, a, cg.max_iters, cg.tol)?;
    let s_quad = linalg::dot(a, &w.x);
    let alpha_kl = if s_quad > QUAD_FORM_FLOOR {
        1.0 / (2.0 * s_quad)
    } else {
        f64::INFINITY
    };
    let inflation = if b_plus == 0.0 { 0.0 } else { b_plus * b_plus * alpha_kl };
    let scale = gamma / ((1.0 - gamma) * (1.0 - gamma));
    let radius = (2.0 * (delta + inflation)).sqrt();
    let radius_feasible = (2.0 * delta).sqrt();

    let states: Vec<State> = (0..spec.n_states).map(State::Discrete).collect();
    let report = BoundReport {
        eps_r,
        eps_c,
        b_plus,
        alpha_kl,
        delta,
        reward_lower_bound: -radius * scale * eps_r,
        cost_upper_bound: spec.h + radius * scale * eps_c,
        feasible_reward_bound: -radius_feasible * scale * eps_r,
        feasible_cost_bound: spec.h + radius_feasible * scale * eps_c,
        realized_dr: new.j_r - old.j_r,
        realized_jc: new.j_c,
        realized_kl: weighted_kl(p_new, p_old, &states, &old.d_pi)?,
    };
    if b_plus == 0.0 && report.reduction_gap() > REDUCTION_TOL {
        return Err(AnalysisError::Internal(format!(
            "bounds disagree at b_plus = 0 by {:e}",
            report.reduction_gap()
        )));
    }
    Ok(report)
}

pub fn write_bounds_csv(path: &Path, reports: &[BoundReport]) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "update",
        "eps_r",
        "eps_c",
        "b_plus",
        "alpha_kl",
        "delta",
        "reward_lower_bound",
        "cost_upper_bound",
        "realized_dr",
        "realized_jc",
        "realized_kl",
    ])?;
    for (k, r) in reports.iter().enumerate() {
        w.write_record([
            k.to_string(),
            r.eps_r.to_string(),
            r.eps_c.to_string(),
            r.b_plus.to_string(),
            r.alpha_kl.to_string(),
            r.delta.to_string(),
            r.reward_lower_bound.to_string(),
            r.cost_upper_bound.to_string(),
            r.realized_dr.to_string(),
            r.realized_jc.to_string(),
            r.realized_kl.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, AnalysisError> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "{CSV_SCHEMA_LINE}")?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

/// One step of the objective-change check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Step {
    pub step: usize,
    pub eta: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; non-negative when the inequality holds.
    pub slack: f64,
    /// Whether the singular-value premise of the inequality is met.
    pub premise: bool,
    pub holds: bool,
    pub condition_number: f64,
    /// `2 |g|^2 / (L^2 delta)`, the level the condition number is compared
    /// against for the L2 projection.
    pub condition_threshold: f64,
}

/// Smooth objective (minimised) with a known gradient Lipschitz constant.
pub struct SmoothObjective<'a> {
    pub f: &'a dyn Fn(&[f64]) -> f64,
    pub grad: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub lipschitz: f64,
}

/// Evaluate the objective-change inequalities along `trajectory`.
///
/// KL: `f(x+) <= f(x) + d^T (-(1/eta) H + (L/2) I) d`, premise
/// `sigma_min(H) > L eta / 2`. L2: `f(x+) <= f(x) + (L/2 - 1/eta) |d|^2`,
/// premise `sigma_max(H) <= 1`. `eta = sqrt(2 delta / g^T H^-1 g)` with `g`
/// the gradient at the start of each step.
pub fn theorem3_objective_check(
    obj: &SmoothObjective<'_>,
    fisher: &SpdOperator,
    trajectory: &[Vec<f64>],
    delta: f64,
    metric: ProjectionMetric,
    spectrum: &linalg::ConditionReport,
) -> Result<Vec<Theorem3Step>, AnalysisError> {
    let l = obj.lipschitz;
    let cg = CgConfig::exact(fisher.dim());
    let mut out = Vec::with_capacity(trajectory.len().saturating_sub(1));
    for (k, pair) in trajectory.windows(2).enumerate() {
        let (x, x_next) = (&pair[0], &pair[1]);
        let g = (obj.grad)(x);
        let sol = conjugate_gradient(fisher, &g, cg.max_iters, cg.tol)?;
        let q = linalg::dot(&g, &sol.x);
        let eta = if q > QUAD_FORM_FLOOR {
            (2.0 * delta / q).sqrt()
        } else {
            f64::INFINITY
        };
        let d = linalg::sub(x_next, x);
        let dd = linalg::dot(&d, &d);
        let lhs = (obj.f)(x_next);
        let (rhs, premise) = match metric {
            ProjectionMetric::Kl => {
                let dhd = fisher.quad_form(&d);
                (
                    (obj.f)(x) - dhd / eta + 0.5 * l * dd,
                    spectrum.sigma_min > l * eta / 2.0,
                )
            }
            ProjectionMetric::L2 => ((obj.f)(x) + (0.5 * l - 1.0 / eta) * dd, spectrum.sigma_max <= 1.0),
        };
        let slack = rhs - lhs;
        let tol = 1e-10 * (1.0 + lhs.abs().max(rhs.abs()));
        out.push(Theorem3Step {
            step: k,
            eta,
            lhs,
            rhs,
            slack,
            premise,
            holds: slack >= -tol,
            condition_number: spectrum.condition_number,
            condition_threshold: 2.0 * q.max(0.0) / (l * l * delta),
        });
    }
    Ok(out)
}

/// Collinearity certificate for a boundary fixed point.
///
/// `g` is the gradient of the minimised objective; the point is stationary
/// when `g` (KL) or `H^-1 g` (L2) points along `-a`.
pub fn stationary_point_certificate(
    x: &[f64],
    g: &[f64],
    a: &[f64],
    rhs: f64,
    fisher: &SpdOperator,
    metric: ProjectionMetric,
) -> Result<bool, AnalysisError> {
    let gap = linalg::dot(a, x) - rhs;
    if gap.abs() > 1e-6 {
        return Err(AnalysisError::InvalidInput(format!(
            "point is not on the constraint boundary (a^T x - rhs = {gap:e})"
        )));
    }
    let v = match metric {
        ProjectionMetric::Kl => g.to_vec(),
        ProjectionMetric::L2 => {
            let cg = CgConfig::exact(fisher.dim());
            conjugate_gradient(fisher, g, cg.max_iters, cg.tol)?.x
        }
    };
    let neg_a = linalg::scaled(-1.0, a);
    let cos = linalg::cosine(&v, &neg_a)
        .ok_or_else(|| AnalysisError::CertificateUndefined("zero gradient or zero normal".into()))?;
    Ok(cos >= 1.0 - 1e-6)
}

/// Curvature used as the metric `H` of the toy problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy2dMetric {
    /// `|diag(2y)|`, positive definite.
    AbsHessian,
    /// `-diag(2y)`, the Hessian of the minimised objective (indefinite for mixed-sign `y`).
    ObjectiveHessian,
    Identity,
}

impl Toy2dMetric {
    pub const ALL: [Toy2dMetric; 3] = [Self::AbsHessian, Self::ObjectiveHessian, Self::Identity];

    pub fn matrix(self, y: &[f64]) -> DenseMatrix {
        let diag: Vec<f64> = match self {
            Self::AbsHessian => y.iter().map(|v| (2.0 * v).abs()).collect(),
            Self::ObjectiveHessian => y.iter().map(|v| -2.0 * v).collect(),
            Self::Identity => vec![1.0; y.len()],
        };
        DenseMatrix::from_diagonal(&diag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AbsHessian => "abs_hessian",
            Self::ObjectiveHessian => "objective_hessian",
            Self::Identity => "identity",
        }
    }
}

/// Maximise `x^T diag(y) x` subject to `constraint_normal^T x <= constraint_rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toy2dConfig {
    pub y: Vec<f64>,
    pub constraint_normal: Vec<f64>,
    pub constraint_rhs: f64,
    pub x0: Vec<f64>,
    pub delta: f64,
    pub iterations: usize,
    pub metric: Toy2dMetric,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        Self {
            y: vec![5.0, -1.0],
            constraint_normal: vec![1.0, 1.0],
            constraint_rhs: -1.0,
            x0: vec![0.5, -2.0],
            delta: 0.1,
            iterations: 10_000,
            metric: Toy2dMetric::AbsHessian,
        }
    }
}

impl Toy2dConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.y.len() != 2 || self.constraint_normal.len() != 2 || self.x0.len() != 2 {
            return Err(AnalysisError::InvalidInput("toy problem vectors must have length 2".into()));
        }
        if !(self.delta > 0.0) {
            return Err(AnalysisError::InvalidInput("delta must be positive".into()));
        }
        Ok(())
    }

    /// Gradient of the maximised objective.
    pub fn reward_gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.y).map(|(xi, yi)| 2.0 * yi * xi).collect()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.y).map(|(xi, yi)| yi * xi * xi).sum()
    }

    pub fn fisher(&self) -> Result<SpdOperator, AnalysisError> {
        Ok(SpdOperator::from_matrix(self.metric.matrix(&self.y), 0.0)?)
    }

    /// Combined PCPO update direction `x_next - x` at `x`; zero where the
    /// reward step is degenerate.
    pub fn direction(&self, x: &[f64], metric: ProjectionMetric) -> Result<Vec<f64>, AnalysisError> {
        let fisher = self.fisher()?;
        self.direction_with(x, metric, &fisher)
    }

    fn direction_with(&self, x: &[f64], metric: ProjectionMetric, fisher: &SpdOperator) -> Result<Vec<f64>, AnalysisError> {
        let b = linalg::dot(&self.constraint_normal, x) - self.constraint_rhs;
        let inp = UpdateInputs::new(
            x.to_vec(),
            self.reward_gradient(x),
            self.constraint_normal.clone(),
            b,
            fisher.clone(),
            self.delta,
        )?
        .with_cg(CgConfig::exact(2));
        match pcpo_update(&inp, metric) {
            Ok(res) => Ok(linalg::sub(&res.theta_next, x)),
            Err(e) if e.is_degenerate() => Ok(vec![0.0; 2]),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub x1: f64,
    pub x2: f64,
    pub d1: f64,
    pub d2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy2dResult {
    pub path: Vec<[f64; 2]>,
    pub field: Vec<FieldPoint>,
    /// First iteration at which `|x| > 1e3`, if any.
    pub diverged_at: Option<usize>,
    /// The run stopped because the reward step became degenerate.
    pub stalled: bool,
    /// Length of the last step taken.
    pub final_step: f64,
}

/// Norm beyond which the toy path is declared divergent.
pub const TOY_DIVERGENCE_NORM: f64 = 1e3;

/// Run the toy problem from `cfg.x0` and evaluate the direction field on the
/// grid `[-1, 1] x [-2, 0]` with spacing 0.25.
pub fn toy2d_run(cfg: &Toy2dConfig, metric: ProjectionMetric) -> Result<Toy2dResult, AnalysisError> {
    cfg.validate()?;
    let fisher = cfg.fisher()?;
    let mut x = cfg.x0.clone();
    let mut path = vec![[x[0], x[1]]];
    let mut diverged_at = None;
    let mut stalled = false;
    let mut final_step = f64::NAN;
    for k in 0..cfg.iterations {
        let d = cfg.direction_with(&x, metric, &fisher)?;
        final_step = linalg::norm(&d);
        if final_step == 0.0 {
            stalled = true;
            break;
        }
        linalg::axpy(1.0, &d, &mut x);
        path.push([x[0], x[1]]);
        if linalg::norm(&x) > TOY_DIVERGENCE_NORM {
            diverged_at = Some(k + 1);
            break;
        }
    }
    let mut field = Vec::with_capacity(81);
    for i in 0..9 {
        for j in 0..9 {
            let p = [-1.0 + 0.25 * i as f64, -2.0 + 0.25 * j as f64];
            let d = cfg.direction_with(&p, metric, &fisher)?;
            field.push(FieldPoint {
                x1: p[0],
                x2: p[1],
                d1: d[0],
                d2: d[1],
            });
        }
    }
    Ok(Toy2dResult {
        path,
        field,
        diverged_at,
        stalled,
        final_step,
    })
}

pub fn write_toy2d_path_csv(path: &Path, result: &Toy2dResult) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    w.write_record(["iter", "x1", "x2"])?;
    for (k, p) in result.path.iter().enumerate() {
        w.write_record([k.to_string(), p[0].to_string(), p[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_toy2d_field_csv(path: &Path, result: &Toy2dResult) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    w.write_record(["x1", "x2", "d1", "d2"])?;
    for p in &result.field {
        w.write_record([p.x1.to_string(), p.x2.to_string(), p.d1.to_string(), p.d2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyFamily;

    #[test]
    fn identical_policies_have_zero_bounds() {
        let t = TabularCmdp::default_chain();
        let fam = PolicyFamily::TabularSoftmax { n_states: 8, n_actions: 2 };
        let p = PolicyParams::init(fam, 2).unwrap();
        let ex = crate::estimation::exact_update_inputs(&t, &p, 1e-8).unwrap();
        let r = bound_report(&t, &p, &p, 1e-4, &ex.a, &ex.fisher.operator).unwrap();
        assert!(r.eps_r < 1e-10 && r.eps_c < 1e-10);
        assert_eq!(r.realized_dr, 0.0);
        assert!(r.reward_bound_holds());
        assert!((r.cost_upper_bound - t.h).abs() < 1e-8);
    }

    #[test]
    fn feasible_start_reduces_to_the_simpler_bound() {
        let mut t = TabularCmdp::default_chain();
        t.h = 100.0;
        let fam = PolicyFamily::TabularSoftmax { n_states: 8, n_actions: 2 };
        let p = PolicyParams::init(fam.clone(), 2).unwrap();
        let q = PolicyParams::init(fam, 3).unwrap();
        let ex = crate::estimation::exact_update_inputs(&t, &p, 1e-8).unwrap();
        let r = bound_report(&t, &p, &q, 1e-4, &ex.a, &ex.fisher.operator).unwrap();
        assert_eq!(r.b_plus, 0.0);
        assert!(r.reduction_gap() <= REDUCTION_TOL);
    }

    #[test]
    fn quadratic_objective_check_holds() {
        let f = |x: &[f64]| 0.5 * linalg::dot(x, x);
        let grad = |x: &[f64]| x.to_vec();
        let obj = SmoothObjective {
            f: &f,
            grad: &grad,
            lipschitz: 1.0,
        };
        let h = SpdOperator::identity(2);
        let spec = linalg::ConditionReport::new(1.0, 1.0).unwrap();
        let traj = vec![vec![1.0, 1.0], vec![0.9, 0.9], vec![0.9, 0.9]];
        let steps = theorem3_objective_check(&obj, &h, &traj, 0.01, ProjectionMetric::L2, &spec).unwrap();
        assert_eq!(steps.len(), 2);
        assert!(steps.iter().all(|s| s.holds));
        assert!(steps[1].slack.abs() < 1e-15);
    }

    #[test]
    fn certificates() {
        let h = SpdOperator::from_matrix(DenseMatrix::from_diagonal(&[2.0, 1.0]), 0.0).unwrap();
        let a = [1.0, 1.0];
        let x = [-0.5, -0.5];
        assert!(stationary_point_certificate(&x, &[-2.0, -2.0], &a, -1.0, &h, ProjectionMetric::Kl).unwrap());
        let g = [-2.0, -1.0];
        assert!(stationary_point_certificate(&x, &g, &a, -1.0, &h, ProjectionMetric::L2).unwrap());
        assert!(!stationary_point_certificate(&x, &g, &a, -1.0, &h, ProjectionMetric::Kl).unwrap());
        assert!(stationary_point_certificate(&x, &[0.0, 0.0], &a, -1.0, &h, ProjectionMetric::Kl).is_err());
        assert!(stationary_point_certificate(&[0.0, 0.0], &g, &a, -1.0, &h, ProjectionMetric::Kl).is_err());
    }

    #[test]
    fn toy_direction_vanishes_where_gradient_is_parallel_to_normal() {
        let cfg = Toy2dConfig::default();
        let d = cfg.direction(&[0.25, -1.25], ProjectionMetric::Kl).unwrap();
        assert!(linalg::norm(&d) < 1e-12);
    }

    #[test]
    fn toy_field_covers_the_grid() {
        let cfg = Toy2dConfig {
            iterations: 5,
            ..Toy2dConfig::default()
        };
        let r = toy2d_run(&cfg, ProjectionMetric::L2).unwrap();
        assert_eq!(r.field.len(), 81);
        assert_eq!(r.path.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        write_toy2d_path_csv(&dir.path().join("p.csv"), &r).unwrap();
        write_toy2d_field_csv(&dir.path().join("f.csv"), &r).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert!(text.starts_with("# schema=1\niter,x1,x2\n0,0.5,-2\n"));
    }
}
