//! Property and oracle suites. Each suite returns a [`SuiteReport`] of named
//! checks; a suite passes when every check passes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::oracles;
use super::VerifyError;
use crate::analysis::{
    stationary_point_certificate, theorem3_objective_check, toy2d_run, write_bounds_csv, write_toy2d_field_csv,
    write_toy2d_path_csv, SmoothObjective, Toy2dConfig, Toy2dMetric, TOY_DIVERGENCE_NORM,
};
use crate::baselines::{cpo_update, fpo_update, trpo_update, CpoCase, LineSearchConfig};
use crate::cmdp::{performance_identity_check, TabularCmdp};
use crate::linalg::{self, conjugate_gradient, estimate_spectrum, CgConfig, ConditionReport, DenseMatrix, SpdOperator};
use crate::policy::{fisher_vector_product, mean_kl, Action, PolicyFamily, PolicyParams, State};
use crate::subproblem::{
    alternating_projections, linearized_violation, pcpo_update, projection_step, reward_improvement_step,
    variational_inequality_check, HalfSpace, ProjectionMetric, UpdateInputs,
};
use crate::trainer::{train, Algorithm, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
    pub elapsed_ms: u128,
}

impl SuiteReport {
    pub(crate) fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            checks: Vec::new(),
            elapsed_ms: 0,
        }
    }

    pub(crate) fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} ({} ms)", self.suite, self.elapsed_ms)?;
        for c in &self.checks {
            writeln!(f, "  [{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Kkt,
    Lemmas,
    Bounds,
    Toy2d,
    Theorem3,
    Numerics,
    Identity,
    Cg,
    Behavior,
}

impl Suite {
    /// Suites run by `all`. The behavioural suite trains many policies and
    /// is run on request only.
    pub const FAST: [Suite; 8] = [
        Self::Kkt,
        Self::Lemmas,
        Self::Bounds,
        Self::Toy2d,
        Self::Theorem3,
        Self::Numerics,
        Self::Identity,
        Self::Cg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Kkt => "kkt",
            Self::Lemmas => "lemmas",
            Self::Bounds => "bounds",
            Self::Toy2d => "toy2d",
            Self::Theorem3 => "theorem3",
            Self::Numerics => "numerics",
            Self::Identity => "identity",
            Self::Cg => "cg",
            Self::Behavior => "behavior",
        }
    }
}

impl FromStr for Suite {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::FAST
            .into_iter()
            .chain([Self::Behavior])
            .find(|x| x.name() == s)
            .ok_or_else(|| VerifyError::UnknownSuite(s.to_string()))
    }
}

/// Options shared by all suites.
#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Directory for CSV artifacts (toy paths, bound reports).
    pub out_dir: Option<std::path::PathBuf>,
    /// Worker threads for the behavioural suite.
    pub jobs: usize,
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport, VerifyError> {
    let start = Instant::now();
    let mut report = match suite {
        Suite::Kkt => kkt()?,
        Suite::Lemmas => lemmas()?,
        Suite::Bounds => bounds(opts.out_dir.as_deref())?,
        Suite::Toy2d => toy2d(opts.out_dir.as_deref())?,
        Suite::Theorem3 => theorem3()?,
        Suite::Numerics => numerics()?,
        Suite::Identity => identity()?,
        Suite::Cg => cg()?,
        Suite::Behavior => super::behavior::behavior(opts)?,
    };
    report.elapsed_ms = start.elapsed().as_millis();
    Ok(report)
}

// ---------------------------------------------------------------------------
// random instances

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Random SPD matrix `Q diag(lambda) Q^T` with eigenvalues log-uniform in
/// `[lo, hi]`, returned both as an oracle matrix and a production operator.
fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> (DMatrix<f64>, SpdOperator) {
    let m = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let q = m.qr().q();
    let eig: Vec<f64> = (0..n)
        .map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp())
        .collect();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig));
    let a = &q * d * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    (a.clone(), operator_from(&a))
}

fn operator_from(m: &DMatrix<f64>) -> SpdOperator {
    let n = m.nrows();
    let rows: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    SpdOperator::from_matrix(DenseMatrix::from_row_major(n, n, rows).expect("square matrix"), 0.0)
        .expect("symmetric matrix")
}

fn rel_err(x: &[f64], reference: &[f64]) -> f64 {
    linalg::norm(&linalg::sub(x, reference)) / linalg::norm(reference).max(1e-300)
}

fn metric_norm(l: &SpdOperator, v: &[f64]) -> f64 {
    l.quad_form(v).max(0.0).sqrt()
}

// ---------------------------------------------------------------------------
// kkt: closed-form update vs two-stage numerical oracle

fn kkt() -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("kkt");
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for metric in [ProjectionMetric::Kl, ProjectionMetric::L2] {
        let mut worst = 0.0_f64;
        let mut worst_tight = 0.0_f64;
        let mut matched = 0;
        let mut active = 0;
        let total = 100;
        for _ in 0..total {
            let n = rng.random_range(2..=20);
            let (hm, h) = random_spd(&mut rng, n, 0.05, 5.0);
            let theta = normal_vec(&mut rng, n);
            let g = normal_vec(&mut rng, n);
            let a = normal_vec(&mut rng, n);
            let b = rng.random_range(-0.3..0.5);
            let delta = rng.random_range(1e-3..1e-1);
            let inp = UpdateInputs::new(theta.clone(), g.clone(), a.clone(), b, h, delta)?.with_cg(CgConfig::exact(n));
            let res = pcpo_update(&inp, metric)?;
            let oracle = oracles::two_stage_update(&theta, &g, &a, b, &hm, delta, metric == ProjectionMetric::Kl);
            let err = rel_err(&res.theta_next, &oracle);
            worst = worst.max(err);
            if err <= 1e-6 {
                matched += 1;
            }
            active += usize::from(res.projection_active);
            let step = linalg::sub(&reward_improvement_step(&inp)?, &theta);
            let half = 0.5 * inp.fisher.quad_form(&step);
            worst_tight = worst_tight.max((half - delta).abs() / delta);
        }
        rep.check(
            format!("pcpo_update vs two-stage oracle ({metric})"),
            matched == total,
            format!("{matched}/{total} within 1e-6 relative, worst {worst:.2e}, projection active in {active}"),
        );
        rep.check(
            format!("trust-region tightness ({metric})"),
            worst_tight <= 1e-6,
            format!("max |1/2 d^T H d - delta| / delta = {worst_tight:.2e}"),
        );
    }

    // documented example: theta=[1,1], g=[1,2], H=diag(2,1), delta=0.01
    let hm = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    let inp = UpdateInputs::new(
        vec![1.0, 1.0],
        vec![1.0, 2.0],
        vec![1.0, 2.0],
        0.1,
        operator_from(&hm),
        0.01,
    )?
    .with_cg(CgConfig::exact(2));
    let mid = reward_improvement_step(&inp)?;
    let d = oracles::trust_region_qp(&[1.0, 2.0], &hm, 0.01);
    let expect = [1.0 + d[0], 1.0 + d[1]];
    let e1 = rel_err(&mid, &expect);
    let proj = projection_step(&[1.0, 1.0], &inp, ProjectionMetric::Kl)?;
    let oproj = oracles::halfspace_projection(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 2.0], 0.1, &hm);
    let inp0 = UpdateInputs::new(
        vec![0.0, 0.0],
        vec![1.0, 2.0],
        vec![1.0, 2.0],
        0.1,
        operator_from(&hm),
        0.01,
    )?
    .with_cg(CgConfig::exact(2));
    let proj0 = projection_step(&[1.0, 1.0], &inp0, ProjectionMetric::Kl)?;
    let e2 = rel_err(&proj0, &oproj);
    rep.check(
        "worked examples (reward step, KL projection)",
        e1 <= 1e-6 && e2 <= 1e-6 && proj.iter().all(|x| x.is_finite()),
        format!("reward step err {e1:.2e}, projection err {e2:.2e}"),
    );

    // TRPO and FPO against the same trust-region oracle, CPO against the dual oracle.
    let mut worst_trpo = 0.0_f64;
    let mut worst_fpo = 0.0_f64;
    let mut worst_cpo = 0.0_f64;
    let mut cpo_total = 0;
    let mut cpo_ok = 0;
    let mut cases = [0usize; 2];
    while cpo_total < 100 {
        let n = rng.random_range(2..=12);
        let (hm, h) = random_spd(&mut rng, n, 0.1, 3.0);
        let theta = normal_vec(&mut rng, n);
        let g = normal_vec(&mut rng, n);
        let a = normal_vec(&mut rng, n);
        let b = rng.random_range(-0.5..0.2);
        let delta = rng.random_range(1e-3..5e-2);
        let inp = UpdateInputs::new(theta.clone(), g.clone(), a.clone(), b, h, delta)?.with_cg(CgConfig::exact(n));
        let d = oracles::trust_region_qp(&g, &hm, delta);
        worst_trpo = worst_trpo.max(rel_err(&trpo_update(&inp)?, &linalg::add(&theta, &d)));
        let g_mix: Vec<f64> = g.iter().zip(&a).map(|(gi, ai)| gi - 0.5 * ai).collect();
        let dm = oracles::trust_region_qp(&g_mix, &hm, delta);
        worst_fpo = worst_fpo.max(rel_err(&fpo_update(&inp, 0.5)?, &linalg::add(&theta, &dm)));

        let Some(step) = oracles::cpo_dual_step(&g, &a, b, &hm, delta) else {
            continue;
        };
        let out = cpo_update(&inp, &LineSearchConfig::default(), &|_| 0.0, &|_| 0.0)?;
        if out.case == CpoCase::Recovery {
            continue;
        }
        cases[usize::from(out.case == CpoCase::Active)] += 1;
        cpo_total += 1;
        let err = rel_err(&linalg::sub(&out.theta_next, &theta), &step);
        worst_cpo = worst_cpo.max(err);
        if err <= 1e-5 {
            cpo_ok += 1;
        }
    }
    rep.check(
        "trpo_update vs trust-region oracle",
        worst_trpo <= 1e-6,
        format!("worst relative error {worst_trpo:.2e}"),
    );
    rep.check(
        "fpo_update (lambda=0.5) vs mixed-gradient oracle",
        worst_fpo <= 1e-6,
        format!("worst relative error {worst_fpo:.2e}"),
    );
    rep.check(
        "cpo_update vs dual grid-search oracle",
        cpo_ok == cpo_total,
        format!(
            "{cpo_ok}/{cpo_total} feasible instances within 1e-5 (inactive {}, active {}), worst step error {worst_cpo:.2e}",
            cases[0], cases[1]
        ),
    );

    // alternating projections onto two non-orthogonal half-spaces (L2)
    let mut worst_ap = 0.0_f64;
    for _ in 0..10 {
        let a1 = [rng.random_range(0.5..1.5), rng.random_range(-0.5..0.5)];
        let a2 = [rng.random_range(-0.3..0.7), rng.random_range(0.5..1.5)];
        let p = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let inp = UpdateInputs::new(
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            a1.to_vec(),
            0.0,
            SpdOperator::identity(2),
            0.1,
        )?
        .with_cg(CgConfig::exact(2));
        let cons = [
            HalfSpace { a: a1.to_vec(), b: 0.0 },
            HalfSpace { a: a2.to_vec(), b: 0.0 },
        ];
        let x = alternating_projections(&p, &cons, &inp, ProjectionMetric::L2, 50)?;
        let o = oracles::grid_projection_2d(p, &[a1, a2], &[0.0, 0.0]);
        worst_ap = worst_ap.max(linalg::norm(&linalg::sub(&x, &o)));
    }
    rep.check(
        "alternating projections vs grid oracle (two half-spaces, 50 sweeps)",
        worst_ap <= 1e-6,
        format!("worst distance {worst_ap:.2e}"),
    );
    Ok(rep)
}

// ---------------------------------------------------------------------------
// lemmas: non-expansiveness and the variational-inequality certificate

fn lemmas() -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("lemmas");
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for metric in [ProjectionMetric::Kl, ProjectionMetric::L2] {
        let total = 200;
        let mut nonexp = 0;
        let mut vi = 0;
        let mut negative = 0;
        let mut worst_ratio = 0.0_f64;
        for _ in 0..total {
            let n = rng.random_range(2..=10);
            let (hm, h) = random_spd(&mut rng, n, 0.1, 5.0);
            let theta_k = normal_vec(&mut rng, n);
            let a = normal_vec(&mut rng, n);
            let b = rng.random_range(-0.5..0.5);
            let inp = UpdateInputs::new(theta_k.clone(), normal_vec(&mut rng, n), a.clone(), b, h.clone(), 0.01)?
                .with_cg(CgConfig::exact(n));
            let l = match metric {
                ProjectionMetric::Kl => h.clone(),
                ProjectionMetric::L2 => SpdOperator::identity(n),
            };
            let lm = match metric {
                ProjectionMetric::Kl => hm.clone(),
                ProjectionMetric::L2 => DMatrix::identity(n, n),
            };

            let x = linalg::add(&theta_k, &normal_vec(&mut rng, n));
            let y = linalg::add(&theta_k, &normal_vec(&mut rng, n));
            let px = projection_step(&x, &inp, metric)?;
            let py = projection_step(&y, &inp, metric)?;
            let ratio = metric_norm(&l, &linalg::sub(&px, &py)) / metric_norm(&l, &linalg::sub(&x, &y));
            worst_ratio = worst_ratio.max(ratio);
            if ratio <= 1.0 + 1e-10 {
                nonexp += 1;
            }

            // probes: half on the boundary, half strictly inside
            let mut probes = Vec::with_capacity(50);
            for i in 0..50 {
                let z = linalg::add(&theta_k, &linalg::scaled(2.0, &normal_vec(&mut rng, n)));
                let on_boundary = {
                    let viol = linearized_violation(&z, &theta_k, &a, b);
                    linalg::sub(&z, &linalg::scaled(viol / linalg::dot(&a, &a), &a))
                };
                let probe = if i % 2 == 0 {
                    on_boundary
                } else {
                    linalg::sub(&on_boundary, &linalg::scaled(rng.random_range(0.01..2.0), &a))
                };
                probes.push(probe);
            }
            let star = projection_step(&x, &inp, metric)?;
            let ostar = oracles::halfspace_projection(&x, &theta_k, &a, b, &lm);
            if variational_inequality_check(&x, &star, &probes, &l) && rel_err(&star, &ostar) <= 1e-8 {
                vi += 1;
            }
            // perturb the oracle projection along the constraint surface
            let mut u = normal_vec(&mut rng, n);
            let proj = linalg::dot(&u, &a) / linalg::dot(&a, &a);
            linalg::axpy(-proj, &a, &mut u);
            let u = linalg::scaled(1e-2 / linalg::norm(&u), &u);
            let moved = linalg::add(&ostar, &u);
            if !variational_inequality_check(&x, &moved, &probes, &l) {
                negative += 1;
            }
        }
        rep.check(
            format!("non-expansiveness ({metric})"),
            nonexp == total,
            format!("{nonexp}/{total} pairs, worst |P(x)-P(y)|/|x-y| = {worst_ratio:.6}"),
        );
        rep.check(
            format!("variational-inequality certificate at projections ({metric})"),
            vi == total,
            format!("{vi}/{total} instances certified with 50 probes, matching the KKT oracle to 1e-8"),
        );
        rep.check(
            format!("certificate rejects perturbed points ({metric})"),
            negative == total,
            format!("{negative}/{total} perturbed points rejected"),
        );
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// toy2d: stationary points and paths of the non-convex toy problem

/// Published stationary points of the KL update on the toy problem.
pub const TOY_STATIONARY_POINTS: [[f64; 2]; 3] = [[0.75, -1.75], [0.25, -1.25], [-0.25, -0.75]];

fn toy2d(out_dir: Option<&Path>) -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("toy2d");
    let base = Toy2dConfig::default();

    // (a) metric search for the stationary points
    let mut search = Vec::new();
    let mut any_metric = None;
    for metric in Toy2dMetric::ALL {
        let cfg = Toy2dConfig {
            metric,
            ..base.clone()
        };
        let norms: Vec<f64> = TOY_STATIONARY_POINTS
            .iter()
            .map(|p| cfg.direction(p, ProjectionMetric::Kl).map(|d| linalg::norm(&d)))
            .collect::<Result<_, _>>()?;
        if norms.iter().all(|v| *v <= 1e-6) && any_metric.is_none() {
            any_metric = Some(metric);
        }
        search.push(format!(
            "{}: [{}]",
            metric.name(),
            norms.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
        ));
    }
    rep.check(
        "KL update direction vanishes at the three stationary points",
        any_metric.is_some(),
        format!("|direction| per metric at {:?}: {}", TOY_STATIONARY_POINTS, search.join("; ")),
    );

    // (b) KL path from x0 converges to a boundary point passing the certificate
    let mut kl_detail = Vec::new();
    let mut kl_ok = None;
    for metric in Toy2dMetric::ALL {
        let cfg = Toy2dConfig {
            metric,
            ..base.clone()
        };
        let r = toy2d_run(&cfg, ProjectionMetric::Kl)?;
        let last = *r.path.last().expect("path has the start point");
        let bounded = r.diverged_at.is_none();
        let step = r.final_step;
        let converged = bounded && step <= 1e-9;
        let on_boundary = (linalg::dot(&cfg.constraint_normal, &last) - cfg.constraint_rhs).abs() <= 1e-6;
        let certified = if converged && on_boundary {
            // gradient of the minimised objective -x^T diag(y) x
            let g: Vec<f64> = cfg.reward_gradient(&last).iter().map(|v| -v).collect();
            stationary_point_certificate(
                &last,
                &g,
                &cfg.constraint_normal,
                cfg.constraint_rhs,
                &cfg.fisher()?,
                ProjectionMetric::Kl,
            )
            .unwrap_or(false)
        } else {
            false
        };
        kl_detail.push(format!(
            "{}: end [{:.6}, {:.6}] after {} steps, last step {:.1e}, bounded {bounded}, boundary {on_boundary}, certificate {certified}",
            metric.name(),
            last[0],
            last[1],
            r.path.len() - 1,
            step
        ));
        if certified && kl_ok.is_none() {
            kl_ok = Some((metric, r));
        }
        if metric == base.metric {
            if let Some(dir) = out_dir {
                write_toy2d_path_csv(&dir.join("toy2d_path_kl.csv"), &toy2d_run(&cfg, ProjectionMetric::Kl)?)?;
            }
        }
    }
    rep.check(
        "KL path converges to a certified boundary point",
        kl_ok.is_some(),
        format!(
            "selected metric: {}; {}",
            kl_ok.as_ref().map_or("none", |(m, _)| m.name()),
            kl_detail.join("; ")
        ),
    );
    if let (Some(dir), Some((metric, r))) = (out_dir, &kl_ok) {
        write_toy2d_path_csv(&dir.join(format!("toy2d_path_kl_{}.csv", metric.name())), r)?;
    }

    // (c) L2 path diverges
    let mut l2_detail = Vec::new();
    let mut l2_ok = None;
    for metric in Toy2dMetric::ALL {
        let cfg = Toy2dConfig {
            metric,
            ..base.clone()
        };
        let r = toy2d_run(&cfg, ProjectionMetric::L2)?;
        l2_detail.push(format!(
            "{}: {}",
            metric.name(),
            match r.diverged_at {
                Some(k) => format!("|x| > {TOY_DIVERGENCE_NORM} at iteration {k}"),
                None => format!("bounded after {} steps (stalled {})", r.path.len() - 1, r.stalled),
            }
        ));
        if r.diverged_at.is_some() && l2_ok.is_none() {
            l2_ok = Some((metric, r));
        }
    }
    rep.check(
        "L2 path norm exceeds 1e3 within the iteration budget",
        l2_ok.is_some(),
        format!(
            "selected metric: {}; {}",
            l2_ok.as_ref().map_or("none", |(m, _)| m.name()),
            l2_detail.join("; ")
        ),
    );
    if let Some(dir) = out_dir {
        if let Some((_, r)) = &l2_ok {
            write_toy2d_path_csv(&dir.join("toy2d_path_l2.csv"), r)?;
        }
        let r = toy2d_run(&Toy2dConfig { iterations: 0, ..base.clone() }, ProjectionMetric::Kl)?;
        write_toy2d_field_csv(&dir.join("toy2d_field.csv"), &r)?;
        write_toy2d_path_csv(&dir.join("toy2d_path.csv"), &toy2d_run(&base, ProjectionMetric::Kl)?)?;
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// bounds: worst-case bound verification in oracle mode

/// Oracle-mode PCPO-KL run on the default chain with bound reports attached.
pub fn bounds_run(h: f64, iterations: usize) -> Result<Vec<crate::analysis::BoundReport>, VerifyError> {
    let mut chain = TabularCmdp::default_chain();
    chain.h = h;
    let mut cfg = RunConfig::new(Algorithm::PcpoKl, crate::cmdp::CmdpSpec::Tabular(chain));
    cfg.oracle = true;
    cfg.bounds = true;
    cfg.delta = 1e-4;
    cfg.iterations = iterations;
    cfg.cg_iters = 16;
    let out = train(&cfg)?;
    Ok(out.records.into_iter().filter_map(|r| r.bound_report).collect())
}

fn bounds(out_dir: Option<&Path>) -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("bounds");
    let h = TabularCmdp::default_chain().h;
    let reports = bounds_run(h, 100)?;
    if let Some(dir) = out_dir {
        write_bounds_csv(&dir.join("bounds.csv"), &reports)?;
    }
    let eligible: Vec<_> = reports.iter().filter(|r| r.realized_kl <= 1.1 * r.delta).collect();
    let reward_ok = eligible.iter().filter(|r| r.reward_bound_holds()).count();
    let cost_ok = eligible.iter().filter(|r| r.cost_bound_holds()).count();
    let infeasible = reports.iter().filter(|r| r.b_plus > 0.0).count();
    rep.check(
        "reward lower bound on updates with KL <= 1.1 delta",
        reward_ok == eligible.len() && !eligible.is_empty(),
        format!(
            "{reward_ok}/{} eligible updates ({} of {} total; {infeasible} from a violating policy)",
            eligible.len(),
            eligible.len(),
            reports.len()
        ),
    );
    let worst_cost = eligible
        .iter()
        .map(|r| r.realized_jc - r.cost_upper_bound)
        .fold(f64::NEG_INFINITY, f64::max);
    rep.check(
        "cost upper bound on updates with KL <= 1.1 delta",
        cost_ok == eligible.len() && !eligible.is_empty(),
        format!("{cost_ok}/{} eligible updates, max (J_C - bound) = {worst_cost:.3e}", eligible.len()),
    );

    let feasible_reports = bounds_run(50.0, 20)?;
    let gap = feasible_reports
        .iter()
        .chain(reports.iter())
        .filter(|r| r.b_plus == 0.0)
        .map(|r| r.reduction_gap())
        .fold(0.0, f64::max);
    let n_zero = feasible_reports.iter().chain(reports.iter()).filter(|r| r.b_plus == 0.0).count();
    rep.check(
        "violating-start bound reduces to the feasible-start bound at b+ = 0",
        gap <= 1e-12 && n_zero > 0,
        format!("{n_zero} reports with b+ = 0, max gap {gap:.1e}"),
    );
    let dominated = reports
        .iter()
        .filter(|r| r.b_plus > 0.0)
        .all(|r| r.reward_lower_bound <= r.feasible_reward_bound && r.cost_upper_bound >= r.feasible_cost_bound);
    rep.check(
        "violating-start bounds are no tighter than feasible-start bounds",
        dominated,
        format!("{infeasible} reports with b+ > 0"),
    );
    Ok(rep)
}

// ---------------------------------------------------------------------------
// theorem3: objective-change inequalities on random smooth quadratics

struct Harness {
    q: DMatrix<f64>,
    c: Vec<f64>,
    lipschitz: f64,
    fisher: SpdOperator,
    spectrum: ConditionReport,
    trajectory: Vec<Vec<f64>>,
    delta: f64,
}

fn harness(rng: &mut ChaCha8Rng, metric: ProjectionMetric, scale_lo: f64, scale_hi: f64) -> Result<Harness, VerifyError> {
    let n = rng.random_range(2..=6);
    let m = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let q = (&m * m.transpose()) / n as f64 - DMatrix::identity(n, n) * 0.3;
    let c = normal_vec(rng, n);
    let eig = oracles::symmetric_eigenvalues(&q);
    let lipschitz = eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let (hm, _) = random_spd(rng, n, 0.2, 1.0);
    let scale = rng.random_range(scale_lo..scale_hi);
    let hm = hm * scale;
    let fisher = operator_from(&hm);
    let heig = oracles::symmetric_eigenvalues(&hm);
    let spectrum = ConditionReport::new(heig[n - 1], heig[0])?;
    let a = normal_vec(rng, n);
    let x0 = normal_vec(rng, n);
    let rhs = linalg::dot(&a, &x0) + rng.random_range(0.0..1.0);
    let delta = rng.random_range(1e-3..1e-1);

    let mut x = x0;
    let mut trajectory = vec![x.clone()];
    for _ in 0..20 {
        // minimise f: the update ascends -grad f
        let grad: Vec<f64> = (&q * nalgebra::DVector::from_column_slice(&x)).as_slice().iter().zip(&c).map(|(u, v)| u + v).collect();
        let g: Vec<f64> = grad.iter().map(|v| -v).collect();
        let b = linalg::dot(&a, &x) - rhs;
        let inp = UpdateInputs::new(x.clone(), g, a.clone(), b, fisher.clone(), delta)?.with_cg(CgConfig::exact(n));
        match pcpo_update(&inp, metric) {
            Ok(res) => x = res.theta_next,
            Err(e) if e.is_degenerate() => break,
            Err(e) => return Err(e.into()),
        }
        trajectory.push(x.clone());
    }
    Ok(Harness {
        q,
        c,
        lipschitz,
        fisher,
        spectrum,
        trajectory,
        delta,
    })
}

fn theorem3() -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("theorem3");
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for (metric, lo, hi) in [(ProjectionMetric::Kl, 0.5, 50.0), (ProjectionMetric::L2, 0.2, 1.0)] {
        let mut premise_steps = 0;
        let mut holds = 0;
        let mut flagged = 0;
        let mut worst = 0.0_f64;
        let mut cond_violations = 0;
        for _ in 0..100 {
            let hs = harness(&mut rng, metric, lo, hi)?;
            let q = hs.q.clone();
            let c = hs.c.clone();
            let f = move |x: &[f64]| {
                let xv = nalgebra::DVector::from_column_slice(x);
                0.5 * xv.dot(&(&q * &xv)) + linalg::dot(&c, x)
            };
            let q2 = hs.q.clone();
            let c2 = hs.c.clone();
            let grad = move |x: &[f64]| -> Vec<f64> {
                (&q2 * nalgebra::DVector::from_column_slice(x))
                    .as_slice()
                    .iter()
                    .zip(&c2)
                    .map(|(u, v)| u + v)
                    .collect()
            };
            let obj = SmoothObjective {
                f: &f,
                grad: &grad,
                lipschitz: hs.lipschitz,
            };
            let steps = theorem3_objective_check(&obj, &hs.fisher, &hs.trajectory, hs.delta, metric, &hs.spectrum)?;
            for s in &steps {
                if s.premise {
                    premise_steps += 1;
                    if s.holds {
                        holds += 1;
                    } else {
                        worst = worst.max(-s.slack);
                        if metric == ProjectionMetric::L2 && s.condition_number < s.condition_threshold {
                            cond_violations += 1;
                        }
                        log::info!(
                            "objective-change inequality fails ({metric}): slack {:.3e}, condition {:.3} vs 2|g|^2/(L^2 delta) {:.3}",
                            s.slack,
                            s.condition_number,
                            s.condition_threshold
                        );
                    }
                } else {
                    flagged += 1;
                }
            }
        }
        rep.check(
            format!("objective-change inequality ({metric})"),
            holds == premise_steps && premise_steps > 0,
            format!(
                "{holds}/{premise_steps} steps meeting the premise hold ({flagged} flagged without premise), worst violation {worst:.3e}{}",
                if metric == ProjectionMetric::L2 {
                    format!(", {cond_violations} failing steps with condition number below the threshold")
                } else {
                    String::new()
                }
            ),
        );
    }

    // closed-form sanity cases
    let f = |x: &[f64]| 0.5 * linalg::dot(x, x);
    let grad = |x: &[f64]| x.to_vec();
    let obj = SmoothObjective {
        f: &f,
        grad: &grad,
        lipschitz: 1.0,
    };
    let spec = ConditionReport::new(1.0, 1.0)?;
    let mut traj = vec![vec![1.0, -2.0]];
    for _ in 0..5 {
        let x = traj.last().expect("non-empty").clone();
        let g: Vec<f64> = x.iter().map(|v| -v).collect();
        let inp = UpdateInputs::new(x, g, vec![1.0, 0.0], -100.0, SpdOperator::identity(2), 0.01)?
            .with_cg(CgConfig::exact(2));
        traj.push(pcpo_update(&inp, ProjectionMetric::Kl)?.theta_next);
    }
    let last = traj.last().expect("non-empty").clone();
    traj.push(last);
    let steps = theorem3_objective_check(&obj, &SpdOperator::identity(2), &traj, 0.01, ProjectionMetric::Kl, &spec)?;
    let stationary = steps.last().expect("six steps");
    let stationary_gap = (stationary.lhs - stationary.rhs).abs();
    rep.check(
        "quadratic and stationary cases",
        steps.iter().all(|s| s.holds) && stationary_gap < 1e-15,
        format!("stationary step |lhs - rhs| = {stationary_gap:.1e}"),
    );
    Ok(rep)
}

// ---------------------------------------------------------------------------
// numerics: gradients, Fisher products, KL expansion

fn numerics() -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("numerics");
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let families = [
        PolicyFamily::TabularSoftmax { n_states: 4, n_actions: 3 },
        PolicyFamily::GaussianMlp {
            layer_sizes: vec![8],
            state_dim: 2,
            action_dim: 2,
        },
    ];
    let random_state = |fam: &PolicyFamily, rng: &mut ChaCha8Rng| match fam {
        PolicyFamily::TabularSoftmax { n_states, .. } => State::Discrete(rng.random_range(0..*n_states)),
        PolicyFamily::GaussianMlp { state_dim, .. } => State::Continuous(normal_vec(rng, *state_dim)),
    };
    for fam in &families {
        let label = match fam {
            PolicyFamily::TabularSoftmax { .. } => "tabular softmax",
            PolicyFamily::GaussianMlp { .. } => "Gaussian MLP",
        };
        let dim = fam.param_count();
        let theta: Vec<f64> = (0..dim).map(|_| 0.5 * normal(&mut rng)).collect();
        let p = PolicyParams::new(fam.clone(), theta.clone())?;

        let mut worst_grad = 0.0_f64;
        for _ in 0..20 {
            let s = random_state(fam, &mut rng);
            let a = p.sample(&s, &mut rng)?;
            let analytic = p.grad_log_prob(&s, &a)?;
            let lp = |t: &[f64]| {
                PolicyParams::new(fam.clone(), t.to_vec())
                    .and_then(|q| q.log_prob(&s, &a))
                    .expect("valid parameters")
            };
            let fd = oracles::fd_gradient(&lp, &theta, 1e-5);
            let err = linalg::sub(&analytic, &fd).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            worst_grad = worst_grad.max(err);
        }
        rep.check(
            format!("grad_log_prob vs central differences ({label})"),
            worst_grad <= 1e-5,
            format!("max abs error {worst_grad:.2e} over 20 samples"),
        );

        let states: Vec<State> = (0..10).map(|_| random_state(fam, &mut rng)).collect();
        let kl = |t: &[f64]| {
            let q = PolicyParams::new(fam.clone(), t.to_vec()).expect("valid parameters");
            mean_kl(&q, &p, &states).expect("matching family")
        };
        let fd_h = oracles::fd_hessian(&kl, &theta, 1e-4);
        let mut worst_fvp = 0.0_f64;
        for _ in 0..5 {
            let v = normal_vec(&mut rng, dim);
            let hv = fisher_vector_product(&p, &states, &v, 0.0)?;
            let fd_hv = (&fd_h * nalgebra::DVector::from_column_slice(&v)).as_slice().to_vec();
            worst_fvp = worst_fvp.max(rel_err(&hv, &fd_hv));
        }
        rep.check(
            format!("fisher_vector_product vs finite-difference KL Hessian ({label})"),
            worst_fvp <= 1e-4,
            format!("max relative error {worst_fvp:.2e}"),
        );

        let mut worst_ratio = 0.0_f64;
        for _ in 0..5 {
            let d = normal_vec(&mut rng, dim);
            let quad = 0.5 * linalg::dot(&d, &fisher_vector_product(&p, &states, &d, 0.0)?);
            for t in [1e-2, 1e-3] {
                let moved = PolicyParams::new(fam.clone(), linalg::add(&theta, &linalg::scaled(t, &d)))?;
                let ratio = mean_kl(&moved, &p, &states)? / (t * t) / quad;
                worst_ratio = worst_ratio.max((ratio - 1.0).abs());
            }
        }
        rep.check(
            format!("mean_kl quadratic expansion ({label})"),
            worst_ratio <= 0.05,
            format!("max |KL(t)/t^2 / (1/2 d^T H d) - 1| = {worst_ratio:.2e} at t in {{1e-2, 1e-3}}"),
        );

        let q = PolicyParams::new(fam.clone(), linalg::add(&theta, &linalg::scaled(0.3, &normal_vec(&mut rng, dim))))?;
        let s = random_state(fam, &mut rng);
        let exact = mean_kl(&q, &p, std::slice::from_ref(&s))?;
        let n_mc = 200_000;
        let mut mc_rng = ChaCha8Rng::seed_from_u64(405);
        let samples: Vec<f64> = (0..n_mc)
            .map(|_| {
                let a: Action = q.sample(&s, &mut mc_rng).expect("shapes match");
                q.log_prob(&s, &a).expect("shapes match") - p.log_prob(&s, &a).expect("shapes match")
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n_mc as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_mc as f64 - 1.0);
        let se = (var / n_mc as f64).sqrt();
        rep.check(
            format!("analytic KL vs Monte Carlo ({label})"),
            (exact - mean).abs() <= 3.0 * se,
            format!("exact {exact:.6}, MC {mean:.6} +- {se:.1e}"),
        );
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// identity: performance difference identity on random tabular CMDPs

fn identity() -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("identity");
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0_f64;
    let mut worst_oracle = 0.0_f64;
    let total = 100;
    let mut ok = 0;
    for i in 0..total {
        let spec = TabularCmdp::random(5, 3, rng.random_range(0.5..0.99), 1000 + i)?;
        let fam = PolicyFamily::TabularSoftmax { n_states: 5, n_actions: 3 };
        let p_old = PolicyParams::new(fam.clone(), normal_vec(&mut rng, 15))?;
        let p_new = PolicyParams::new(fam, normal_vec(&mut rng, 15))?;
        let gap = performance_identity_check(&spec, &p_old, &p_new)?;
        worst = worst.max(gap);

        let pi = |p: &PolicyParams| (0..5).map(|s| p.probs(s)).collect::<Result<Vec<_>, _>>();
        let (pi_old, pi_new) = (pi(&p_old)?, pi(&p_new)?);
        let o_old = oracles::tabular_oracle(&spec.transition, &spec.reward, &spec.cost, &spec.mu, spec.gamma, &pi_old);
        let o_new = oracles::tabular_oracle(&spec.transition, &spec.reward, &spec.cost, &spec.mu, spec.gamma, &pi_new);
        let rhs: f64 = (0..5)
            .map(|s| o_new.d[s] * linalg::dot(&pi_new[s], &o_old.adv_r[s]))
            .sum::<f64>()
            / (1.0 - spec.gamma);
        let oracle_gap = ((o_new.j_r - o_old.j_r) - rhs).abs();
        worst_oracle = worst_oracle.max(oracle_gap);
        if gap <= 1e-8 && oracle_gap <= 1e-8 {
            ok += 1;
        }
    }
    rep.check(
        "performance difference identity",
        ok == total,
        format!("{ok}/{total} pairs; max gap {worst:.2e} (production), {worst_oracle:.2e} (dense oracle)"),
    );
    Ok(rep)
}

// ---------------------------------------------------------------------------
// cg: n-step exactness, spectrum estimates, operator symmetry

fn cg() -> Result<SuiteReport, VerifyError> {
    let mut rep = SuiteReport::new("cg");
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_res = 0.0_f64;
    let mut worst_sol = 0.0_f64;
    let mut all_within = true;
    for n in 1..=32 {
        for _ in 0..3 {
            let (m, op) = random_spd(&mut rng, n, 0.01, 1.0);
            let rhs = normal_vec(&mut rng, n);
            let sol = conjugate_gradient(&op, &rhs, n, 1e-10)?;
            worst_res = worst_res.max(sol.relative_residual);
            all_within &= sol.iterations <= n && sol.relative_residual <= 1e-10;
            let direct = oracles::dense_solve(&m, &rhs).ok_or(VerifyError::Oracle("singular test matrix".into()))?;
            worst_sol = worst_sol.max(rel_err(&sol.x, &direct));
        }
    }
    rep.check(
        "CG residual <= 1e-10 within n iterations (n <= 32)",
        all_within,
        format!("worst relative residual {worst_res:.2e}, worst deviation from dense solve {worst_sol:.2e}"),
    );

    let mut worst_spec = 0.0_f64;
    for n in [2, 5, 10, 10, 10, 16] {
        let (m, op) = random_spd(&mut rng, n, 0.05, 5.0);
        let op = op.with_damping(1e-8)?;
        let est = estimate_spectrum(&op, 5000)?;
        let eig = oracles::symmetric_eigenvalues(&m);
        let (lo, hi) = (eig[0] + 1e-8, eig[n - 1] + 1e-8);
        worst_spec = worst_spec
            .max((est.sigma_max - hi).abs() / hi)
            .max((est.sigma_min - lo).abs() / lo);
    }
    rep.check(
        "spectrum estimates within 1% of dense eigenvalues",
        worst_spec <= 0.01,
        format!("worst relative error {worst_spec:.2e}"),
    );

    // symmetry of the operators built in the crate
    let mut worst_sym = 0.0_f64;
    let tab = PolicyParams::new(
        PolicyFamily::TabularSoftmax { n_states: 4, n_actions: 3 },
        normal_vec(&mut rng, 12),
    )?;
    let mlp_fam = PolicyFamily::GaussianMlp {
        layer_sizes: vec![8],
        state_dim: 2,
        action_dim: 2,
    };
    let mlp = PolicyParams::new(mlp_fam.clone(), normal_vec(&mut rng, mlp_fam.param_count()))?;
    let tab_states: Vec<State> = (0..4).map(State::Discrete).collect();
    let mlp_states: Vec<State> = (0..16).map(|_| State::Continuous(normal_vec(&mut rng, 2))).collect();
    let (dense_m, _) = random_spd(&mut rng, 12, 0.1, 1.0);
    let ops = [
        crate::policy::fisher_operator(&tab, &tab_states, 1e-8)?.operator,
        crate::policy::fisher_operator(&mlp, &mlp_states, 1e-8)?.operator,
        operator_from(&dense_m),
    ];
    for op in &ops {
        for _ in 0..100 {
            let x = normal_vec(&mut rng, op.dim());
            let y = normal_vec(&mut rng, op.dim());
            let gap = (linalg::dot(&x, &op.apply(&y)) - linalg::dot(&op.apply(&x), &y)).abs()
                / (linalg::norm(&x) * linalg::norm(&y));
            worst_sym = worst_sym.max(gap);
        }
    }
    rep.check(
        "operator symmetry on 100 random pairs",
        worst_sym <= 1e-8,
        format!("worst |<x,Ay> - <Ax,y>| / (|x||y|) = {worst_sym:.2e}"),
    );
    Ok(rep)
}
