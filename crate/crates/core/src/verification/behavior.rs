//! Multi-seed training comparison on the chain and PointCircle tasks.
//!
//! Every algorithm of interest is trained from the same seeds; the suite then
//! checks that the projection-based methods end near the cost threshold while
//! the unconstrained baseline does not, and that PCPO with the KL projection
//! accumulates no more constraint violation than CPO.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::suites::{SuiteReport, VerifyOptions};
use super::VerifyError;
use crate::cmdp::{evaluate_exact, CmdpSpec, PointCircleSpec, TabularCmdp};
use crate::estimation::{collect, Channel};
use crate::policy::PolicyParams;
use crate::trainer::{cumulative_violation, train, Algorithm, RunConfig, TrainError};

pub const BEHAVIOR_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const BEHAVIOR_ALGORITHMS: [Algorithm; 4] = [Algorithm::PcpoKl, Algorithm::PcpoL2, Algorithm::Trpo, Algorithm::Cpo];

/// Steps used to estimate the final cost return of a sampled-mode run.
pub const EVAL_STEPS: usize = 500_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorEnv {
    Chain,
    PointCircle,
}

impl BehaviorEnv {
    pub const ALL: [BehaviorEnv; 2] = [Self::Chain, Self::PointCircle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chain => "chain",
            Self::PointCircle => "point_circle",
        }
    }

    pub fn spec(self) -> CmdpSpec {
        match self {
            Self::Chain => CmdpSpec::Tabular(TabularCmdp::default_chain()),
            Self::PointCircle => CmdpSpec::PointCircle(PointCircleSpec::default()),
        }
    }

    /// Final cost returns up to `h + 0.05 (|h| + 1)` count as satisfying the constraint.
    pub fn tolerance_threshold(self) -> f64 {
        let h = self.spec().h();
        h + 0.05 * (h.abs() + 1.0)
    }
}

/// Training configuration used by the comparison.
///
/// The chain runs with exact gradients: its deterministic dynamics make
/// sampled policies collapse onto deterministic ones within a few updates.
/// PointCircle is sampled, with damping large enough that the quadratic KL
/// model of the near-linear initial network stays accurate.
pub fn behavior_config(env: BehaviorEnv, algorithm: Algorithm, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(algorithm, env.spec());
    cfg.seed = seed;
    cfg.delta = 1e-3;
    match env {
        BehaviorEnv::Chain => {
            cfg.oracle = true;
            cfg.iterations = 200;
        }
        BehaviorEnv::PointCircle => {
            cfg.iterations = 300;
            cfg.batch_steps = 10_000;
            cfg.damping = 1e-4;
        }
    }
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRun {
    pub env: BehaviorEnv,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Discounted cost return of the final policy (exact on the chain,
    /// estimated from a fresh batch on PointCircle).
    pub final_jc: f64,
    pub final_jr: f64,
    pub cumulative_violation: f64,
    pub skipped_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSummary {
    pub runs: Vec<BehaviorRun>,
}

impl BehaviorSummary {
    fn select(&self, env: BehaviorEnv, algorithm: Algorithm) -> Vec<&BehaviorRun> {
        let mut v: Vec<_> = self
            .runs
            .iter()
            .filter(|r| r.env == env && r.algorithm == algorithm)
            .collect();
        v.sort_by_key(|r| r.seed);
        v
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), VerifyError> {
        let mut w = csv::Writer::from_path(path).map_err(TrainError::from)?;
        w.write_record(["env", "algorithm", "seed", "final_jc", "final_jr", "cumulative_violation", "skipped"])
            .map_err(TrainError::from)?;
        for r in &self.runs {
            w.write_record([
                r.env.name().to_string(),
                r.algorithm.name().to_string(),
                r.seed.to_string(),
                r.final_jc.to_string(),
                r.final_jr.to_string(),
                r.cumulative_violation.to_string(),
                r.skipped_iterations.to_string(),
            ])
            .map_err(TrainError::from)?;
        }
        w.flush().map_err(TrainError::Io)?;
        Ok(())
    }
}

fn final_returns(cfg: &RunConfig, p: &PolicyParams) -> Result<(f64, f64), VerifyError> {
    if let Some(t) = cfg.spec.as_tabular() {
        let ev = evaluate_exact(t, p)?;
        return Ok((ev.j_c, ev.j_r));
    }
    let batch = collect(&cfg.spec, p, EVAL_STEPS, cfg.seed ^ 0x0e7a_1000).map_err(TrainError::from)?;
    let gamma = cfg.spec.gamma();
    let n = batch.episodes.len() as f64;
    let mean = |ch| batch.episodes.iter().map(|e| e.discounted(ch, gamma)).sum::<f64>() / n;
    Ok((mean(Channel::Cost), mean(Channel::Reward)))
}

pub fn run_behavior(env: BehaviorEnv, algorithm: Algorithm, seed: u64) -> Result<BehaviorRun, VerifyError> {
    let cfg = behavior_config(env, algorithm, seed);
    let out = train(&cfg)?;
    let (final_jc, final_jr) = final_returns(&cfg, &out.final_params)?;
    log::info!(
        "{} {} seed {seed}: final J_C {final_jc:.4}, J_R {final_jr:.4}",
        env.name(),
        algorithm.name()
    );
    Ok(BehaviorRun {
        env,
        algorithm,
        seed,
        final_jc,
        final_jr,
        cumulative_violation: cumulative_violation(&out.records, cfg.spec.h()),
        skipped_iterations: out.records.iter().filter(|r| r.skipped).count(),
    })
}

/// Train every (environment, algorithm, seed) combination, `jobs` at a time.
pub fn behavior_summary(jobs: usize) -> Result<BehaviorSummary, VerifyError> {
    let tasks: Vec<(BehaviorEnv, Algorithm, u64)> = BehaviorEnv::ALL
        .into_iter()
        .flat_map(|e| BEHAVIOR_ALGORITHMS.into_iter().map(move |a| (e, a)))
        .flat_map(|(e, a)| BEHAVIOR_SEEDS.into_iter().map(move |s| (e, a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| VerifyError::Oracle(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(e, a, s)| run_behavior(e, a, s))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(BehaviorSummary { runs })
}

fn fmt_values(runs: &[&BehaviorRun], f: impl Fn(&BehaviorRun) -> f64) -> String {
    runs.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join(", ")
}

pub(crate) fn behavior(opts: &VerifyOptions) -> Result<SuiteReport, VerifyError> {
    let summary = behavior_summary(opts.jobs)?;
    if let Some(dir) = &opts.out_dir {
        summary.write_csv(&dir.join("behavior.csv"))?;
    }
    Ok(behavior_report(&summary))
}

/// Turn a finished comparison into pass/fail checks.
pub fn behavior_report(summary: &BehaviorSummary) -> SuiteReport {
    let mut rep = SuiteReport::new("behavior");
    let needed = BEHAVIOR_SEEDS.len() - 1;
    for env in BehaviorEnv::ALL {
        let h = env.spec().h();
        let thr = env.tolerance_threshold();
        for algo in [Algorithm::PcpoKl, Algorithm::PcpoL2] {
            let runs = summary.select(env, algo);
            let ok = runs.iter().filter(|r| r.final_jc <= thr).count();
            rep.check(
                format!("{} {}: final J_C <= {thr:.3} in >= {needed}/{} seeds", env.name(), algo.name(), runs.len()),
                ok >= needed,
                format!("{ok}/{} seeds; final J_C [{}]", runs.len(), fmt_values(&runs, |r| r.final_jc)),
            );
        }
        let trpo = summary.select(env, Algorithm::Trpo);
        let above = trpo.iter().filter(|r| r.final_jc > h).count();
        rep.check(
            format!("{} trpo: final J_C > h = {h} in >= {needed}/{} seeds", env.name(), trpo.len()),
            above >= needed,
            format!("{above}/{} seeds; final J_C [{}]", trpo.len(), fmt_values(&trpo, |r| r.final_jc)),
        );
        let kl = summary.select(env, Algorithm::PcpoKl);
        let cpo = summary.select(env, Algorithm::Cpo);
        let less = kl
            .iter()
            .zip(&cpo)
            .filter(|(p, c)| p.cumulative_violation <= c.cumulative_violation)
            .count();
        rep.check(
            format!("{} cumulative violation pcpo-kl <= cpo in >= {needed}/{} seeds", env.name(), kl.len()),
            less >= needed && kl.len() == cpo.len(),
            format!(
                "{less}/{} seeds; pcpo-kl [{}], cpo [{}]",
                kl.len(),
                fmt_values(&kl, |r| r.cumulative_violation),
                fmt_values(&cpo, |r| r.cumulative_violation)
            ),
        );
    }
    rep
}
