//! The outer training loop: collect (or evaluate exactly), build the update
//! inputs, apply one optimizer update, record diagnostics.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{bound_report, AnalysisError, BoundReport};
use crate::baselines::{cpo_update, fpo_update, pdo_update, trpo_update, DualState, LineSearchConfig};
use crate::cmdp::{evaluate_exact, expected_undiscounted_cost, CmdpError, CmdpSpec};
use crate::estimation::{
    build_update_inputs, collect, exact_update_inputs, surrogate_cost, Baseline, Channel, EstimationError,
    EstimatorConfig, GaeConfig,
};
use crate::linalg::CgConfig;
use crate::policy::{mean_kl, weighted_kl, PolicyError, PolicyParams, State};
use crate::subproblem::{pcpo_update, ProjectionMetric, UpdateError, UpdateInputs};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("on-policy contract violated at iteration {iter}: batch from {collected}, update from {updated}")]
    OffPolicy {
        iter: usize,
        collected: String,
        updated: String,
    },
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "pcpo-kl")]
    PcpoKl,
    #[serde(rename = "pcpo-l2")]
    PcpoL2,
    #[serde(rename = "cpo")]
    Cpo,
    #[serde(rename = "pdo")]
    Pdo,
    #[serde(rename = "fpo")]
    Fpo,
    #[serde(rename = "trpo")]
    Trpo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Self::PcpoKl,
        Self::PcpoL2,
        Self::Cpo,
        Self::Pdo,
        Self::Fpo,
        Self::Trpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PcpoKl => "pcpo-kl",
            Self::PcpoL2 => "pcpo-l2",
            Self::Cpo => "cpo",
            Self::Pdo => "pdo",
            Self::Fpo => "fpo",
            Self::Trpo => "trpo",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown algorithm '{s}'")))
    }
}

fn default_delta() -> f64 {
    1e-4
}
fn default_batch_steps() -> usize {
    2000
}
fn default_iterations() -> usize {
    150
}
fn default_cg_iters() -> usize {
    10
}
fn default_damping() -> f64 {
    1e-8
}
fn default_hidden() -> Vec<usize> {
    vec![8]
}
fn default_fisher_states() -> usize {
    512
}
fn default_true() -> bool {
    true
}

/// Complete description of one training run. Serialized field names are the
/// JSON config schema; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub spec: CmdpSpec,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_batch_steps")]
    pub batch_steps: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cg_iters")]
    pub cg_iters: usize,
    /// GAE parameters; when absent, `lambda_r = lambda_c = 0.95` and the
    /// environment's discount.
    #[serde(default)]
    pub gae: Option<GaeConfig>,
    /// Initial multiplier and learning rate; required for PDO.
    #[serde(default)]
    pub dual: Option<DualState>,
    /// Constant multiplier; required for FPO.
    #[serde(default)]
    pub fpo_lambda: Option<f64>,
    #[serde(default)]
    pub line_search: LineSearchConfig,
    /// Use exact gradients, Fisher and returns instead of samples (tabular only).
    #[serde(default)]
    pub oracle: bool,
    /// Attach a bound report to every record (oracle mode only).
    #[serde(default)]
    pub bounds: bool,
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Hidden layer widths of the Gaussian MLP policy.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_fisher_states")]
    pub fisher_max_states: usize,
    /// Standardise reward advantages per batch.
    #[serde(default = "default_true")]
    pub standardize_reward: bool,
}

impl RunConfig {
    /// A configuration with every optional field at its default.
    pub fn new(algorithm: Algorithm, spec: CmdpSpec) -> Self {
        Self {
            algorithm,
            spec,
            delta: default_delta(),
            batch_steps: default_batch_steps(),
            iterations: default_iterations(),
            seed: 0,
            cg_iters: default_cg_iters(),
            gae: None,
            dual: None,
            fpo_lambda: None,
            line_search: LineSearchConfig::default(),
            oracle: false,
            bounds: false,
            damping: default_damping(),
            hidden: default_hidden(),
            fisher_max_states: default_fisher_states(),
            standardize_reward: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gae_config(&self) -> GaeConfig {
        self.gae.unwrap_or(GaeConfig {
            lambda_r: 0.95,
            lambda_c: 0.95,
            gamma: self.spec.gamma(),
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        self.spec.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_steps == 0 {
            return bad("batch_steps must be at least 1");
        }
        if self.cg_iters == 0 {
            return bad("cg_iters must be at least 1");
        }
        if !(self.damping >= 0.0) {
            return bad("damping must be non-negative");
        }
        if self.fisher_max_states == 0 {
            return bad("fisher_max_states must be at least 1");
        }
        self.gae_config().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.line_search.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.oracle && self.spec.as_tabular().is_none() {
            return bad("oracle mode requires a tabular environment");
        }
        if self.bounds && !self.oracle {
            return bad("bound reports require oracle mode");
        }
        match self.algorithm {
            Algorithm::Pdo => match &self.dual {
                Some(d) => d.validate().map_err(|e| TrainError::Config(e.to_string()))?,
                None => return bad("pdo requires a 'dual' entry with lambda and beta"),
            },
            Algorithm::Fpo => match self.fpo_lambda {
                Some(l) if l >= 0.0 && l.is_finite() => {}
                Some(_) => return bad("fpo_lambda must be non-negative"),
                None => return bad("fpo requires 'fpo_lambda'"),
            },
            _ => {}
        }
        self.spec
            .policy_family(&self.hidden)
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub jr_hat: f64,
    pub jc_hat: f64,
    pub jc_undiscounted: f64,
    pub bound_report: Option<BoundReport>,
    pub kl_to_prev: f64,
    pub projection_active: bool,
    pub wall_ms: u64,
    /// The update was skipped because of a degenerate quadratic form.
    pub skipped: bool,
    /// Checksum of the parameters that generated the batch.
    pub theta_hash: String,
    /// Exact returns of the collecting policy (tabular environments only).
    pub jr_exact: Option<f64>,
    pub jc_exact: Option<f64>,
    /// Dual variable after the update (PDO) or the fixed multiplier (FPO).
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub records: Vec<IterationRecord>,
    pub final_params: PolicyParams,
    pub initial_checksum: String,
}

/// Seed of the batch collected at iteration `iter` of a run seeded with `seed`.
pub fn iteration_seed(seed: u64, iter: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ (iter as u64).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Inputs of one update plus what is needed to evaluate candidate policies.
struct Prepared {
    inputs: UpdateInputs,
    jr: f64,
    jc: f64,
    jc_undiscounted: f64,
    kl_states: Vec<State>,
    kl_weights: Option<Vec<f64>>,
    cost_model: CostModel,
}

enum CostModel {
    Exact,
    Surrogate {
        batch: crate::estimation::TrajectoryBatch,
        adv_c: Vec<Vec<f64>>,
    },
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutput, TrainError> {
    train_with_observer(cfg, false, &mut |_| Ok(()))
}

/// Run training, handing each record to `observer` as soon as it is complete.
/// `wall_clock` controls whether `wall_ms` is measured or left at 0.
pub fn train_with_observer(
    cfg: &RunConfig,
    wall_clock: bool,
    observer: &mut dyn FnMut(&IterationRecord) -> Result<(), TrainError>,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let family = cfg.spec.policy_family(&cfg.hidden);
    let mut p = PolicyParams::init(family, cfg.seed)?;
    let initial_checksum = p.checksum();
    let mut dual = cfg.dual;
    let mut records = Vec::with_capacity(cfg.iterations);
    let cg = CgConfig {
        max_iters: cfg.cg_iters,
        tol: CgConfig::default().tol,
    };
    log::info!(
        "training {} for {} iterations (seed {}, delta {:e}, oracle {})",
        cfg.algorithm,
        cfg.iterations,
        cfg.seed,
        cfg.delta,
        cfg.oracle
    );

    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let theta_hash = p.checksum();
        let prep = prepare(cfg, &p, iter, cg)?;
        let updated = crate::policy::theta_checksum(&prep.inputs.theta);
        if updated != theta_hash {
            return Err(TrainError::OffPolicy {
                iter,
                collected: theta_hash,
                updated,
            });
        }

        let kl = |q: &PolicyParams| -> Result<f64, PolicyError> {
            match &prep.kl_weights {
                Some(w) => weighted_kl(q, &p, &prep.kl_states, w),
                None => mean_kl(q, &p, &prep.kl_states),
            }
        };

        let step = apply_update(cfg, &prep, &p, &mut dual, &kl);
        let (theta_next, projection_active, skipped) = match step {
            Ok(s) => s,
            Err(TrainError::Update(e)) if e.is_degenerate() => {
                log::warn!("iteration {iter}: {e}; update skipped");
                (p.theta().to_vec(), false, true)
            }
            Err(e) => return Err(e),
        };
        let p_next = p.with_theta(theta_next)?;
        let kl_to_prev = kl(&p_next)?;

        let (jr_exact, jc_exact) = match cfg.spec.as_tabular() {
            Some(t) if !cfg.oracle => {
                let ev = evaluate_exact(t, &p)?;
                (Some(ev.j_r), Some(ev.j_c))
            }
            Some(_) => (Some(prep.jr), Some(prep.jc)),
            None => (None, None),
        };
        let bound = if cfg.bounds {
            let t = cfg.spec.as_tabular().expect("validated: bounds need a tabular spec");
            Some(bound_report(t, &p, &p_next, cfg.delta, &prep.inputs.a, &prep.inputs.fisher)?)
        } else {
            None
        };
        let lambda = match cfg.algorithm {
            Algorithm::Pdo => dual.map(|d| d.lambda),
            Algorithm::Fpo => cfg.fpo_lambda,
            _ => None,
        };
        let record = IterationRecord {
            iter,
            jr_hat: prep.jr,
            jc_hat: prep.jc,
            jc_undiscounted: prep.jc_undiscounted,
            bound_report: bound,
            kl_to_prev,
            projection_active,
            wall_ms: if wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
            skipped,
            theta_hash,
            jr_exact,
            jc_exact,
            lambda,
        };
        log::debug!(
            "iter {iter}: jr {:.4} jc {:.4} kl {:.3e} active {} skipped {}",
            record.jr_hat,
            record.jc_hat,
            record.kl_to_prev,
            record.projection_active,
            record.skipped
        );
        observer(&record)?;
        records.push(record);
        p = p_next;
    }
    Ok(TrainOutput {
        records,
        final_params: p,
        initial_checksum,
    })
}

fn prepare(cfg: &RunConfig, p: &PolicyParams, iter: usize, cg: CgConfig) -> Result<Prepared, TrainError> {
    if cfg.oracle {
        let t = cfg.spec.as_tabular().expect("validated: oracle mode needs a tabular spec");
        let ex = exact_update_inputs(t, p, cfg.damping)?;
        let inputs = UpdateInputs::new(p.theta().to_vec(), ex.g, ex.a, ex.b, ex.fisher.operator, cfg.delta)?.with_cg(cg);
        return Ok(Prepared {
            inputs,
            jr: ex.eval.j_r,
            jc: ex.eval.j_c,
            jc_undiscounted: expected_undiscounted_cost(t, p, t.horizon)?,
            kl_states: ex.states,
            kl_weights: Some(ex.weights),
            cost_model: CostModel::Exact,
        });
    }

    let gae = cfg.gae_config();
    let batch = collect(&cfg.spec, p, cfg.batch_steps, iteration_seed(cfg.seed, iter))?;
    let (br, bc) = match cfg.spec.as_tabular() {
        Some(t) => {
            let ev = evaluate_exact(t, p)?;
            (Baseline::Tabular(ev.v_r), Baseline::Tabular(ev.v_c))
        }
        None => {
            let h = cfg.spec.horizon();
            (
                Baseline::fit_linear(&batch, Channel::Reward, gae.gamma, h)?,
                Baseline::fit_linear(&batch, Channel::Cost, gae.gamma, h)?,
            )
        }
    };
    let est = EstimatorConfig {
        gae,
        standardize_reward: cfg.standardize_reward,
        damping: cfg.damping,
        fisher_max_states: cfg.fisher_max_states,
    };
    let emp = build_update_inputs(&batch, p, &est, &cfg.spec, &br, &bc)?;
    let inputs = UpdateInputs::new(p.theta().to_vec(), emp.g, emp.a, emp.b, emp.fisher.operator, cfg.delta)?.with_cg(cg);
    Ok(Prepared {
        inputs,
        jr: emp.jr_hat,
        jc: emp.jc_hat,
        jc_undiscounted: emp.jc_undiscounted,
        kl_states: emp.fisher_states,
        kl_weights: None,
        cost_model: CostModel::Surrogate {
            batch,
            adv_c: emp.adv_c,
        },
    })
}

/// Returns `(theta_next, projection_active, skipped)`.
fn apply_update(
    cfg: &RunConfig,
    prep: &Prepared,
    p: &PolicyParams,
    dual: &mut Option<DualState>,
    kl: &dyn Fn(&PolicyParams) -> Result<f64, PolicyError>,
) -> Result<(Vec<f64>, bool, bool), TrainError> {
    let inp = &prep.inputs;
    match cfg.algorithm {
        Algorithm::PcpoKl | Algorithm::PcpoL2 => {
            let metric = if cfg.algorithm == Algorithm::PcpoKl {
                ProjectionMetric::Kl
            } else {
                ProjectionMetric::L2
            };
            let res = pcpo_update(inp, metric)?;
            Ok((res.theta_next, res.projection_active, false))
        }
        Algorithm::Trpo => Ok((trpo_update(inp)?, false, false)),
        Algorithm::Fpo => {
            let lambda = cfg.fpo_lambda.expect("validated: fpo needs a multiplier");
            Ok((fpo_update(inp, lambda)?, false, false))
        }
        Algorithm::Pdo => {
            let d = dual.expect("validated: pdo needs a dual state");
            let (theta, next) = pdo_update(inp, d, prep.jc, cfg.spec.h())?;
            *dual = Some(next);
            Ok((theta, false, false))
        }
        Algorithm::Cpo => {
            let kl_eval = |theta: &[f64]| {
                p.with_theta(theta.to_vec())
                    .and_then(|q| kl(&q))
                    .unwrap_or(f64::INFINITY)
            };
            let cost_eval = |theta: &[f64]| -> f64 {
                let Ok(q) = p.with_theta(theta.to_vec()) else {
                    return f64::INFINITY;
                };
                let value = match &prep.cost_model {
                    CostModel::Exact => {
                        let t = cfg.spec.as_tabular().expect("exact cost model implies a tabular spec");
                        evaluate_exact(t, &q).map(|e| e.j_c - t.h).map_err(TrainError::from)
                    }
                    CostModel::Surrogate { batch, adv_c } => {
                        surrogate_cost(batch, adv_c, p, &q, cfg.spec.gamma(), inp.b).map_err(TrainError::from)
                    }
                };
                value.unwrap_or(f64::INFINITY)
            };
            let step = cpo_update(inp, &cfg.line_search, &kl_eval, &cost_eval)?;
            let active = step.case != crate::baselines::CpoCase::Inactive;
            Ok((step.theta_next, active, step.line_search_failed))
        }
    }
}

/// Version tag written as the first line of every CSV artifact.
pub const CSV_SCHEMA_LINE: &str = "# schema=1";

pub const RUN_CSV_HEADER: [&str; 12] = [
    "iter",
    "jr",
    "jc",
    "jc_undisc",
    "kl",
    "proj_active",
    "wall_ms",
    "skipped",
    "theta_hash",
    "jr_exact",
    "jc_exact",
    "lambda",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Streams `run.csv`, flushing every ten rows.
pub struct RunCsvWriter {
    inner: csv::Writer<BufWriter<File>>,
    rows: usize,
}

impl RunCsvWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "{CSV_SCHEMA_LINE}")?;
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
        inner.write_record(RUN_CSV_HEADER)?;
        Ok(Self { inner, rows: 0 })
    }

    pub fn write(&mut self, r: &IterationRecord) -> Result<(), TrainError> {
        self.inner.write_record([
            r.iter.to_string(),
            r.jr_hat.to_string(),
            r.jc_hat.to_string(),
            r.jc_undiscounted.to_string(),
            r.kl_to_prev.to_string(),
            u8::from(r.projection_active).to_string(),
            r.wall_ms.to_string(),
            u8::from(r.skipped).to_string(),
            r.theta_hash.clone(),
            opt(r.jr_exact),
            opt(r.jc_exact),
            opt(r.lambda),
        ])?;
        self.rows += 1;
        if self.rows.is_multiple_of(10) {
            self.inner.flush()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), TrainError> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_run_csv(path: &Path, records: &[IterationRecord]) -> Result<(), TrainError> {
    let mut w = RunCsvWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub seed: u64,
    pub iterations: usize,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub final_jc: f64,
    pub final_jr: f64,
    pub skipped_iterations: usize,
    pub cumulative_violation: f64,
}

impl RunSummary {
    pub fn new(cfg: &RunConfig, out: &TrainOutput) -> Self {
        let last = out.records.last();
        Self {
            config: cfg.clone(),
            seed: cfg.seed,
            iterations: out.records.len(),
            initial_checksum: out.initial_checksum.clone(),
            final_checksum: out.final_params.checksum(),
            final_jc: last.map_or(f64::NAN, |r| r.jc_hat),
            final_jr: last.map_or(f64::NAN, |r| r.jr_hat),
            skipped_iterations: out.records.iter().filter(|r| r.skipped).count(),
            cumulative_violation: cumulative_violation(&out.records, cfg.spec.h()),
        }
    }
}

/// `sum_k max(0, J_C(pi_k) - h)`, using exact returns when recorded.
pub fn cumulative_violation(records: &[IterationRecord], h: f64) -> f64 {
    records
        .iter()
        .map(|r| (r.jc_exact.unwrap_or(r.jc_hat) - h).max(0.0))
        .sum()
}

pub fn write_run_json(path: &Path, summary: &RunSummary) -> Result<(), TrainError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::TabularCmdp;

    fn chain_cfg(algo: Algorithm) -> RunConfig {
        let mut cfg = RunConfig::new(algo, CmdpSpec::Tabular(TabularCmdp::default_chain()));
        cfg.iterations = 3;
        cfg.batch_steps = 300;
        cfg.seed = 4;
        cfg
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_values() {
        let text = r#"{"algorithm":"trpo","spec":{"kind":"point_circle"},"detla":0.1}"#;
        assert!(matches!(RunConfig::from_json(text), Err(TrainError::Config(_))));
        let text = r#"{"algorithm":"pdo","spec":{"kind":"point_circle"}}"#;
        assert!(matches!(RunConfig::from_json(text), Err(TrainError::Config(_))));
        let text = r#"{"algorithm":"trpo","spec":{"kind":"point_circle"},"oracle":true}"#;
        assert!(matches!(RunConfig::from_json(text), Err(TrainError::Config(_))));
        let text = r#"{"algorithm":"trpo","spec":{"kind":"point_circle"}}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.delta, 1e-4);
        assert_eq!(cfg.cg_iters, 10);
    }

    #[test]
    fn every_algorithm_produces_well_formed_records() {
        for algo in Algorithm::ALL {
            let mut cfg = chain_cfg(algo);
            cfg.dual = Some(DualState { lambda: 0.0, beta: 0.1 });
            cfg.fpo_lambda = Some(0.5);
            let out = train(&cfg).unwrap();
            assert_eq!(out.records.len(), 3, "{algo}");
            for (k, r) in out.records.iter().enumerate() {
                assert_eq!(r.iter, k);
                assert!(r.jr_hat.is_finite() && r.jc_hat.is_finite() && r.kl_to_prev.is_finite());
            }
            assert_eq!(out.records[0].theta_hash, out.initial_checksum);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = chain_cfg(Algorithm::PcpoKl);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn degenerate_updates_are_skipped_bitwise() {
        let mut t = TabularCmdp::default_chain();
        t.reward = vec![vec![0.0; 2]; t.n_states];
        t.cost = vec![vec![0.0; 2]; t.n_states];
        let mut cfg = RunConfig::new(Algorithm::PcpoKl, CmdpSpec::Tabular(t));
        cfg.iterations = 1;
        cfg.oracle = true;
        let out = train(&cfg).unwrap();
        assert!(out.records[0].skipped);
        assert_eq!(out.final_params.checksum(), out.initial_checksum);
    }

    #[test]
    fn oracle_kl_stays_near_delta_when_feasible() {
        let mut t = TabularCmdp::default_chain();
        t.h = 50.0;
        let mut cfg = RunConfig::new(Algorithm::PcpoKl, CmdpSpec::Tabular(t));
        cfg.iterations = 20;
        cfg.oracle = true;
        for r in train(&cfg).unwrap().records {
            assert!(r.kl_to_prev <= 1.1 * cfg.delta, "kl {}", r.kl_to_prev);
        }
    }

    #[test]
    fn csv_has_schema_line_and_one_row_per_record() {
        let cfg = chain_cfg(Algorithm::Trpo);
        let out = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        write_run_csv(&path, &out.records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_SCHEMA_LINE);
        assert_eq!(lines[1], RUN_CSV_HEADER.join(","));
        assert_eq!(lines.len(), 2 + cfg.iterations);
    }
}
