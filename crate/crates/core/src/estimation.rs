//! On-policy rollouts, GAE advantages and the empirical update inputs
//! `(g, a, b, H)`, plus their exact counterparts on tabular problems.
//!
//! Both gradients estimate the gradient of the discounted return,
//! `(1/N) sum_episodes sum_t gamma^t A_t grad log pi(a_t|s_t)`, so that `b`
//! (a discounted cost return minus the threshold) and `a^T dtheta` are in the
//! same units.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{evaluate_exact, CmdpError, CmdpSpec, TabularCmdp, TabularEvaluation};
use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::policy::{
    fisher_operator, weighted_fisher_operator, Action, FisherEstimate, PolicyError, PolicyParams, State,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("batch contains no steps")]
    EmptyBatch,
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn discounted(&self, channel: Channel, gamma: f64) -> f64 {
        let xs = self.channel(channel);
        let mut total = 0.0;
        let mut w = 1.0;
        for x in xs {
            total += w * x;
            w *= gamma;
        }
        total
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        match channel {
            Channel::Reward => &self.rewards,
            Channel::Cost => &self.costs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Episode>,
    pub total_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Reward,
    Cost,
}

/// Run whole episodes of `p` until at least `batch_steps` steps are stored.
///
/// Episode `i` draws from stream `i` of a ChaCha generator keyed by `seed`,
/// so batches are reproducible and episodes are independent.
pub fn collect(
    spec: &CmdpSpec,
    p: &PolicyParams,
    batch_steps: usize,
    seed: u64,
) -> Result<TrajectoryBatch, EstimationError> {
    if batch_steps == 0 {
        return Err(EstimationError::InvalidConfig("batch_steps must be at least 1".into()));
    }
    let mut episodes = Vec::new();
    let mut total_steps = 0;
    let mut env = spec.make_env();
    while total_steps < batch_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(episodes.len() as u64);
        let mut ep = Episode::default();
        let mut state = env.reset(&mut rng);
        loop {
            let action = p.sample(&state, &mut rng)?;
            let out = env.step(&action, &mut rng)?;
            ep.states.push(std::mem::replace(&mut state, out.next_state));
            ep.actions.push(action);
            ep.rewards.push(out.reward);
            ep.costs.push(out.cost);
            ep.dones.push(out.done);
            if out.done {
                break;
            }
        }
        total_steps += ep.len();
        episodes.push(ep);
    }
    Ok(TrajectoryBatch {
        episodes,
        total_steps,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeConfig {
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub gamma: f64,
}

impl GaeConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.lambda_r) || !unit(self.lambda_c) {
            return Err(EstimationError::InvalidConfig("GAE lambdas must lie in [0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EstimationError::InvalidConfig("GAE gamma must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn lambda(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Reward => self.lambda_r,
            Channel::Cost => self.lambda_c,
        }
    }
}

/// GAE-lambda advantages for one channel. `values(state, t)` is the baseline.
/// Episodes are truncated, not bootstrapped: the value after the last step is 0.
pub fn gae_advantages(
    batch: &TrajectoryBatch,
    values: &dyn Fn(&State, usize) -> f64,
    cfg: &GaeConfig,
    channel: Channel,
) -> Vec<Vec<f64>> {
    let gamma = cfg.gamma;
    let decay = gamma * cfg.lambda(channel);
    batch
        .episodes
        .iter()
        .map(|ep| {
            let xs = ep.channel(channel);
            let n = xs.len();
            let v: Vec<f64> = ep.states.iter().enumerate().map(|(t, s)| values(s, t)).collect();
            let mut adv = vec![0.0; n];
            let mut running = 0.0;
            for t in (0..n).rev() {
                let next_v = if t + 1 < n && !ep.dones[t] { v[t + 1] } else { 0.0 };
                let td = xs[t] + gamma * next_v - v[t];
                running = td + decay * running;
                adv[t] = running;
            }
            adv
        })
        .collect()
}

/// State-value baseline for GAE.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Zero,
    /// Exact values indexed by tabular state.
    Tabular(Vec<f64>),
    /// Ridge-regressed linear function of hand-made features.
    Linear { weights: Vec<f64>, horizon: usize },
}

const RIDGE: f64 = 1e-6;

impl Baseline {
    pub fn value(&self, state: &State, t: usize) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Tabular(v) => match state {
                State::Discrete(s) => v.get(*s).copied().unwrap_or(0.0),
                State::Continuous(_) => 0.0,
            },
            Self::Linear { weights, horizon } => linalg::dot(weights, &features(state, t, *horizon, weights.len())),
        }
    }

    /// Least-squares fit of discounted returns-to-go on polynomial features
    /// of the state and the normalised time step.
    pub fn fit_linear(batch: &TrajectoryBatch, channel: Channel, gamma: f64, horizon: usize) -> Result<Self, EstimationError> {
        let first = batch
            .episodes
            .iter()
            .find_map(|e| e.states.first())
            .ok_or(EstimationError::EmptyBatch)?;
        let k = feature_count(first);
        let mut gram = DenseMatrix::zeros(k, k);
        let mut rhs = vec![0.0; k];
        for ep in &batch.episodes {
            let xs = ep.channel(channel);
            let mut ret = 0.0;
            let mut targets = vec![0.0; xs.len()];
            for t in (0..xs.len()).rev() {
                ret = xs[t] + gamma * ret;
                targets[t] = ret;
            }
            for (t, s) in ep.states.iter().enumerate() {
                let phi = features(s, t, horizon, k);
                for i in 0..k {
                    rhs[i] += phi[i] * targets[t];
                    for j in 0..k {
                        gram[(i, j)] += phi[i] * phi[j];
                    }
                }
            }
        }
        for i in 0..k {
            gram[(i, i)] += RIDGE * (1.0 + gram[(i, i)]);
        }
        let weights = gram.lu_solve(&rhs)?;
        Ok(Self::Linear { weights, horizon })
    }
}

fn feature_count(state: &State) -> usize {
    match state {
        State::Discrete(_) => 4,
        State::Continuous(x) => {
            let d = x.len();
            1 + d + d * (d + 1) / 2 + 3
        }
    }
}

fn features(state: &State, t: usize, horizon: usize, k: usize) -> Vec<f64> {
    let tau = t as f64 / horizon.max(1) as f64;
    let mut phi = Vec::with_capacity(k);
    phi.push(1.0);
    if let State::Continuous(x) = state {
        phi.extend_from_slice(x);
        for i in 0..x.len() {
            for j in i..x.len() {
                phi.push(x[i] * x[j]);
            }
        }
    } else {
        phi.push(0.0);
    }
    phi.extend([tau, tau * tau, tau * tau * tau]);
    phi.resize(k, 0.0);
    phi
}

/// Settings of the empirical estimator beyond the GAE parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub gae: GaeConfig,
    /// Standardise reward advantages per batch (cost advantages never are).
    pub standardize_reward: bool,
    pub damping: f64,
    pub fisher_max_states: usize,
}

impl EstimatorConfig {
    pub fn new(gae: GaeConfig) -> Self {
        Self {
            gae,
            standardize_reward: true,
            damping: 1e-8,
            fisher_max_states: 512,
        }
    }
}

/// Sample-based update inputs.
#[derive(Clone, Debug)]
pub struct EmpiricalInputs {
    pub g: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    pub fisher: FisherEstimate,
    pub jc_hat: f64,
    pub jr_hat: f64,
    pub jc_undiscounted: f64,
    /// Standard errors of the two discounted return estimates.
    pub jc_se: f64,
    pub jr_se: f64,
    /// States the Fisher operator averages over.
    pub fisher_states: Vec<State>,
    /// Cost advantages, aligned with the batch episodes.
    pub adv_c: Vec<Vec<f64>>,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Build `(g, a, b, H)` from one on-policy batch.
pub fn build_update_inputs(
    batch: &TrajectoryBatch,
    p: &PolicyParams,
    cfg: &EstimatorConfig,
    spec: &CmdpSpec,
    baseline_r: &Baseline,
    baseline_c: &Baseline,
) -> Result<EmpiricalInputs, EstimationError> {
    cfg.gae.validate()?;
    if batch.total_steps == 0 || batch.episodes.iter().all(Episode::is_empty) {
        return Err(EstimationError::EmptyBatch);
    }
    let gamma = spec.gamma();
    let mut adv_r = gae_advantages(batch, &|s, t| baseline_r.value(s, t), &cfg.gae, Channel::Reward);
    let adv_c = gae_advantages(batch, &|s, t| baseline_c.value(s, t), &cfg.gae, Channel::Cost);
    if cfg.standardize_reward {
        standardize(&mut adv_r);
    }

    let n_ep = batch.episodes.len() as f64;
    let mut g = vec![0.0; p.dim()];
    let mut a = vec![0.0; p.dim()];
    for (ep_idx, ep) in batch.episodes.iter().enumerate() {
        let mut disc = 1.0 / n_ep;
        for t in 0..ep.len() {
            p.accumulate_grad_log_prob(&ep.states[t], &ep.actions[t], disc * adv_r[ep_idx][t], &mut g)?;
            p.accumulate_grad_log_prob(&ep.states[t], &ep.actions[t], disc * adv_c[ep_idx][t], &mut a)?;
            disc *= gamma;
        }
    }

    let returns_c: Vec<f64> = batch.episodes.iter().map(|e| e.discounted(Channel::Cost, gamma)).collect();
    let returns_r: Vec<f64> = batch.episodes.iter().map(|e| e.discounted(Channel::Reward, gamma)).collect();
    let (jc_hat, jc_se) = mean_and_se(&returns_c);
    let (jr_hat, jr_se) = mean_and_se(&returns_r);
    let jc_undiscounted = batch.episodes.iter().map(|e| e.costs.iter().sum::<f64>()).sum::<f64>() / n_ep;

    let fisher_states = subsample_states(batch, cfg.fisher_max_states);
    let fisher = fisher_operator(p, &fisher_states, cfg.damping)?;
    Ok(EmpiricalInputs {
        g,
        a,
        b: jc_hat - spec.h(),
        fisher,
        jc_hat,
        jr_hat,
        jc_undiscounted,
        jc_se,
        jr_se,
        fisher_states,
        adv_c,
    })
}

fn standardize(adv: &mut [Vec<f64>]) {
    let all: Vec<f64> = adv.iter().flatten().copied().collect();
    if all.len() < 2 {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if !(std > 1e-12) {
        adv.iter_mut().flatten().for_each(|x| *x -= mean);
        return;
    }
    adv.iter_mut().flatten().for_each(|x| *x = (*x - mean) / std);
}

/// Uniform subsample without replacement of at most `max_states` visited
/// states, in batch order, keyed by the batch seed.
pub fn subsample_states(batch: &TrajectoryBatch, max_states: usize) -> Vec<State> {
    let all: Vec<&State> = batch.episodes.iter().flat_map(|e| e.states.iter()).collect();
    if all.len() <= max_states.max(1) {
        return all.into_iter().cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(batch.seed ^ 0xf15e_0001);
    let mut idx = sample(&mut rng, all.len(), max_states.max(1)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i].clone()).collect()
}

/// Importance-sampled estimate of `J_C(p_new) - h` around the batch policy.
pub fn surrogate_cost(
    batch: &TrajectoryBatch,
    adv_c: &[Vec<f64>],
    p_old: &PolicyParams,
    p_new: &PolicyParams,
    gamma: f64,
    b: f64,
) -> Result<f64, EstimationError> {
    let n_ep = batch.episodes.len() as f64;
    let mut total = 0.0;
    for (ep, adv) in batch.episodes.iter().zip(adv_c) {
        let mut disc = 1.0;
        for t in 0..ep.len() {
            let ratio = (p_new.log_prob(&ep.states[t], &ep.actions[t])?
                - p_old.log_prob(&ep.states[t], &ep.actions[t])?)
                .exp();
            total += disc * (ratio - 1.0) * adv[t];
            disc *= gamma;
        }
    }
    Ok(b + total / n_ep)
}

/// Exact update inputs for a tabular softmax policy.
#[derive(Clone, Debug)]
pub struct ExactInputs {
    pub g: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    /// Fisher averaged over the discounted state distribution.
    pub fisher: FisherEstimate,
    pub eval: TabularEvaluation,
    pub states: Vec<State>,
    pub weights: Vec<f64>,
}

/// Exact policy gradient of one channel:
/// `dJ/dz[s,b] = 1/(1-gamma) d(s) pi(b|s) (A(s,b) - sum_a pi(a|s) A(s,a))`.
pub fn exact_gradient(eval: &TabularEvaluation, gamma: f64, channel: Channel) -> Vec<f64> {
    let adv = match channel {
        Channel::Reward => &eval.adv_r,
        Channel::Cost => &eval.adv_c,
    };
    let mut grad = Vec::new();
    for (s, (pi, a_s)) in eval.pi.iter().zip(adv).enumerate() {
        let mean = linalg::dot(pi, a_s);
        for b in 0..pi.len() {
            grad.push(eval.d_pi[s] * pi[b] * (a_s[b] - mean) / (1.0 - gamma));
        }
    }
    grad
}

pub fn exact_update_inputs(spec: &TabularCmdp, p: &PolicyParams, damping: f64) -> Result<ExactInputs, EstimationError> {
    let eval = evaluate_exact(spec, p)?;
    let g = exact_gradient(&eval, spec.gamma, Channel::Reward);
    let a = exact_gradient(&eval, spec.gamma, Channel::Cost);
    let states: Vec<State> = (0..spec.n_states).map(State::Discrete).collect();
    let weights = eval.d_pi.clone();
    let fisher = weighted_fisher_operator(p, &states, weights.clone(), damping)?;
    Ok(ExactInputs {
        g,
        a,
        b: eval.j_c - spec.h,
        fisher,
        eval,
        states,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::PointCircleSpec;
    use crate::policy::PolicyFamily;
    use approx::assert_relative_eq;

    fn chain() -> CmdpSpec {
        CmdpSpec::Tabular(TabularCmdp::default_chain())
    }

    fn uniform(spec: &CmdpSpec) -> PolicyParams {
        let fam = spec.policy_family(&[8]);
        let n = fam.param_count();
        PolicyParams::new(fam, vec![0.0; n]).unwrap()
    }

    fn gae(l: f64) -> GaeConfig {
        GaeConfig {
            lambda_r: l,
            lambda_c: l,
            gamma: 0.9,
        }
    }

    fn hand_batch() -> TrajectoryBatch {
        TrajectoryBatch {
            episodes: vec![Episode {
                states: vec![State::Discrete(0), State::Discrete(1), State::Discrete(2)],
                actions: vec![Action::Discrete(0); 3],
                rewards: vec![1.0, -2.0, 3.0],
                costs: vec![0.0, 0.0, 1.0],
                dones: vec![false, false, true],
            }],
            total_steps: 3,
            seed: 0,
        }
    }

    #[test]
    fn gae_zero_everything() {
        let mut batch = hand_batch();
        batch.episodes[0].rewards = vec![0.0; 3];
        let adv = gae_advantages(&batch, &|_, _| 0.0, &gae(0.95), Channel::Reward);
        assert_eq!(adv, vec![vec![0.0; 3]]);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let batch = hand_batch();
        let v = [0.5, 1.5, -0.5];
        let values = |s: &State, _t: usize| match s {
            State::Discrete(i) => v[*i],
            _ => 0.0,
        };
        let adv = gae_advantages(&batch, &values, &gae(0.0), Channel::Reward);
        assert_eq!(adv[0][0], 1.0 + 0.9 * 1.5 - 0.5);
        assert_eq!(adv[0][1], -2.0 + 0.9 * -0.5 - 1.5);
        assert_eq!(adv[0][2], 3.0 - -0.5);
    }

    #[test]
    fn gae_lambda_one_is_return_minus_value() {
        let batch = hand_batch();
        let v = [0.5, 1.5, -0.5];
        let values = |s: &State, _t: usize| match s {
            State::Discrete(i) => v[*i],
            _ => 0.0,
        };
        let adv = gae_advantages(&batch, &values, &gae(1.0), Channel::Reward);
        let r = [1.0, -2.0, 3.0];
        for t in 0..3 {
            let ret: f64 = (t..3).map(|k| 0.9_f64.powi((k - t) as i32) * r[k]).sum();
            assert_relative_eq!(adv[0][t], ret - v[t], epsilon = 1e-12);
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let spec = chain();
        let p = PolicyParams::init(spec.policy_family(&[]), 3).unwrap();
        let a = collect(&spec, &p, 500, 42).unwrap();
        let b = collect(&spec, &p, 500, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.total_steps >= 500);
        assert_eq!(a.total_steps, a.episodes.iter().map(Episode::len).sum::<usize>());
        let c = collect(&spec, &p, 500, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_step_budget_runs_one_episode() {
        let spec = chain();
        let batch = collect(&spec, &uniform(&spec), 1, 0).unwrap();
        assert_eq!(batch.episodes.len(), 1);
        assert_eq!(batch.total_steps, spec.horizon());
    }

    #[test]
    fn empirical_inputs_are_deterministic_and_shaped() {
        let spec = CmdpSpec::PointCircle(PointCircleSpec::default());
        let p = PolicyParams::init(spec.policy_family(&[8]), 1).unwrap();
        let batch = collect(&spec, &p, 400, 9).unwrap();
        let cfg = EstimatorConfig::new(GaeConfig {
            lambda_r: 0.95,
            lambda_c: 1.0,
            gamma: 0.995,
        });
        let br = Baseline::fit_linear(&batch, Channel::Reward, 0.995, 50).unwrap();
        let bc = Baseline::fit_linear(&batch, Channel::Cost, 0.995, 50).unwrap();
        let e1 = build_update_inputs(&batch, &p, &cfg, &spec, &br, &bc).unwrap();
        let e2 = build_update_inputs(&batch, &p, &cfg, &spec, &br, &bc).unwrap();
        assert_eq!(e1.g, e2.g);
        assert_eq!(e1.a, e2.a);
        assert_eq!(e1.g.len(), p.dim());
        assert_relative_eq!(e1.b, e1.jc_hat - 5.0);
        assert!(e1.jc_undiscounted >= e1.jc_hat);
    }

    #[test]
    fn zero_cost_gives_zero_cost_gradient() {
        let mut t = TabularCmdp::default_chain();
        t.cost = vec![vec![0.0; 2]; t.n_states];
        let spec = CmdpSpec::Tabular(t.clone());
        let p = PolicyParams::init(spec.policy_family(&[]), 0).unwrap();
        let batch = collect(&spec, &p, 600, 1).unwrap();
        let ev = evaluate_exact(&t, &p).unwrap();
        let cfg = EstimatorConfig::new(gae(0.95));
        let inputs = build_update_inputs(
            &batch,
            &p,
            &cfg,
            &spec,
            &Baseline::Tabular(ev.v_r),
            &Baseline::Tabular(ev.v_c),
        )
        .unwrap();
        assert!(inputs.a.iter().all(|x| *x == 0.0));
        assert_eq!(inputs.b, -t.h);
    }

    #[test]
    fn subsample_respects_budget() {
        let spec = chain();
        let batch = collect(&spec, &uniform(&spec), 2000, 5).unwrap();
        let s = subsample_states(&batch, 512);
        assert_eq!(s.len(), 512);
        assert_eq!(s, subsample_states(&batch, 512));
    }

    #[test]
    fn surrogate_cost_is_b_at_old_policy() {
        let spec = chain();
        let p = uniform(&spec);
        let batch = collect(&spec, &p, 300, 5).unwrap();
        let adv: Vec<Vec<f64>> = batch.episodes.iter().map(|e| vec![1.0; e.len()]).collect();
        assert_eq!(surrogate_cost(&batch, &adv, &p, &p, 0.93, 0.25).unwrap(), 0.25);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let t = TabularCmdp::random(4, 3, 0.9, 8).unwrap();
        let fam = PolicyFamily::TabularSoftmax { n_states: 4, n_actions: 3 };
        let p = PolicyParams::init(fam, 3).unwrap();
        let ex = exact_update_inputs(&t, &p, 1e-8).unwrap();
        for i in 0..p.dim() {
            let mut hi = p.theta().to_vec();
            let mut lo = p.theta().to_vec();
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let jh = evaluate_exact(&t, &p.with_theta(hi).unwrap()).unwrap();
            let jl = evaluate_exact(&t, &p.with_theta(lo).unwrap()).unwrap();
            assert!(((jh.j_r - jl.j_r) / 2e-6 - ex.g[i]).abs() < 1e-6);
            assert!(((jh.j_c - jl.j_c) / 2e-6 - ex.a[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_baseline_fits_constant_returns() {
        let mut batch = hand_batch();
        batch.episodes[0].states = vec![State::Continuous(vec![0.1, 0.2]); 3];
        batch.episodes[0].rewards = vec![0.0, 0.0, 0.0];
        let b = Baseline::fit_linear(&batch, Channel::Reward, 0.9, 3).unwrap();
        assert!(b.value(&State::Continuous(vec![0.1, 0.2]), 1).abs() < 1e-9);
    }
}
