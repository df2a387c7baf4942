//! Constrained MDPs: a fully tabular family with exact policy evaluation and
//! a continuous point-mass environment that must circle the origin while
//! staying inside a vertical safety band.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, LinalgError, LuFactors};
use crate::policy::{Action, PolicyError, PolicyFamily, PolicyParams, State};

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmdpError {
    #[error("invalid CMDP specification: {0}")]
    InvalidSpec(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("operation requires a tabular CMDP")]
    NotTabular,
    #[error("episode already finished")]
    EpisodeFinished,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("internal linear solve failed: {0}")]
    Linalg(#[from] LinalgError),
}

/// A finite CMDP. `transition[s][a][s']` is `T(s' | s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularCmdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub gamma: f64,
    pub mu: Vec<f64>,
    pub h: f64,
    pub horizon: usize,
}

/// Continuous 2-D point mass steered by a velocity command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointCircleSpec {
    pub dt: f64,
    pub horizon: usize,
    pub r_circle: f64,
    pub x_lim: f64,
    pub u_max: f64,
    pub gamma: f64,
    pub h: f64,
    /// Episodes start at this distance from the origin...
    pub start_radius: f64,
    /// ...at an angle drawn uniformly from this interval (radians).
    pub start_angle: [f64; 2],
}

impl Default for PointCircleSpec {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon: 50,
            r_circle: 1.0,
            x_lim: 0.8,
            u_max: 0.5,
            gamma: 0.995,
            h: 5.0,
            start_radius: 1.0,
            start_angle: [0.0, 2.0 * PI],
        }
    }
}

/// Any supported environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CmdpSpec {
    Tabular(TabularCmdp),
    PointCircle(PointCircleSpec),
}

impl CmdpSpec {
    pub fn validate(&self) -> Result<(), CmdpError> {
        match self {
            Self::Tabular(t) => t.validate(),
            Self::PointCircle(p) => p.validate(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Self::Tabular(t) => t.gamma,
            Self::PointCircle(p) => p.gamma,
        }
    }

    pub fn h(&self) -> f64 {
        match self {
            Self::Tabular(t) => t.h,
            Self::PointCircle(p) => p.h,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::Tabular(t) => t.horizon,
            Self::PointCircle(p) => p.horizon,
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularCmdp> {
        match self {
            Self::Tabular(t) => Some(t),
            Self::PointCircle(_) => None,
        }
    }

    /// Policy family matching the environment's state and action spaces.
    pub fn policy_family(&self, hidden: &[usize]) -> PolicyFamily {
        match self {
            Self::Tabular(t) => PolicyFamily::TabularSoftmax {
                n_states: t.n_states,
                n_actions: t.n_actions,
            },
            Self::PointCircle(_) => PolicyFamily::GaussianMlp {
                layer_sizes: hidden.to_vec(),
                state_dim: 2,
                action_dim: 2,
            },
        }
    }

    pub fn make_env(&self) -> Environment {
        match self {
            Self::Tabular(t) => Environment::Tabular(TabularEnv {
                spec: t.clone(),
                state: 0,
                t: 0,
            }),
            Self::PointCircle(p) => Environment::PointCircle(PointCircleEnv {
                spec: p.clone(),
                pos: [0.0, 0.0],
                t: 0,
            }),
        }
    }
}

impl TabularCmdp {
    pub fn validate(&self) -> Result<(), CmdpError> {
        let bad = |m: String| Err(CmdpError::InvalidSpec(m));
        if self.n_states == 0 || self.n_actions == 0 {
            return bad("state and action counts must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !self.h.is_finite() {
            return bad("threshold h must be finite".into());
        }
        if self.transition.len() != self.n_states
            || self.reward.len() != self.n_states
            || self.cost.len() != self.n_states
            || self.mu.len() != self.n_states
        {
            return bad("table sizes do not match n_states".into());
        }
        for s in 0..self.n_states {
            if self.transition[s].len() != self.n_actions
                || self.reward[s].len() != self.n_actions
                || self.cost[s].len() != self.n_actions
            {
                return bad(format!("state {s}: tables do not match n_actions"));
            }
            for a in 0..self.n_actions {
                let row = &self.transition[s][a];
                if row.len() != self.n_states || row.iter().any(|p| !(*p >= 0.0)) {
                    return bad(format!("T(.|{s},{a}) is not a distribution over {} states", self.n_states));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return bad(format!("T(.|{s},{a}) sums to {total}"));
                }
                if !self.reward[s][a].is_finite() || !self.cost[s][a].is_finite() {
                    return bad(format!("non-finite reward or cost at ({s},{a})"));
                }
            }
        }
        let mu_total: f64 = self.mu.iter().sum();
        if self.mu.iter().any(|p| !(*p >= 0.0)) || (mu_total - 1.0).abs() > ROW_SUM_TOL {
            return bad(format!("mu is not a distribution (sums to {mu_total})"));
        }
        Ok(())
    }

    /// Deterministic chain: action 0 moves left, action 1 moves right (both
    /// saturate at the ends). Moving right earns reward 1; occupying one of
    /// the last two states costs 1. Episodes start in state 0.
    pub fn chain(n_states: usize, gamma: f64, h: f64, horizon: usize) -> Result<Self, CmdpError> {
        if n_states < 3 {
            return Err(CmdpError::InvalidSpec("a chain needs at least 3 states".into()));
        }
        let mut transition = vec![vec![vec![0.0; n_states]; 2]; n_states];
        let mut reward = vec![vec![0.0; 2]; n_states];
        let mut cost = vec![vec![0.0; 2]; n_states];
        for s in 0..n_states {
            transition[s][0][s.saturating_sub(1)] = 1.0;
            transition[s][1][(s + 1).min(n_states - 1)] = 1.0;
            reward[s][1] = 1.0;
            if s + 2 >= n_states {
                cost[s] = vec![1.0, 1.0];
            }
        }
        let mut mu = vec![0.0; n_states];
        mu[0] = 1.0;
        let spec = Self {
            n_states,
            n_actions: 2,
            transition,
            reward,
            cost,
            gamma,
            mu,
            h,
            horizon,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default desk-scale chain: 8 states, `gamma = 0.93`, `h = 0.5`.
    pub fn default_chain() -> Self {
        Self::chain(8, 0.93, 0.5, 150).expect("default chain is valid")
    }

    /// Random CMDP with dense transition rows, rewards and costs in [0, 1).
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<Self, CmdpError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normalised = |n: usize| {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            // Push the rounding error onto the largest entry so rows sum to 1.
            let excess: f64 = row.iter().sum::<f64>() - 1.0;
            let imax = (0..n).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
            row[imax] -= excess;
            row
        };
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| normalised(n_states)).collect())
            .collect();
        let mu = normalised(n_states);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut table = || -> Vec<Vec<f64>> {
            (0..n_states)
                .map(|_| (0..n_actions).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect()
        };
        let reward = table();
        let cost = table();
        let spec = Self {
            n_states,
            n_actions,
            transition,
            reward,
            cost,
            gamma,
            mu,
            h: 0.5 / (1.0 - gamma),
            horizon: 200,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn check_policy(&self, p: &PolicyParams) -> Result<(), CmdpError> {
        match p.family() {
            PolicyFamily::TabularSoftmax { n_states, n_actions }
                if *n_states == self.n_states && *n_actions == self.n_actions =>
            {
                Ok(())
            }
            other => Err(CmdpError::InvalidSpec(format!(
                "policy family {other:?} does not match a {}x{} tabular CMDP",
                self.n_states, self.n_actions
            ))),
        }
    }

    fn policy_table(&self, p: &PolicyParams) -> Result<Vec<Vec<f64>>, CmdpError> {
        self.check_policy(p)?;
        (0..self.n_states).map(|s| Ok(p.probs(s)?)).collect()
    }

    /// State-to-state kernel under a policy table.
    fn kernel(&self, pi: &[Vec<f64>]) -> DenseMatrix {
        let n = self.n_states;
        let mut m = DenseMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = pi[s][a];
                for s2 in 0..n {
                    m[(s, s2)] += w * self.transition[s][a][s2];
                }
            }
        }
        m
    }
}

impl PointCircleSpec {
    pub fn validate(&self) -> Result<(), CmdpError> {
        let positive = [
            ("dt", self.dt),
            ("r_circle", self.r_circle),
            ("x_lim", self.x_lim),
            ("u_max", self.u_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CmdpError::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CmdpError::InvalidSpec(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(CmdpError::InvalidSpec("horizon must be positive".into()));
        }
        if !(self.start_radius >= 0.0) || !(self.start_angle[0] <= self.start_angle[1]) || !self.h.is_finite() {
            return Err(CmdpError::InvalidSpec("invalid start region or threshold".into()));
        }
        Ok(())
    }

    /// Velocity command scaled down to norm at most `u_max`.
    pub fn clip_action(&self, u: &[f64]) -> [f64; 2] {
        let n = (u[0] * u[0] + u[1] * u[1]).sqrt();
        let s = if n > self.u_max { self.u_max / n } else { 1.0 };
        [u[0] * s, u[1] * s]
    }

    /// Tangential velocity around the origin, discounted by the distance
    /// from the target circle.
    pub fn reward(&self, pos: [f64; 2], u: [f64; 2]) -> f64 {
        let r = (pos[0] * pos[0] + pos[1] * pos[1]).sqrt();
        (-pos[1] * u[0] + pos[0] * u[1]) / (1.0 + (r - self.r_circle).abs())
    }

    /// 1 outside the band `|x| <= x_lim`, else 0.
    pub fn cost(&self, pos: [f64; 2]) -> f64 {
        if pos[0].abs() > self.x_lim {
            1.0
        } else {
            0.0
        }
    }
}

/// One transition of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct TabularEnv {
    spec: TabularCmdp,
    state: usize,
    t: usize,
}

#[derive(Clone, Debug)]
pub struct PointCircleEnv {
    spec: PointCircleSpec,
    pos: [f64; 2],
    t: usize,
}

/// A running episode of either environment family.
#[derive(Clone, Debug)]
pub enum Environment {
    Tabular(TabularEnv),
    PointCircle(PointCircleEnv),
}

impl Environment {
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> State {
        match self {
            Self::Tabular(env) => {
                env.t = 0;
                env.state = sample_index(&env.spec.mu, rng);
                State::Discrete(env.state)
            }
            Self::PointCircle(env) => {
                env.t = 0;
                let [lo, hi] = env.spec.start_angle;
                let angle = if hi > lo { rng.random_range(lo..hi) } else { lo };
                env.pos = [env.spec.start_radius * angle.cos(), env.spec.start_radius * angle.sin()];
                State::Continuous(env.pos.to_vec())
            }
        }
    }

    pub fn state(&self) -> State {
        match self {
            Self::Tabular(env) => State::Discrete(env.state),
            Self::PointCircle(env) => State::Continuous(env.pos.to_vec()),
        }
    }

    /// Put a tabular environment in a given state (for tests and analysis).
    pub fn set_tabular_state(&mut self, s: usize) -> Result<(), CmdpError> {
        match self {
            Self::Tabular(env) if s < env.spec.n_states => {
                env.state = s;
                env.t = 0;
                Ok(())
            }
            Self::Tabular(_) => Err(CmdpError::InvalidSpec(format!("state {s} out of range"))),
            Self::PointCircle(_) => Err(CmdpError::NotTabular),
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: &Action, rng: &mut R) -> Result<StepOutcome, CmdpError> {
        match self {
            Self::Tabular(env) => {
                let a = match action {
                    Action::Discrete(a) if *a < env.spec.n_actions => *a,
                    _ => return Err(CmdpError::InvalidAction(format!("{action:?}"))),
                };
                if env.t >= env.spec.horizon {
                    return Err(CmdpError::EpisodeFinished);
                }
                let s = env.state;
                let reward = env.spec.reward[s][a];
                let cost = env.spec.cost[s][a];
                env.state = sample_index(&env.spec.transition[s][a], rng);
                env.t += 1;
                Ok(StepOutcome {
                    next_state: State::Discrete(env.state),
                    reward,
                    cost,
                    done: env.t >= env.spec.horizon,
                })
            }
            Self::PointCircle(env) => {
                let u = match action {
                    Action::Continuous(u) if u.len() == 2 && u.iter().all(|v| v.is_finite()) => {
                        env.spec.clip_action(u)
                    }
                    _ => return Err(CmdpError::InvalidAction(format!("{action:?}"))),
                };
                if env.t >= env.spec.horizon {
                    return Err(CmdpError::EpisodeFinished);
                }
                let reward = env.spec.reward(env.pos, u);
                let cost = env.spec.cost(env.pos);
                env.pos = [env.pos[0] + env.spec.dt * u[0], env.pos[1] + env.spec.dt * u[1]];
                env.t += 1;
                Ok(StepOutcome {
                    next_state: State::Continuous(env.pos.to_vec()),
                    reward,
                    cost,
                    done: env.t >= env.spec.horizon,
                })
            }
        }
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass uncovered: take the last reachable index.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Exact values, advantages and discounted state distribution of a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEvaluation {
    pub v_r: Vec<f64>,
    pub v_c: Vec<f64>,
    pub q_r: Vec<Vec<f64>>,
    pub q_c: Vec<Vec<f64>>,
    pub adv_r: Vec<Vec<f64>>,
    pub adv_c: Vec<Vec<f64>>,
    pub d_pi: Vec<f64>,
    pub j_r: f64,
    pub j_c: f64,
    /// Action probabilities `pi(a|s)` the evaluation was computed for.
    pub pi: Vec<Vec<f64>>,
}

/// Solve the Bellman equations of `p` on `spec` exactly.
pub fn evaluate_exact(spec: &TabularCmdp, p: &PolicyParams) -> Result<TabularEvaluation, CmdpError> {
    let pi = spec.policy_table(p)?;
    let n = spec.n_states;
    let g = spec.gamma;
    let kernel = spec.kernel(&pi);
    let mut m = DenseMatrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] -= g * kernel[(i, j)];
        }
    }
    let lu = LuFactors::new(&m)?;
    let expected = |table: &[Vec<f64>]| -> Vec<f64> {
        (0..n).map(|s| crate::linalg::dot(&pi[s], &table[s])).collect()
    };
    let v_r = lu.solve(&expected(&spec.reward));
    let v_c = lu.solve(&expected(&spec.cost));
    let q_of = |table: &[Vec<f64>], v: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|s| {
                (0..spec.n_actions)
                    .map(|a| table[s][a] + g * crate::linalg::dot(&spec.transition[s][a], v))
                    .collect()
            })
            .collect()
    };
    let q_r = q_of(&spec.reward, &v_r);
    let q_c = q_of(&spec.cost, &v_c);
    let adv = |q: &[Vec<f64>], v: &[f64]| -> Vec<Vec<f64>> {
        q.iter().zip(v).map(|(row, vs)| row.iter().map(|x| x - vs).collect()).collect()
    };
    let adv_r = adv(&q_r, &v_r);
    let adv_c = adv(&q_c, &v_c);

    let lu_t = LuFactors::new(&m.transpose())?;
    let d_pi: Vec<f64> = lu_t.solve(&spec.mu).iter().map(|x| (1.0 - g) * x).collect();
    let j_r = crate::linalg::dot(&spec.mu, &v_r);
    let j_c = crate::linalg::dot(&spec.mu, &v_c);
    Ok(TabularEvaluation {
        v_r,
        v_c,
        q_r,
        q_c,
        adv_r,
        adv_c,
        d_pi,
        j_r,
        j_c,
        pi,
    })
}

/// `|J_R(new) - J_R(old) - 1/(1-gamma) E_{s~d_new, a~new}[A_old(s,a)]|`.
pub fn performance_identity_check(
    spec: &TabularCmdp,
    p_old: &PolicyParams,
    p_new: &PolicyParams,
) -> Result<f64, CmdpError> {
    let old = evaluate_exact(spec, p_old)?;
    let new = evaluate_exact(spec, p_new)?;
    let lhs = new.j_r - old.j_r;
    let mut expectation = 0.0;
    for s in 0..spec.n_states {
        expectation += new.d_pi[s] * crate::linalg::dot(&new.pi[s], &old.adv_r[s]);
    }
    let rhs = expectation / (1.0 - spec.gamma);
    Ok((lhs - rhs).abs())
}

/// Expected undiscounted cost over the first `horizon` steps.
pub fn expected_undiscounted_cost(spec: &TabularCmdp, p: &PolicyParams, horizon: usize) -> Result<f64, CmdpError> {
    let pi = spec.policy_table(p)?;
    let kernel = spec.kernel(&pi);
    let c_pi: Vec<f64> = (0..spec.n_states).map(|s| crate::linalg::dot(&pi[s], &spec.cost[s])).collect();
    let mut rho = spec.mu.clone();
    let mut total = 0.0;
    for _ in 0..horizon {
        total += crate::linalg::dot(&rho, &c_pi);
        rho = kernel.transpose().matvec(&rho)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_policy(spec: &TabularCmdp, seed: u64, scale: f64) -> PolicyParams {
        let fam = PolicyFamily::TabularSoftmax {
            n_states: spec.n_states,
            n_actions: spec.n_actions,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..fam.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
        PolicyParams::new(fam, theta).unwrap()
    }

    fn single_state(reward: f64) -> TabularCmdp {
        TabularCmdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![vec![vec![1.0]]],
            reward: vec![vec![reward]],
            cost: vec![vec![0.0]],
            gamma: 0.9,
            mu: vec![1.0],
            h: 0.0,
            horizon: 10,
        }
    }

    #[test]
    fn geometric_series() {
        let spec = single_state(1.0);
        let p = PolicyParams::new(PolicyFamily::TabularSoftmax { n_states: 1, n_actions: 1 }, vec![0.0]).unwrap();
        let ev = evaluate_exact(&spec, &p).unwrap();
        assert_relative_eq!(ev.j_r, 10.0, max_relative = 1e-12);
        assert_eq!(ev.j_c, 0.0);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mut spec = TabularCmdp::random(4, 3, 0.9, 1).unwrap();
        spec.reward = vec![vec![0.0; 3]; 4];
        let ev = evaluate_exact(&spec, &random_policy(&spec, 2, 1.0)).unwrap();
        assert!(ev.v_r.iter().all(|v| *v == 0.0));
        assert!(ev.adv_r.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn evaluation_invariants() {
        let spec = TabularCmdp::random(5, 3, 0.95, 3).unwrap();
        let p = random_policy(&spec, 4, 2.0);
        let ev = evaluate_exact(&spec, &p).unwrap();
        assert!((ev.d_pi.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        for s in 0..5 {
            let mean_adv = crate::linalg::dot(&ev.pi[s], &ev.adv_r[s]);
            assert!(mean_adv.abs() <= 1e-10);
        }
        let kernel = spec.kernel(&ev.pi);
        let back = kernel.transpose().matvec(&ev.d_pi).unwrap();
        for s in 0..5 {
            let rhs = (1.0 - spec.gamma) * spec.mu[s] + spec.gamma * back[s];
            assert!((ev.d_pi[s] - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn identity_holds_for_equal_and_random_pairs() {
        let spec = TabularCmdp::random(5, 3, 0.9, 5).unwrap();
        let p = random_policy(&spec, 6, 1.0);
        assert!(performance_identity_check(&spec, &p, &p).unwrap() <= 1e-12);
        let q = random_policy(&spec, 7, 1.0);
        assert!(performance_identity_check(&spec, &p, &q).unwrap() <= 1e-8);
    }

    #[test]
    fn two_state_closed_form() {
        // State 0 -> 1 -> 1 forever, reward 1 only in state 0.
        let spec = TabularCmdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            reward: vec![vec![1.0], vec![0.0]],
            cost: vec![vec![0.0], vec![1.0]],
            gamma: 0.5,
            mu: vec![1.0, 0.0],
            h: 0.0,
            horizon: 5,
        };
        let p = PolicyParams::new(PolicyFamily::TabularSoftmax { n_states: 2, n_actions: 1 }, vec![0.0, 0.0]).unwrap();
        let ev = evaluate_exact(&spec, &p).unwrap();
        assert_relative_eq!(ev.j_r, 1.0, max_relative = 1e-14);
        assert_relative_eq!(ev.j_c, 1.0, max_relative = 1e-14);
        assert_relative_eq!(ev.d_pi[0], 0.5, max_relative = 1e-14);
        assert!(performance_identity_check(&spec, &p, &p).unwrap() <= 1e-14);
        assert_relative_eq!(expected_undiscounted_cost(&spec, &p, 5).unwrap(), 4.0, max_relative = 1e-14);
    }

    #[test]
    fn chain_moves_right() {
        let spec = TabularCmdp::default_chain();
        let mut env = CmdpSpec::Tabular(spec).make_env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        env.set_tabular_state(3).unwrap();
        let out = env.step(&Action::Discrete(1), &mut rng).unwrap();
        assert_eq!(out.next_state, State::Discrete(4));
        assert_eq!(out.reward, 1.0);
        assert!(env.step(&Action::Discrete(2), &mut rng).is_err());
    }

    #[test]
    fn chain_uniform_policy_violates_threshold() {
        let spec = TabularCmdp::default_chain();
        let p = PolicyParams::new(spec_family(&spec), vec![0.0; 16]).unwrap();
        let ev = evaluate_exact(&spec, &p).unwrap();
        assert!(ev.j_c > spec.h + 0.3, "J_C = {}", ev.j_c);
    }

    fn spec_family(spec: &TabularCmdp) -> PolicyFamily {
        CmdpSpec::Tabular(spec.clone()).policy_family(&[])
    }

    #[test]
    fn point_circle_dynamics() {
        let spec = PointCircleSpec::default();
        let mut env = CmdpSpec::PointCircle(spec.clone()).make_env();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        env.reset(&mut rng);
        if let Environment::PointCircle(e) = &mut env {
            e.pos = [0.9, 0.0];
        }
        let out = env.step(&Action::Continuous(vec![0.0, 3.0]), &mut rng).unwrap();
        // Command clipped to 0.5 along +y.
        assert_eq!(out.next_state, State::Continuous(vec![0.9, 0.025]));
        assert_relative_eq!(out.reward, 0.9 * 0.5 / 1.1, max_relative = 1e-14);
        assert_eq!(out.cost, 1.0);
        assert!(!out.done);
        for _ in 0..49 {
            let o = env.step(&Action::Continuous(vec![0.0, 0.0]), &mut rng).unwrap();
            if o.done {
                break;
            }
        }
        assert!(matches!(
            env.step(&Action::Continuous(vec![0.0, 0.0]), &mut rng),
            Err(CmdpError::EpisodeFinished)
        ));
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let spec = CmdpSpec::Tabular(TabularCmdp::default_chain());
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"tabular\""));
        let back: CmdpSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let pc: CmdpSpec = serde_json::from_str(r#"{"kind":"point_circle","x_lim":0.7}"#).unwrap();
        match &pc {
            CmdpSpec::PointCircle(p) => assert_eq!(p.x_lim, 0.7),
            _ => panic!(),
        }
        assert!(serde_json::from_str::<CmdpSpec>(r#"{"kind":"point_circle","xlim":0.7}"#).is_err());

        let mut broken = TabularCmdp::default_chain();
        broken.transition[0][0][0] = 0.5;
        assert!(broken.validate().is_err());
        broken = TabularCmdp::default_chain();
        broken.gamma = 1.0;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn cost_is_monotone_in_band_width() {
        let spec = PointCircleSpec::default();
        let positions: Vec<[f64; 2]> = (0..200).map(|i| [((i as f64) * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let s = PointCircleSpec {
                x_lim: 0.5 + 0.03 * k as f64,
                ..spec.clone()
            };
            let total: f64 = positions.iter().map(|p| s.cost(*p)).sum();
            assert!(total <= last);
            last = total;
        }
    }
}
