//! Differentiable stochastic policies: a tabular softmax and a small Gaussian
//! MLP with tanh hidden layers and a state-independent log standard deviation.
//!
//! Gradients are hand-written reverse mode; Fisher-vector products combine a
//! forward-mode Jacobian-vector product with a backward pass, using the
//! closed-form Fisher of the output distribution in between.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{LinalgError, SpdOperator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("parameter vector has length {found}, family needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value while processing state {state_index}")]
    NonFinite { state_index: usize },
    #[error("policies belong to different families")]
    FamilyMismatch,
    #[error("invalid policy family: {0}")]
    InvalidFamily(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// An environment observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum State {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// An action taken by a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyFamily {
    TabularSoftmax {
        n_states: usize,
        n_actions: usize,
    },
    /// `layer_sizes` lists the hidden widths.
    GaussianMlp {
        layer_sizes: Vec<usize>,
        state_dim: usize,
        action_dim: usize,
    },
}

impl PolicyFamily {
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            Self::TabularSoftmax { n_states, n_actions } => {
                if *n_states == 0 || *n_actions == 0 {
                    return Err(PolicyError::InvalidFamily("tabular sizes must be positive".into()));
                }
            }
            Self::GaussianMlp {
                layer_sizes,
                state_dim,
                action_dim,
            } => {
                if *state_dim == 0 || *action_dim == 0 || layer_sizes.contains(&0) {
                    return Err(PolicyError::InvalidFamily("MLP widths must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::TabularSoftmax { n_states, n_actions } => n_states * n_actions,
            Self::GaussianMlp { action_dim, .. } => {
                let widths = self.mlp_widths();
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + action_dim
            }
        }
    }

    /// Input, hidden and output widths of the mean network.
    fn mlp_widths(&self) -> Vec<usize> {
        match self {
            Self::GaussianMlp {
                layer_sizes,
                state_dim,
                action_dim,
            } => {
                let mut w = vec![*state_dim];
                w.extend(layer_sizes);
                w.push(*action_dim);
                w
            }
            Self::TabularSoftmax { .. } => Vec::new(),
        }
    }
}

/// Parameters of a policy together with its family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    theta: Vec<f64>,
    family: PolicyFamily,
}

/// Action distribution at one state.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Categorical { probs: Vec<f64>, log_probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl PolicyParams {
    pub fn new(family: PolicyFamily, theta: Vec<f64>) -> Result<Self, PolicyError> {
        family.validate()?;
        let expected = family.param_count();
        if theta.len() != expected {
            return Err(PolicyError::ParamCount {
                expected,
                found: theta.len(),
            });
        }
        if !crate::linalg::all_finite(&theta) {
            return Err(PolicyError::NonFinite { state_index: 0 });
        }
        Ok(Self { theta, family })
    }

    /// Uniform(-0.1, 0.1) initialisation from a seeded generator.
    pub fn init(family: PolicyFamily, seed: u64) -> Result<Self, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..family.param_count())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Self::new(family, theta)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn family(&self) -> &PolicyFamily {
        &self.family
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, PolicyError> {
        Self::new(self.family.clone(), theta)
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn checksum(&self) -> String {
        theta_checksum(&self.theta)
    }

    pub fn distribution(&self, state: &State) -> Result<ActionDistribution, PolicyError> {
        match &self.family {
            PolicyFamily::TabularSoftmax { .. } => {
                let s = self.discrete_state(state)?;
                let log_probs = log_softmax(self.logits(s));
                let probs = log_probs.iter().map(|l| l.exp()).collect();
                Ok(ActionDistribution::Categorical { probs, log_probs })
            }
            PolicyFamily::GaussianMlp { .. } => {
                let x = self.continuous_state(state)?;
                let acts = self.mlp_forward(x);
                Ok(ActionDistribution::Gaussian {
                    mean: acts.last().cloned().unwrap_or_default(),
                    log_std: self.log_std().to_vec(),
                })
            }
        }
    }

    /// Action probabilities of a tabular policy at state `s`.
    pub fn probs(&self, s: usize) -> Result<Vec<f64>, PolicyError> {
        match self.distribution(&State::Discrete(s))? {
            ActionDistribution::Categorical { probs, .. } => Ok(probs),
            ActionDistribution::Gaussian { .. } => Err(PolicyError::FamilyMismatch),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &State, rng: &mut R) -> Result<Action, PolicyError> {
        match self.distribution(state)? {
            ActionDistribution::Categorical { probs, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Ok(Action::Discrete(i));
                    }
                }
                Ok(Action::Discrete(probs.len() - 1))
            }
            ActionDistribution::Gaussian { mean, log_std } => Ok(Action::Continuous(
                mean.iter()
                    .zip(&log_std)
                    .map(|(m, ls)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + ls.exp() * z
                    })
                    .collect(),
            )),
        }
    }

    pub fn log_prob(&self, state: &State, action: &Action) -> Result<f64, PolicyError> {
        match self.distribution(state)? {
            ActionDistribution::Categorical { log_probs, .. } => {
                let a = discrete_action(action, log_probs.len())?;
                Ok(log_probs[a])
            }
            ActionDistribution::Gaussian { mean, log_std } => {
                let u = continuous_action(action, mean.len())?;
                Ok(gaussian_log_density(u, &mean, &log_std))
            }
        }
    }

    /// Score function `d/dtheta log pi(action | state)`.
    pub fn grad_log_prob(&self, state: &State, action: &Action) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; self.dim()];
        self.accumulate_grad_log_prob(state, action, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `out += weight * d/dtheta log pi(action | state)`.
    pub fn accumulate_grad_log_prob(
        &self,
        state: &State,
        action: &Action,
        weight: f64,
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        if out.len() != self.dim() {
            return Err(PolicyError::Shape(format!(
                "gradient buffer has length {}, expected {}",
                out.len(),
                self.dim()
            )));
        }
        match &self.family {
            PolicyFamily::TabularSoftmax { n_actions, .. } => {
                let s = self.discrete_state(state)?;
                let a = discrete_action(action, *n_actions)?;
                let probs = self.probs(s)?;
                let block = &mut out[s * n_actions..(s + 1) * n_actions];
                for (j, p) in probs.iter().enumerate() {
                    let indicator = if j == a { 1.0 } else { 0.0 };
                    block[j] += weight * (indicator - p);
                }
            }
            PolicyFamily::GaussianMlp { action_dim, .. } => {
                let x = self.continuous_state(state)?;
                let u = continuous_action(action, *action_dim)?;
                let acts = self.mlp_forward(x);
                let mean = acts.last().expect("network has an output layer");
                let log_std = self.log_std();
                let mut d_mean = vec![0.0; *action_dim];
                let ls_offset = self.dim() - action_dim;
                for i in 0..*action_dim {
                    let var = (2.0 * log_std[i]).exp();
                    let diff = u[i] - mean[i];
                    d_mean[i] = weight * diff / var;
                    out[ls_offset + i] += weight * (diff * diff / var - 1.0);
                }
                self.mlp_backward(&acts, &d_mean, out);
            }
        }
        Ok(())
    }

    fn discrete_state(&self, state: &State) -> Result<usize, PolicyError> {
        match (state, &self.family) {
            (State::Discrete(s), PolicyFamily::TabularSoftmax { n_states, .. }) if s < n_states => Ok(*s),
            _ => Err(PolicyError::Shape(format!("state {state:?} does not fit {:?}", self.family))),
        }
    }

    fn continuous_state<'a>(&self, state: &'a State) -> Result<&'a [f64], PolicyError> {
        match (state, &self.family) {
            (State::Continuous(x), PolicyFamily::GaussianMlp { state_dim, .. }) if x.len() == *state_dim => {
                Ok(x)
            }
            _ => Err(PolicyError::Shape(format!("state {state:?} does not fit {:?}", self.family))),
        }
    }

    fn logits(&self, s: usize) -> &[f64] {
        match &self.family {
            PolicyFamily::TabularSoftmax { n_actions, .. } => &self.theta[s * n_actions..(s + 1) * n_actions],
            PolicyFamily::GaussianMlp { .. } => &[],
        }
    }

    fn log_std(&self) -> &[f64] {
        match &self.family {
            PolicyFamily::GaussianMlp { action_dim, .. } => &self.theta[self.dim() - action_dim..],
            PolicyFamily::TabularSoftmax { .. } => &[],
        }
    }

    /// Offsets of `(W, b)` for each layer of the mean network.
    fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let widths = self.family.mlp_widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let entry = (offset, offset + fan_in * fan_out, fan_in, fan_out);
                offset += fan_in * fan_out + fan_out;
                entry
            })
            .collect()
    }

    /// Activations of every layer; the last entry is the mean.
    fn mlp_forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layer_offsets();
        let n_layers = layers.len();
        let mut acts = vec![x.to_vec()];
        for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
            let input = &acts[l];
            let out: Vec<f64> = (0..fan_out)
                .map(|i| {
                    let row = &self.theta[w_off + i * fan_in..w_off + (i + 1) * fan_in];
                    let z = crate::linalg::dot(row, input) + self.theta[b_off + i];
                    if l + 1 < n_layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// `out += J_mean^T d_mean` for the network parameters.
    fn mlp_backward(&self, acts: &[Vec<f64>], d_mean: &[f64], out: &mut [f64]) {
        let layers = self.layer_offsets();
        let mut delta = d_mean.to_vec();
        for l in (0..layers.len()).rev() {
            let (w_off, b_off, fan_in, fan_out) = layers[l];
            let input = &acts[l];
            for i in 0..fan_out {
                out[b_off + i] += delta[i];
                if delta[i] != 0.0 {
                    for j in 0..fan_in {
                        out[w_off + i * fan_in + j] += delta[i] * input[j];
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; fan_in];
            for i in 0..fan_out {
                for j in 0..fan_in {
                    prev[j] += self.theta[w_off + i * fan_in + j] * delta[i];
                }
            }
            // Layer l input is the tanh output of layer l-1.
            for (p, h) in prev.iter_mut().zip(input) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
    }

    /// Forward-mode `J_mean v` for the network parameters.
    fn mlp_jvp(&self, acts: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        let layers = self.layer_offsets();
        let n_layers = layers.len();
        let mut d_in = vec![0.0; acts[0].len()];
        for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
            let input = &acts[l];
            let mut dz = vec![0.0; fan_out];
            for i in 0..fan_out {
                let mut acc = v[b_off + i];
                for j in 0..fan_in {
                    acc += self.theta[w_off + i * fan_in + j] * d_in[j] + v[w_off + i * fan_in + j] * input[j];
                }
                dz[i] = acc;
            }
            if l + 1 < n_layers {
                for (d, h) in dz.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - h * h;
                }
            }
            d_in = dz;
        }
        d_in
    }
}

/// SHA-256 of the little-endian bytes of a parameter vector, hex encoded.
pub fn theta_checksum(theta: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in theta {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn gaussian_log_density(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

fn discrete_action(action: &Action, n_actions: usize) -> Result<usize, PolicyError> {
    match action {
        Action::Discrete(a) if *a < n_actions => Ok(*a),
        _ => Err(PolicyError::Shape(format!("action {action:?} is not one of {n_actions} discrete actions"))),
    }
}

fn continuous_action(action: &Action, dim: usize) -> Result<&[f64], PolicyError> {
    match action {
        Action::Continuous(u) if u.len() == dim => Ok(u),
        _ => Err(PolicyError::Shape(format!("action {action:?} is not a {dim}-vector"))),
    }
}

/// KL divergence `KL(pi_new(.|s) || pi_old(.|s))` at one state.
pub fn kl_at_state(p_new: &PolicyParams, p_old: &PolicyParams, state: &State) -> Result<f64, PolicyError> {
    if p_new.family != p_old.family {
        return Err(PolicyError::FamilyMismatch);
    }
    match (p_new.distribution(state)?, p_old.distribution(state)?) {
        (
            ActionDistribution::Categorical { probs, log_probs },
            ActionDistribution::Categorical { log_probs: old_log, .. },
        ) => Ok(probs
            .iter()
            .zip(log_probs.iter().zip(&old_log))
            .map(|(p, (l1, l0))| if *p > 0.0 { p * (l1 - l0) } else { 0.0 })
            .sum::<f64>()
            .max(0.0)),
        (
            ActionDistribution::Gaussian { mean: m1, log_std: s1 },
            ActionDistribution::Gaussian { mean: m0, log_std: s0 },
        ) => Ok((0..m1.len())
            .map(|i| {
                let v1 = (2.0 * s1[i]).exp();
                let v0 = (2.0 * s0[i]).exp();
                let d = m1[i] - m0[i];
                s0[i] - s1[i] + (v1 + d * d) / (2.0 * v0) - 0.5
            })
            .sum()),
        _ => Err(PolicyError::FamilyMismatch),
    }
}

/// Average KL over `states`.
pub fn mean_kl(p_new: &PolicyParams, p_old: &PolicyParams, states: &[State]) -> Result<f64, PolicyError> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let w = 1.0 / states.len() as f64;
    weighted_kl(p_new, p_old, states, &vec![w; states.len()])
}

/// `sum_i weights[i] * KL(pi_new || pi_old)(states[i])`.
pub fn weighted_kl(
    p_new: &PolicyParams,
    p_old: &PolicyParams,
    states: &[State],
    weights: &[f64],
) -> Result<f64, PolicyError> {
    if states.len() != weights.len() {
        return Err(PolicyError::Shape("states and weights differ in length".into()));
    }
    let mut total = 0.0;
    for (s, w) in states.iter().zip(weights) {
        total += w * kl_at_state(p_new, p_old, s)?;
    }
    Ok(total)
}

/// Fisher operator `(sum_i w_i F(s_i) + damping I)` of a policy over a state set.
#[derive(Clone, Debug)]
pub struct FisherEstimate {
    pub operator: SpdOperator,
    pub sample_count: usize,
    pub damping: f64,
}

/// Per-state quantities reused across Fisher-vector products.
enum StateCache {
    Tabular { state: usize, probs: Vec<f64> },
    Mlp { acts: Vec<Vec<f64>> },
}

fn build_cache(p: &PolicyParams, states: &[State]) -> Result<Vec<StateCache>, PolicyError> {
    states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let entry = match p.family() {
                PolicyFamily::TabularSoftmax { .. } => {
                    let st = p.discrete_state(s)?;
                    StateCache::Tabular {
                        state: st,
                        probs: p.probs(st)?,
                    }
                }
                PolicyFamily::GaussianMlp { .. } => StateCache::Mlp {
                    acts: p.mlp_forward(p.continuous_state(s)?),
                },
            };
            let finite = match &entry {
                StateCache::Tabular { probs, .. } => crate::linalg::all_finite(probs),
                StateCache::Mlp { acts } => acts.iter().all(|a| crate::linalg::all_finite(a)),
            };
            if !finite {
                return Err(PolicyError::NonFinite { state_index: i });
            }
            Ok(entry)
        })
        .collect()
}

fn apply_fisher(p: &PolicyParams, cache: &[StateCache], weights: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    match p.family() {
        PolicyFamily::TabularSoftmax { n_actions, .. } => {
            let k = *n_actions;
            for (entry, w) in cache.iter().zip(weights) {
                if let StateCache::Tabular { state, probs } = entry {
                    let block = &v[state * k..(state + 1) * k];
                    let pv = crate::linalg::dot(probs, block);
                    for j in 0..k {
                        out[state * k + j] += w * probs[j] * (block[j] - pv);
                    }
                }
            }
        }
        PolicyFamily::GaussianMlp { action_dim, .. } => {
            let inv_var: Vec<f64> = p.log_std().iter().map(|ls| (-2.0 * ls).exp()).collect();
            let mut total_w = 0.0;
            for (entry, w) in cache.iter().zip(weights) {
                if let StateCache::Mlp { acts } = entry {
                    let jv = p.mlp_jvp(acts, v);
                    let scaled: Vec<f64> = jv.iter().zip(&inv_var).map(|(x, iv)| w * x * iv).collect();
                    p.mlp_backward(acts, &scaled, &mut out);
                    total_w += w;
                }
            }
            // Fisher of a Gaussian in its log standard deviation is 2 per dimension.
            let ls_offset = v.len() - action_dim;
            for i in ls_offset..v.len() {
                out[i] += 2.0 * total_w * v[i];
            }
        }
    }
    out
}

/// `(H + damping I) v` with `H` the average Fisher over `states`.
pub fn fisher_vector_product(
    p: &PolicyParams,
    states: &[State],
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>, PolicyError> {
    if v.len() != p.dim() {
        return Err(PolicyError::Shape(format!("vector has length {}, expected {}", v.len(), p.dim())));
    }
    if states.is_empty() {
        return Err(PolicyError::Shape("Fisher product needs at least one state".into()));
    }
    let cache = build_cache(p, states)?;
    let w = vec![1.0 / states.len() as f64; states.len()];
    let mut out = apply_fisher(p, &cache, &w, v);
    crate::linalg::axpy(damping, v, &mut out);
    if !crate::linalg::all_finite(&out) {
        return Err(PolicyError::NonFinite {
            state_index: first_bad_state(p, &cache, &w, v),
        });
    }
    Ok(out)
}

fn first_bad_state(p: &PolicyParams, cache: &[StateCache], w: &[f64], v: &[f64]) -> usize {
    (0..cache.len())
        .find(|&i| {
            let out = apply_fisher(p, &cache[i..=i], &w[i..=i], v);
            !crate::linalg::all_finite(&out)
        })
        .unwrap_or(0)
}

/// Fisher operator averaged uniformly over `states`.
pub fn fisher_operator(p: &PolicyParams, states: &[State], damping: f64) -> Result<FisherEstimate, PolicyError> {
    let n = states.len();
    if n == 0 {
        return Err(PolicyError::Shape("Fisher operator needs at least one state".into()));
    }
    weighted_fisher_operator(p, states, vec![1.0 / n as f64; n], damping)
}

/// Fisher operator `sum_i weights[i] F(states[i]) + damping I`.
pub fn weighted_fisher_operator(
    p: &PolicyParams,
    states: &[State],
    weights: Vec<f64>,
    damping: f64,
) -> Result<FisherEstimate, PolicyError> {
    if states.len() != weights.len() {
        return Err(PolicyError::Shape("states and weights differ in length".into()));
    }
    let cache = Arc::new(build_cache(p, states)?);
    let params = p.clone();
    let weights = Arc::new(weights);
    let operator = SpdOperator::new(p.dim(), damping, move |v| apply_fisher(&params, &cache, &weights, v))?;
    Ok(FisherEstimate {
        operator,
        sample_count: states.len(),
        damping,
    })
}
