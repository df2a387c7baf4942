//! Constrained policy optimization toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense vectors, SPD operators, conjugate gradient, spectra.
//! * [`subproblem`]: the projected two-step update and projection certificates.
//! * [`baselines`]: TRPO, CPO, PDO and FPO update rules.
//! * [`policy`]: tabular softmax and Gaussian MLP policies with Fisher products.
//! * [`cmdp`]: constrained MDPs, exact tabular evaluation, simulators.
//! * [`estimation`]: rollouts, GAE and empirical update inputs.
//! * [`trainer`]: the outer training loop and its artifacts.
//! * [`analysis`]: improvement bounds, objective-change checks, the 2-D toy problem.
//! * [`verification`]: independent reference solvers and the check suites.

pub mod analysis;
pub mod baselines;
pub mod cmdp;
pub mod estimation;
pub mod linalg;
pub mod policy;
pub mod subproblem;
pub mod trainer;
pub mod verification;
