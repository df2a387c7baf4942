//! Independent checks of the production code: reference solvers that share
//! no code with the optimizers, and the suites that compare the two.

pub mod behavior;
pub mod oracles;
pub mod suites;

use thiserror::Error;

pub use behavior::{behavior_config, behavior_report, behavior_summary, BehaviorEnv, BehaviorRun, BehaviorSummary};
pub use suites::{run_suite, CheckResult, Suite, SuiteReport, VerifyOptions};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite '{0}'")]
    UnknownSuite(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error(transparent)]
    Update(#[from] crate::subproblem::UpdateError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Cmdp(#[from] crate::cmdp::CmdpError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
}
