//! Acceptance criteria: one line per criterion with its verdict, runtime
//! budget and the underlying check details.

use std::time::{Duration, Instant};

use cpokit_core::verification::{run_suite, Suite, SuiteReport, VerifyOptions};

struct Criterion {
    id: u8,
    title: &'static str,
    suite: Suite,
    budget: Duration,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: 1,
        title: "closed-form update matches the two-stage numerical oracle",
        suite: Suite::Kkt,
        budget: Duration::from_secs(10),
    },
    Criterion {
        id: 2,
        title: "projection non-expansiveness and variational-inequality certificates",
        suite: Suite::Lemmas,
        budget: Duration::from_secs(5),
    },
    Criterion {
        id: 3,
        title: "2-D toy problem: stationary points, KL convergence, L2 divergence",
        suite: Suite::Toy2d,
        budget: Duration::from_secs(5),
    },
    Criterion {
        id: 4,
        title: "worst-case reward/cost bounds in oracle mode",
        suite: Suite::Bounds,
        budget: Duration::from_secs(60),
    },
    Criterion {
        id: 5,
        title: "objective-change inequalities under the singular-value premises",
        suite: Suite::Theorem3,
        budget: Duration::from_secs(5),
    },
    Criterion {
        id: 6,
        title: "score-function, Fisher-product and KL-expansion numerics",
        suite: Suite::Numerics,
        budget: Duration::from_secs(30),
    },
    Criterion {
        id: 7,
        title: "performance difference identity on tabular CMDPs",
        suite: Suite::Identity,
        budget: Duration::from_secs(10),
    },
    Criterion {
        id: 8,
        title: "desk-scale behaviour: threshold satisfaction and cumulative violation",
        suite: Suite::Behavior,
        budget: Duration::from_secs(15 * 60),
    },
    Criterion {
        id: 9,
        title: "conjugate-gradient exactness and spectrum estimates",
        suite: Suite::Cg,
        budget: Duration::from_secs(5),
    },
];

fn verdict(c: &Criterion, report: &SuiteReport, elapsed: Duration) -> bool {
    let in_budget = elapsed <= c.budget;
    let passed = report.passed() && in_budget;
    println!(
        "criterion {} [{}] {} ({:.2}s of {}s budget)",
        c.id,
        if passed { "PASS" } else { "FAIL" },
        c.title,
        elapsed.as_secs_f64(),
        c.budget.as_secs()
    );
    for check in &report.checks {
        println!("    [{}] {}: {}", if check.passed { "pass" } else { "FAIL" }, check.name, check.detail);
    }
    if !in_budget {
        println!("    [FAIL] runtime exceeded the budget");
    }
    passed
}

#[test]
fn acceptance_criteria() {
    let out = tempfile::tempdir().expect("temporary directory");
    let opts = VerifyOptions {
        out_dir: Some(out.path().to_path_buf()),
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    println!();
    let mut failed = Vec::new();
    for c in &CRITERIA {
        let start = Instant::now();
        let report = run_suite(c.suite, &opts).expect("suite ran to completion");
        if !verdict(c, &report, start.elapsed()) {
            failed.push(c.id);
        }
    }
    println!(
        "acceptance summary: {}/{} criteria pass",
        CRITERIA.len() - failed.len(),
        CRITERIA.len()
    );
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
