//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero when a required criterion fails.
//!
//! `cargo test --test acceptance -- <filter>...` runs only the criteria whose
//! number or name contains one of the filters.

mod common;
mod gradients;
mod oracles;
mod shapes;
mod training;

use std::process::ExitCode;
use std::time::Instant;

use common::TestResult;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit_seconds: f64,
    /// Reported but never fails the run.
    advisory: bool,
    run: fn() -> TestResult<Outcome>,
}

const CRITERIA: [Criterion; 8] = [
    Criterion { id: 1, name: "flops", limit_seconds: 1.0, advisory: false, run: shapes::flops },
    Criterion { id: 2, name: "gradients", limit_seconds: 120.0, advisory: false, run: gradients::suite },
    Criterion { id: 3, name: "oracles", limit_seconds: 60.0, advisory: false, run: oracles::suite },
    Criterion { id: 4, name: "architecture", limit_seconds: 600.0, advisory: false, run: shapes::architecture },
    Criterion { id: 5, name: "overfit", limit_seconds: 1800.0, advisory: false, run: training::overfit },
    Criterion { id: 6, name: "timing-trend", limit_seconds: 1200.0, advisory: false, run: training::timing_trend },
    Criterion { id: 7, name: "determinism-resume", limit_seconds: 600.0, advisory: false, run: training::determinism },
    Criterion { id: 8, name: "accuracy-trend", limit_seconds: 1800.0, advisory: true, run: training::accuracy_trend },
];

fn selected(c: &Criterion, filters: &[String]) -> bool {
    filters.is_empty()
        || filters
            .iter()
            .any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f)
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for c in CRITERIA.iter().filter(|c| selected(c, &filters)) {
        let started = Instant::now();
        let result = (c.run)();
        let seconds = started.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = seconds < c.limit_seconds;
        let verdict = match (passed && in_time, c.advisory) {
            (true, _) => "PASS",
            (false, true) => "ADVISORY-FAIL",
            (false, false) => "FAIL",
        };
        let timing = if in_time { "" } else { " over time limit" };
        println!(
            "criterion {} {:<18} {verdict} [{seconds:.1}s, limit {:.0}s{timing}] {detail}",
            c.id, c.name, c.limit_seconds
        );
        if !(passed && in_time) && !c.advisory {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
