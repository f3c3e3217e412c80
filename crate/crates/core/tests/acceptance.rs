//! Runs every acceptance criterion and prints one PASS/FAIL line each. Exits non-zero
//! when any criterion fails.

use std::process::ExitCode;

use cotlab::acceptance::{run_criterion, CRITERION_COUNT};

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut failed = 0;
    for id in 1..=CRITERION_COUNT {
        let report = run_criterion(id, scratch.path());
        println!("{}", report.line());
        if !report.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {} failed", CRITERION_COUNT - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
