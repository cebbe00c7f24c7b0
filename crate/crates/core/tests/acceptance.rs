//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! A failing criterion listed in `KNOWN_UNATTAINABLE` is reported as FAIL but
//! does not fail the target; any other failure does. `MARKOVSDE_SEED` picks
//! the seed (default 0), and arguments that are criterion numbers restrict the
//! run to those criteria.

use std::process::ExitCode;

use markovsde::validation::{Suite, KNOWN_UNATTAINABLE};

fn main() -> ExitCode {
    let seed = std::env::var("MARKOVSDE_SEED")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);
    let mut ids: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if ids.is_empty() {
        ids = (1..=10).collect();
    }
    let suite = Suite::new(seed);
    let mut unexpected = Vec::new();
    let mut known = Vec::new();
    for id in ids {
        let r = suite.run(id);
        println!("{}", r.line());
        if !r.passed {
            if KNOWN_UNATTAINABLE.contains(&id) {
                known.push(id);
            } else {
                unexpected.push(id);
            }
        }
    }
    if !known.is_empty() {
        println!("known unattainable, reported but not gating: {known:?}");
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
