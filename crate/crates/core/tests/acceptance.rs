//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let e2e_dir = scratch.path().join("e2e");
    let schedule_dir = scratch.path().join("schedule");
    let criteria: Vec<(&str, Box<dyn Fn() -> common::Check>)> = vec![
        ("gradient suite", Box::new(common::gradient_suite)),
        ("preference-math suite", Box::new(common::preference_math_suite)),
        ("aggregation suite", Box::new(common::aggregation_suite)),
        ("REC mechanics", Box::new(common::rec_mechanics_suite)),
        ("GAE and k-NN oracles", Box::new(common::oracle_suite)),
        ("simulator suite", Box::new(common::simulator_suite)),
        ("shaped-reward suite", Box::new(common::shaped_reward_suite)),
        ("reward-model learning", Box::new(|| common::reward_learning_check(7))),
        ("scaled end-to-end", Box::new(move || common::end_to_end_check(&e2e_dir))),
        ("agreement analytics", Box::new(common::agreement_check)),
        ("schedule accounting", Box::new(move || common::schedule_check(&schedule_dir))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {reason}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
