//! Acceptance run: every validation criterion at its stated tolerance, one
//! PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;

use xfund::validate::{criteria, SuiteOptions};

fn main() -> ExitCode {
    let opts = SuiteOptions::default();
    let mut failed = Vec::new();
    for (i, c) in criteria().iter().enumerate() {
        let results = c.run(&opts);
        let ok = !results.is_empty() && results.iter().all(|r| r.passed);
        println!(
            "{} criterion {:>2} {}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            c.name
        );
        for r in &results {
            println!(
                "       {:<44} expected {:>16.9e} computed {:>16.9e} |err| {:.3e} tol {:.1e} {}",
                r.name,
                r.expected,
                r.computed,
                r.abs_error(),
                r.tolerance,
                if r.passed { "ok" } else { "FAILED" }
            );
            if !r.passed {
                println!("         oracle: {}", r.oracle);
            }
        }
        if !ok {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria().len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
