//! Finite-difference check of every op and module.

use semflow::gradcheck::GradCheckOptions;
use semflow::gradsuite::run_suite;

fn main() -> semflow::Result<()> {
    let report = run_suite(&GradCheckOptions::default())?;
    for e in &report.entries {
        println!("{:<44} {:.2e}", e.name, e.report.max_rel_err());
    }
    println!("max {:.2e}, passed {}", report.max_rel_err(), report.passed());
    Ok(())
}
