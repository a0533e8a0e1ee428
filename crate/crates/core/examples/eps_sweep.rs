//! Boundary metrics over refinement thresholds; ε = 1 leaves masks unchanged.
//!
//! cargo run --release --example eps_sweep -- [steps]

use semflow::ablate::{datasets, run};
use semflow::config::RunConfig;
use semflow::eval::eps_sweep;

fn main() -> semflow::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(500, |s| s.parse().expect("steps"));
    let overrides = [format!("optim.steps={steps}"), "optim.warmup=50".into(), "data.heldout=50".into()];
    let cfg = RunConfig::parse_with("seed = 4", &overrides)?;
    let (train_set, heldout) = datasets(&cfg, 4)?;
    let r = run(&cfg, 4, &train_set, &heldout, &mut std::io::sink())?;
    println!("{:>6} {:>8} {:>8}", "eps", "gBIoU", "cBIoU");
    for row in eps_sweep(&r.model, &heldout, &[0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0])? {
        println!("{:>6.2} {:>8.4} {:>8.4}", row.eps, row.gbiou, row.cbiou);
    }
    Ok(())
}
