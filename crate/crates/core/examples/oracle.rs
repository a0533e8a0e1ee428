//! Oracle upper bound and misalignment rates of a briefly trained model.
//!
//! cargo run --release --example oracle -- [steps]

use semflow::ablate::{datasets, run};
use semflow::config::RunConfig;

fn main() -> semflow::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(500, |s| s.parse().expect("steps"));
    let overrides = [format!("optim.steps={steps}"), "optim.warmup=50".into(), "data.heldout=100".into()];
    let cfg = RunConfig::parse_with("seed = 3", &overrides)?;
    let (train_set, heldout) = datasets(&cfg, 3)?;
    let r = run(&cfg, 3, &train_set, &heldout, &mut std::io::sink())?;
    let o = &r.eval.report.oracle;
    println!(
        "selected IoU {:.4}, oracle IoU {:.4}, gap {:.4}, selection hits oracle on {}/{}",
        o.mean_selected_iou, o.mean_oracle_iou, o.mean_gap, o.oracle_hits, o.samples
    );
    for t in &r.eval.report.misalignment {
        println!(
            "threshold {:.1}: {} failures ({:.1}%), {} misaligned ({:.1}%)",
            t.threshold,
            t.failures,
            100.0 * t.failure_fraction,
            t.misaligned,
            100.0 * t.misaligned_fraction
        );
    }
    Ok(())
}
