//! Compares decoder variants on short runs.
//!
//! cargo run --release --example ablation -- [steps] [seeds]

use semflow::ablate::ablate;
use semflow::config::{RunConfig, VARIANTS};

fn main() -> semflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(300, |s| s.parse().expect("steps"));
    let seeds: Vec<u64> = args
        .next()
        .map_or(vec![1], |s| s.split(',').map(|v| v.parse().expect("seed")).collect());
    let overrides = [format!("optim.steps={steps}"), "optim.warmup=30".into(), "data.heldout=50".into()];
    let cfg = RunConfig::parse_with("", &overrides)?;
    let table = ablate(&cfg, &VARIANTS, &seeds, &mut std::io::stderr())?;
    print!("{}", table.render());
    for r in &table.recovery {
        println!(
            "seed {}: {} baseline failures, IoU {:.3} -> {:.3}",
            r.seed, r.failures, r.baseline_iou, r.full_iou
        );
    }
    Ok(())
}
