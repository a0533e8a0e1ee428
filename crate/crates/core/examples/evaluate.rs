//! Trains briefly, then evaluates with and without boundary refinement.
//!
//! cargo run --release --example evaluate -- [steps]

use semflow::ablate::{datasets, run};
use semflow::config::RunConfig;

fn main() -> semflow::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(500, |s| s.parse().expect("steps"));
    let overrides = [format!("optim.steps={steps}"), "optim.warmup=50".into(), "data.heldout=50".into()];
    let cfg = RunConfig::parse_with("seed = 2", &overrides)?;
    let (train_set, heldout) = datasets(&cfg, 2)?;
    let r = run(&cfg, 2, &train_set, &heldout, &mut std::io::sink())?;
    let show = |name: &str, rep: &semflow::metrics::Report| {
        println!(
            "{name:<8} gIoU {:.4} cIoU {:.4} gBIoU {:.4} cBIoU {:.4} acc {:.3}",
            rep.giou, rep.ciou, rep.gbiou, rep.cbiou, rep.selection_accuracy
        );
    };
    show("refined", &r.eval.report);
    if let Some(raw) = &r.eval_no_bar {
        show("raw", &raw.report);
    }
    println!("{}", r.eval.to_json());
    Ok(())
}
