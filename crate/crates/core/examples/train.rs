//! Trains the full model for a short run and prints the loss curve.
//!
//! cargo run --release --example train -- [steps]

use semflow::ablate::datasets;
use semflow::config::RunConfig;
use semflow::model::Model;
use semflow::train::train;

fn main() -> semflow::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let overrides = [format!("optim.steps={steps}"), "optim.warmup=30".into(), "data.train=300".into()];
    let cfg = RunConfig::parse_with("seed = 1", &overrides)?;
    let (train_set, _) = datasets(&cfg, 1)?;
    let mut model = Model::new(&cfg.model(), 1)?;
    let summary = train(&mut model, &train_set, &cfg.optim, &cfg.loss, 1, &mut std::io::sink())?;
    for (i, chunk) in summary.losses.chunks(steps.div_ceil(10).max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}+ mean loss {mean:.4}", i * chunk.len());
    }
    if let Some((step, _)) = &summary.best {
        println!("best window ends at step {step}");
    }
    Ok(())
}
