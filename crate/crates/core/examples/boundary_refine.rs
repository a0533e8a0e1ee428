//! Boundary band of a soft disc and the effect of an untrained refiner.

use semflow::gradsuite::random;
use semflow::model::{Model, ModelConfig};
use semflow::refine::boundary_mask;
use semflow::tape::sigmoid;
use semflow::Tensor;

fn main() -> semflow::Result<()> {
    let n = 16;
    let logits: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - 7.5, (i % n) as f64 - 7.5);
            5.0 - (x * x + y * y).sqrt()
        })
        .collect();
    let mask = Tensor::new(&[n, n], logits)?;
    let model = Model::new(&ModelConfig::default(), 1)?;
    let pixels = random(&[model.cfg.decoder.dim, n, n], 2);
    for eps in [0.05, 0.2, 0.5, 1.0] {
        let band = boundary_mask(&mask.map(sigmoid), eps)?;
        let refined = model.refine_one(&mask, &pixels, eps)?;
        let moved = refined.data().iter().zip(mask.data()).filter(|(a, b)| a != b).count();
        let max = refined.max_abs_diff(&mask);
        println!(
            "eps {eps:.2}: band {:>3} px, changed {moved:>3} px, max |Δ| {max:.4}",
            band.data().iter().filter(|&&v| v > 0.0).count()
        );
    }
    let band = boundary_mask(&mask.map(sigmoid), 0.2)?;
    for y in 0..n {
        let row: String = (0..n)
            .map(|x| match (band.data()[y * n + x] > 0.0, mask.data()[y * n + x] > 0.0) {
                (true, _) => '*',
                (false, true) => '#',
                _ => '.',
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
