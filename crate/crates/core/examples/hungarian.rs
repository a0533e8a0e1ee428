//! Matches three ground-truth objects to five predictions.

use semflow::matching::hungarian_match;
use semflow::Tensor;

fn main() -> semflow::Result<()> {
    // Rows are predictions, columns are objects.
    let cost = Tensor::new(
        &[5, 3],
        vec![
            0.9, 0.1, 0.8, //
            0.2, 0.7, 0.6, //
            0.5, 0.5, 0.1, //
            0.3, 0.2, 0.9, //
            0.8, 0.9, 0.4,
        ],
    )?;
    let a = hungarian_match(&cost)?;
    for (obj, row) in a.rows.iter().enumerate() {
        println!("object {obj} <- prediction {row} (cost {})", cost.data()[row * 3 + obj]);
    }
    println!("total {}", a.total);
    Ok(())
}
