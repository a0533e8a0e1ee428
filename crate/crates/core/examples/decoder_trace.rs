//! Runs one scene through an untrained decoder and prints per-layer
//! selections, gate statistics and condition drift.

use semflow::metrics::condition_cosines;
use semflow::model::Model;
use semflow::synth::{generate_scene, SceneSpec};
use semflow::Tape;

fn main() -> semflow::Result<()> {
    let model = Model::new(&Default::default(), 1)?;
    let sample = generate_scene(&SceneSpec::default(), 1, 0)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false)?;
    let fwd = model.forward(&mut tape, &p, &sample)?;
    let trace = fwd.trace.snapshot(&tape);
    for (l, layer) in trace.layers.iter().enumerate() {
        let best = semflow::decoder::argmax(layer.scores.data());
        let gate = layer.gate.as_ref().map(|g| {
            let n = g.data().len() as f64;
            g.data().iter().sum::<f64>() / n
        });
        println!("layer {l}: selected query {best}, mean gate {gate:?}");
    }
    println!("condition cosine to layer 0: {:?}", condition_cosines(&trace));
    Ok(())
}
