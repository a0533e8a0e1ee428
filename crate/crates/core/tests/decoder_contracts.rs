mod common;

use common::{baseline_cfg, inputs, run};
use semflow::gradsuite::{random, tiny_config, tiny_sample};
use semflow::loss::LossWeights;
use semflow::model::{Model, ModelConfig};
use semflow::Tape;

#[test]
fn baseline_ignores_condition_values() {
    let cfg = baseline_cfg();
    let model = Model::new(&cfg, 5).unwrap();
    let a = run(&model, &inputs(&cfg, 10));
    let b = run(&model, &inputs(&cfg, 11));
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert!(la.queries.bit_eq(&lb.queries));
        assert!(la.masks.bit_eq(&lb.masks));
        assert!(la.gate.is_none());
    }
    for t in [&a, &b] {
        assert!(t.last().conditions.bit_eq(&t.initial_conditions));
    }
}

#[test]
fn silenced_semantic_paths_reproduce_baseline() {
    let base_cfg = baseline_cfg();
    let base = Model::new(&base_cfg, 5).unwrap();
    let mut cfg = base_cfg.clone();
    cfg.decoder.semantic_refinement = true;
    cfg.decoder.condition_refinement = true;
    let mut full = Model::new(&cfg, 5).unwrap();
    let decoder = full.decoder.clone();
    decoder.silence_semantic_paths(&mut full.store);
    let x = inputs(&cfg, 10);
    let a = run(&base, &x);
    let b = run(&full, &x);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert!(la.queries.bit_eq(&lb.queries));
        assert!(la.conditions.bit_eq(&lb.conditions));
        assert!(la.masks.bit_eq(&lb.masks));
        assert!(la.scores.bit_eq(&lb.scores));
    }
}

#[test]
fn zero_gate_weights_give_exact_half_mix() {
    let cfg = tiny_config();
    let mut model = Model::new(&cfg, 5).unwrap();
    let decoder = model.decoder.clone();
    decoder.zero_gates(&mut model.store);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false).unwrap();
    let a = random(&[4, cfg.decoder.dim], 20);
    let b = random(&[4, cfg.decoder.dim], 21);
    let av = tape.constant(a.clone()).unwrap();
    let bv = tape.constant(b.clone()).unwrap();
    let (fused, g) = model.decoder.layers[0].adaptive_fusion(&mut tape, &p, av, bv).unwrap();
    assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    for ((f, x), y) in tape.value(fused).data().iter().zip(a.data()).zip(b.data()) {
        assert_eq!(f.to_bits(), (0.5 * (x + y)).to_bits());
    }
    // Identical inputs pass through unchanged whatever the gate.
    let (same, _) = model.decoder.layers[0].adaptive_fusion(&mut tape, &p, av, av).unwrap();
    assert!(tape.value(same).bit_eq(&a));
}

#[test]
fn gates_are_strictly_inside_unit_interval() {
    let cfg = tiny_config();
    let model = Model::new(&cfg, 5).unwrap();
    let t = run(&model, &inputs(&cfg, 10));
    for l in &t.layers {
        assert!(l.gate.as_ref().unwrap().data().iter().all(|&g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn condition_drift_starts_near_one_with_small_refinement_weights() {
    let cfg = ModelConfig::default();
    let mut model = Model::new(&cfg, 1).unwrap();
    for (name, t) in model.store.iter_mut() {
        if name.contains(".cond_attn.") {
            for v in t.data_mut() {
                *v *= 0.05;
            }
        }
    }
    let sample = semflow::synth::generate_scene(&Default::default(), 1, 0).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false).unwrap();
    let fwd = model.forward(&mut tape, &p, &sample).unwrap();
    let cos = semflow::metrics::condition_cosines(&fwd.trace.snapshot(&tape));
    assert_eq!(cos[0], 1.0);
    assert!(cos[1] > 0.9, "{cos:?}");
    assert!(cos.iter().all(|c| (-1.0..=1.0).contains(c)));
}

#[test]
fn every_layer_contributes_a_finite_loss() {
    let cfg = tiny_config();
    let model = Model::new(&cfg, 5).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false).unwrap();
    let out = model.loss(&mut tape, &p, &tiny_sample(), &LossWeights::default()).unwrap();
    assert_eq!(out.layers.len(), cfg.decoder.layers + 1);
    assert!(out.layers.iter().all(|l| l.total.is_finite() && l.total > 0.0));
    let mut sum = 0.0;
    for l in &out.layers {
        sum += l.total;
    }
    assert_eq!(sum, tape.value(out.total).item());
}

#[test]
fn baseline_is_invariant_to_condition_order() {
    let cfg = baseline_cfg();
    let model = Model::new(&cfg, 5).unwrap();
    let mut sample = tiny_sample();
    let trace = |s: &semflow::synth::SceneSample| {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false).unwrap();
        model.forward(&mut tape, &p, s).unwrap().trace.snapshot(&tape)
    };
    let a = trace(&sample);
    sample.condition.reverse();
    let b = trace(&sample);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert!(la.masks.max_abs_diff(&lb.masks) < 1e-12);
        assert!(la.scores.max_abs_diff(&lb.scores) < 1e-12);
    }
    assert_eq!(semflow::decoder::select_mask(&a).0, semflow::decoder::select_mask(&b).0);
}

#[test]
fn zero_value_projection_leaves_output_bias() {
    let cfg = tiny_config();
    let mut model = Model::new(&cfg, 5).unwrap();
    let attn = model.decoder.layers[0].vis_attn.clone();
    attn.v_proj.zero(&mut model.store);
    let bias = model.store.get(attn.out_proj.bias).clone();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false).unwrap();
    let q = tape.constant(random(&[3, cfg.decoder.dim], 1)).unwrap();
    let k = tape.constant(random(&[5, cfg.decoder.dim], 2)).unwrap();
    let out = attn.forward(&mut tape, &p, q, k, k).unwrap();
    for row in tape.value(out).data().chunks(cfg.decoder.dim) {
        assert_eq!(row, bias.data());
    }
}
