use proptest::prelude::*;
use semflow::gradsuite::{random, tiny_config, tiny_sample};
use semflow::loss::LossWeights;
use semflow::model::Model;
use semflow::refine::boundary_mask;
use semflow::{pool3, PoolKind, Tape, Tensor};

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(&shape, data).unwrap()
}

fn binary_map() -> impl Strategy<Value = Tensor> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], h * w).prop_map(move |d| tensor(vec![h, w], d))
    })
}

fn real_map(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (2usize..9, 2usize..9).prop_flat_map(move |(h, w)| {
        proptest::collection::vec(lo..hi, h * w).prop_map(move |d| tensor(vec![h, w], d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool3_duality_and_growth(x in binary_map()) {
        let inv = x.map(|v| 1.0 - v);
        let min = pool3(PoolKind::Min, &x).unwrap();
        let dual = pool3(PoolKind::Max, &inv).unwrap().map(|v| 1.0 - v);
        prop_assert!(min.bit_eq(&dual));
        let once = pool3(PoolKind::Max, &x).unwrap();
        let twice = pool3(PoolKind::Max, &once).unwrap();
        prop_assert!(once.data().iter().zip(twice.data()).all(|(a, b)| b >= a));
        prop_assert!(x.data().iter().zip(once.data()).all(|(a, b)| b >= a));
    }

    #[test]
    fn attention_rows_are_simplices(nq in 1usize..5, nk in 1usize..7, heads in 1usize..3, seed in 0u64..1000, masked in any::<bool>()) {
        let d = 2 * heads;
        let mut t = Tape::new();
        let q = t.constant(random(&[nq, d], seed).map(|v| 3.0 * v)).unwrap();
        let k = t.constant(random(&[nk, d], seed + 1).map(|v| 3.0 * v)).unwrap();
        let blocked: Vec<bool> = (0..nq * nk).map(|i| (i as u64 + seed).is_multiple_of(3)).collect();
        let a = t.attention(q, k, k, heads, masked.then_some(blocked.as_slice())).unwrap();
        let w = t.attention_weights(a).unwrap();
        for row in w.chunks(nk) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_is_key_permutation_equivariant(nk in 2usize..7, seed in 0u64..1000, shift in 1usize..6) {
        let d = 4;
        let k = random(&[nk, d], seed);
        let v = random(&[nk, d], seed + 1);
        let perm: Vec<usize> = (0..nk).map(|i| (i + shift) % nk).collect();
        let mut t = Tape::new();
        let q = t.constant(random(&[3, d], seed + 2)).unwrap();
        let kv = t.constant(k).unwrap();
        let vv = t.constant(v).unwrap();
        let out = t.attention(q, kv, vv, 2, None).unwrap();
        let kp = t.gather_rows(kv, &perm).unwrap();
        let vp = t.gather_rows(vv, &perm).unwrap();
        let out_p = t.attention(q, kp, vp, 2, None).unwrap();
        prop_assert!(t.value(out).max_abs_diff(t.value(out_p)) <= 1e-6);
    }

    #[test]
    fn band_area_shrinks_with_eps(m in real_map(0.0, 1.0), e1 in 0.01f64..1.0, e2 in 0.01f64..1.0) {
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let area = |e| boundary_mask(&m, e).unwrap().data().iter().sum::<f64>();
        prop_assert!(area(lo) >= area(hi));
    }

    #[test]
    fn refinement_is_bounded_and_local(raw in real_map(-6.0, 6.0), seed in 0u64..1000, eps in 0.01f64..0.9) {
        let cfg = tiny_config();
        let model = Model::new(&cfg, seed).unwrap();
        let refiner = model.refiner.as_ref().unwrap();
        let (h, w) = (raw.shape()[0], raw.shape()[1]);
        let mut t = Tape::new();
        let p = model.bind(&mut t, false).unwrap();
        let r = t.constant(raw.clone().reshape(&[1, h, w]).unwrap()).unwrap();
        let px = t.constant(random(&[cfg.decoder.dim, h, w], seed)).unwrap();
        let out = refiner.refine_masks(&mut t, &p, r, px, eps).unwrap();
        let alpha = model.store.get(refiner.alpha).data()[0].abs();
        let band = boundary_mask(&raw.map(semflow::tape::sigmoid), eps).unwrap();
        for ((o, m), b) in t.value(out).data().iter().zip(raw.data()).zip(band.data()) {
            if *b == 0.0 {
                prop_assert_eq!(o.to_bits(), m.to_bits());
            } else {
                prop_assert!((o - m).abs() <= alpha + 4.0 * f64::EPSILON * m.abs());
            }
        }
    }

    #[test]
    fn loss_ignores_object_order(seed in 0u64..50) {
        let cfg = tiny_config();
        let model = Model::new(&cfg, seed).unwrap();
        let w = LossWeights::default();
        let loss = |s: &semflow::synth::SceneSample| {
            let mut t = Tape::new();
            let p = model.bind(&mut t, false).unwrap();
            let out = model.loss(&mut t, &p, s, &w).unwrap();
            t.value(out.total).item()
        };
        let a = tiny_sample();
        let mut b = a.clone();
        let (h, wd) = (a.masks.shape()[1], a.masks.shape()[2]);
        let mut swapped = a.masks.row(1).to_vec();
        swapped.extend_from_slice(a.masks.row(0));
        b.masks = Tensor::new(&[2, h, wd], swapped).unwrap();
        b.objects.swap(0, 1);
        b.referred = 1;
        prop_assert!((loss(&a) - loss(&b)).abs() <= 1e-9);
    }

    #[test]
    fn selection_ignores_positive_condition_scale(seed in 0u64..200, lambda in 0.01f64..100.0) {
        let cfg = tiny_config();
        let model = Model::new(&cfg, 3).unwrap();
        let d = cfg.decoder.dim;
        let mut t = Tape::new();
        let p = model.bind(&mut t, false).unwrap();
        let q = t.constant(random(&[6, d], seed)).unwrap();
        let c = random(&[3, d], seed + 1);
        let c1 = t.constant(c.clone()).unwrap();
        let c2 = t.constant(c.map(|v| v * lambda)).unwrap();
        let s1 = semflow::decoder::similarity_scores(&mut t, &p, &model.decoder.cls, q, c1).unwrap();
        let s2 = semflow::decoder::similarity_scores(&mut t, &p, &model.decoder.cls, q, c2).unwrap();
        prop_assert_eq!(
            semflow::decoder::argmax(t.value(s1).data()),
            semflow::decoder::argmax(t.value(s2).data())
        );
    }
}

#[test]
fn constant_map_and_zeroed_net_are_identities() {
    let cfg = tiny_config();
    let mut model = Model::new(&cfg, 1).unwrap();
    let refiner = model.refiner.clone().unwrap();
    let raw = random(&[1, 6, 6], 4).map(|v| 5.0 * v);
    let px = random(&[cfg.decoder.dim, 6, 6], 5);
    let run = |model: &Model, raw: &Tensor| {
        let mut t = Tape::new();
        let p = model.bind(&mut t, false).unwrap();
        let r = t.constant(raw.clone()).unwrap();
        let x = t.constant(px.clone()).unwrap();
        let out = refiner.refine_masks(&mut t, &p, r, x, 0.1).unwrap();
        t.value(out).clone()
    };
    let flat = Tensor::full(&[1, 6, 6], 0.7);
    assert!(run(&model, &flat).bit_eq(&flat));
    refiner.zero(&mut model.store);
    assert!(run(&model, &raw).bit_eq(&raw));
}
