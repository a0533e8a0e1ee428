//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semflow::decoder::DecoderTrace;
use semflow::gradsuite::{random, tiny_config};
use semflow::matching::hungarian_match;
use semflow::metrics::{boundary_band, boundary_counts, boundary_iou, ciou, counts, giou};
use semflow::model::{Model, ModelConfig};
use semflow::{Tape, Tensor};

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    // A union of random rectangles, sometimes empty, sometimes speckled.
    let mut m = vec![false; h * w];
    for _ in 0..rng.gen_range(0..4) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = true;
            }
        }
    }
    if rng.gen_bool(0.2) {
        for v in m.iter_mut() {
            if rng.gen_bool(0.1) {
                *v = !*v;
            }
        }
    }
    m
}

/// Band by brute force: a foreground pixel belongs to the band when some
/// background pixel lies within Chebyshev distance `d` (borders replicate,
/// so only in-image pixels count).
pub fn band_oracle(m: &[bool], h: usize, w: usize, d: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !m[y * w + x] {
                continue;
            }
            let mut dist = usize::MAX;
            for yy in 0..h {
                for xx in 0..w {
                    if !m[yy * w + xx] {
                        dist = dist.min(y.abs_diff(yy).max(x.abs_diff(xx)));
                    }
                }
            }
            out[y * w + x] = dist <= d;
        }
    }
    out
}

pub fn count_oracle(p: &[bool], g: &[bool]) -> (u64, u64) {
    let mut i = 0u64;
    let mut u = 0u64;
    for k in 0..p.len() {
        if p[k] && g[k] {
            i += 1;
        }
        if p[k] || g[k] {
            u += 1;
        }
    }
    (i, u)
}

/// Lexicographically first minimum over all injective column→row maps.
pub fn brute_force(cost: &Tensor) -> (Vec<usize>, f64) {
    let (n, k) = (cost.shape()[0], cost.shape()[1]);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut rows = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(
        cost: &Tensor,
        n: usize,
        k: usize,
        rows: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if rows.len() == k {
            let total: f64 = rows.iter().enumerate().map(|(j, &i)| cost.data()[i * k + j]).sum();
            if best.as_ref().is_none_or(|(_, b)| total < b - 1e-9) {
                *best = Some((rows.clone(), total));
            }
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                rows.push(i);
                rec(cost, n, k, rows, used, best);
                rows.pop();
                used[i] = false;
            }
        }
    }
    rec(cost, n, k, &mut rows, &mut used, &mut best);
    best.expect("k ≤ n")
}

/// Number of cost matrices, out of `cases` random ones up to 6×6, where the
/// solver disagrees with brute force on the assignment or its cost.
pub fn hungarian_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for case in 0..cases {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=n);
        // Every fourth matrix uses small integers so that ties are common.
        let data: Vec<f64> = (0..n * k)
            .map(|_| if case % 4 == 0 { rng.gen_range(0..3) as f64 } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let cost = Tensor::new(&[n, k], data).unwrap();
        let got = hungarian_match(&cost).unwrap();
        let (rows, total) = brute_force(&cost);
        if (got.total - total).abs() > 1e-9 || got.rows != rows {
            mismatches += 1;
        }
    }
    mismatches
}

/// Number of disagreements between the metric implementations and the
/// pixel-count oracles over `pairs` random mask pairs.
pub fn metric_mismatches(pairs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let (mut recs, mut brecs) = (Vec::new(), Vec::new());
    let (mut si, mut su, mut per) = (0u64, 0u64, Vec::new());
    let (mut bsi, mut bsu, mut bper) = (0u64, 0u64, Vec::new());
    for _ in 0..pairs {
        let (h, w) = (rng.gen_range(3..30), rng.gen_range(3..30));
        let d = rng.gen_range(1..=3);
        let p = random_mask(&mut rng, h, w);
        let g = random_mask(&mut rng, h, w);
        let (i, u) = count_oracle(&p, &g);
        let c = counts(&p, &g).unwrap();
        bad += usize::from((c.inter, c.union) != (i, u));
        si += i;
        su += u;
        per.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        recs.push(c);

        let (bp, bg) = (band_oracle(&p, h, w, d), band_oracle(&g, h, w, d));
        bad += usize::from(boundary_band(&p, h, w, d).unwrap() != bp);
        let (bi, bu) = count_oracle(&bp, &bg);
        let bc = boundary_counts(&p, &g, h, w, d).unwrap();
        bad += usize::from((bc.inter, bc.union) != (bi, bu));
        bad += usize::from(boundary_iou(&p, &g, h, w, d).unwrap() != boundary_iou(&g, &p, h, w, d).unwrap());
        bsi += bi;
        bsu += bu;
        bper.push(if bu == 0 { 1.0 } else { bi as f64 / bu as f64 });
        brecs.push(bc);
    }
    let n = pairs as f64;
    bad += usize::from(ciou(&recs).unwrap() != si as f64 / su as f64);
    bad += usize::from(giou(&recs).unwrap() != per.iter().sum::<f64>() / n);
    bad += usize::from(ciou(&brecs).unwrap() != bsi as f64 / bsu as f64);
    bad += usize::from(giou(&brecs).unwrap() != bper.iter().sum::<f64>() / n);
    bad
}

pub struct Inputs {
    pub seg: Tensor,
    pub conditions: Tensor,
    pub features: Tensor,
    pub pixels: Tensor,
}

pub fn inputs(cfg: &ModelConfig, cond_seed: u64) -> Inputs {
    let d = cfg.decoder.dim;
    let pixels = random(&[d, 6, 6], 3);
    let flat = pixels.clone().reshape(&[d, 36]).unwrap();
    let mut features = Tensor::zeros(&[36, d]);
    for i in 0..d {
        for j in 0..36 {
            features.data_mut()[j * d + i] = flat.data()[i * 36 + j];
        }
    }
    Inputs {
        seg: random(&[d], 1),
        conditions: random(&[3, d], cond_seed),
        features,
        pixels,
    }
}

pub fn run(model: &Model, x: &Inputs) -> DecoderTrace {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false).unwrap();
    let seg = tape.constant(x.seg.clone()).unwrap();
    let c = tape.constant(x.conditions.clone()).unwrap();
    let f = tape.constant(x.features.clone()).unwrap();
    let px = tape.constant(x.pixels.clone()).unwrap();
    model.decoder.forward(&mut tape, &p, seg, c, f, px).unwrap().snapshot(&tape)
}

pub fn baseline_cfg() -> ModelConfig {
    let mut cfg = tiny_config();
    cfg.decoder.semantic_refinement = false;
    cfg.decoder.condition_refinement = false;
    cfg.bar.enabled = false;
    cfg
}
