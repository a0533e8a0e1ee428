//! The finite-difference suite: every differentiable tape op on three
//! shapes, each decoder sublayer, the heads, the refiner and the full
//! training loss on a 4-query / 2-token / 2-object / 8×8 instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::similarity_scores;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::loss::LossWeights;
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::synth::{Attribute, Attributes, Color, Quadrant, SceneSample, Shape, Size};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed())
    }

    pub fn failures(&self) -> Vec<&SuiteEntry> {
        self.entries.iter().filter(|e| !e.report.passed()).collect()
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// `Σ x ⊙ R` for a fixed random `R`, so every output entry matters.
pub fn probe(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let r = random(t.shape(x), seed ^ 0x9e37_79b9);
    let y = t.mul_const(x, &r)?;
    t.sum(y)
}

struct Suite<'a> {
    opts: &'a GradCheckOptions,
    entries: Vec<SuiteEntry>,
}

impl Suite<'_> {
    fn op<F>(&mut self, name: &str, params: Vec<(&str, Tensor)>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, &params, self.opts)?;
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    /// Checks the store tensors whose names start with one of `prefixes`
    /// plus the extra `inputs`; other parameters are held constant.
    fn module<F>(&mut self, name: &str, store: &ParamStore, prefixes: &[&str], inputs: Vec<(&str, Tensor)>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
    {
        let selected: Vec<bool> = store
            .names()
            .iter()
            .map(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .collect();
        let mut params: Vec<(&str, Tensor)> = store
            .iter()
            .zip(&selected)
            .filter(|(_, &s)| s)
            .map(|((n, t), _)| (n, t.clone()))
            .collect();
        let k = params.len();
        params.extend(inputs);
        let report = grad_check(
            |t, v| {
                let mut all = Vec::with_capacity(store.len());
                let mut next = 0;
                for (tensor, &s) in store.tensors().iter().zip(&selected) {
                    if s {
                        all.push(v[next]);
                        next += 1;
                    } else {
                        all.push(t.constant(tensor.clone())?);
                    }
                }
                f(t, &Bound::from_vars(all), &v[k..])
            },
            &params,
            self.opts,
        )?;
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

/// Keeps a tensor away from zero: `sign(x)·(0.5 + |x|)`.
fn off_zero(t: Tensor) -> Tensor {
    t.map(|v| v.signum() * (0.5 + v.abs()))
}

fn ops(s: &mut Suite) -> Result<()> {
    for (i, (a, b)) in [([3, 4], [4, 2]), ([1, 5], [5, 3]), ([4, 4], [4, 1])].iter().enumerate() {
        let seed = 10 + i as u64;
        s.op(&format!("matmul {a:?}x{b:?}"), vec![("a", random(a, seed)), ("b", random(b, seed + 1))], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 1)
        })?;
    }
    for (i, (a, b, ta, tb)) in [([4, 3], [4, 2], true, false), ([2, 3], [5, 3], false, true), ([3, 2], [4, 3], true, true)]
        .iter()
        .enumerate()
    {
        let seed = 20 + i as u64;
        let (ta, tb) = (*ta, *tb);
        s.op(&format!("matmul_t {a:?}x{b:?}"), vec![("a", random(a, seed)), ("b", random(b, seed + 1))], move |t, v| {
            let y = t.matmul_t(v[0], v[1], ta, tb)?;
            probe(t, y, 2)
        })?;
    }
    let shapes: [&[usize]; 3] = [&[5], &[2, 3], &[2, 3, 4]];
    for (i, sh) in shapes.iter().enumerate() {
        let seed = 30 + 10 * i as u64;
        let a = random(sh, seed);
        let b = random(sh, seed + 1);
        let pos = b.map(|v| 2.0 + v);
        s.op(&format!("add {sh:?}"), vec![("a", a.clone()), ("b", b.clone())], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 3)
        })?;
        s.op(&format!("sub {sh:?}"), vec![("a", a.clone()), ("b", b.clone())], |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 4)
        })?;
        s.op(&format!("mul {sh:?}"), vec![("a", a.clone()), ("b", b.clone())], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 5)
        })?;
        s.op(&format!("div {sh:?}"), vec![("a", a.clone()), ("b", pos.clone())], |t, v| {
            let y = t.div(v[0], v[1])?;
            probe(t, y, 6)
        })?;
        s.op(&format!("blend {sh:?}"), vec![("g", random(sh, seed + 2).map(|v| 0.5 + 0.4 * v)), ("a", a.clone()), ("b", b.clone())], |t, v| {
            let y = t.blend(v[0], v[1], v[2])?;
            probe(t, y, 7)
        })?;
        s.op(&format!("scale/add_const {sh:?}"), vec![("x", a.clone())], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            let y = t.add_const(y, 0.3)?;
            probe(t, y, 8)
        })?;
        let factor = random(sh, seed + 3);
        s.op(&format!("mul_const {sh:?}"), vec![("x", a.clone())], move |t, v| {
            let y = t.mul_const(v[0], &factor)?;
            probe(t, y, 9)
        })?;
        s.op(&format!("mul_scalar {sh:?}"), vec![("x", a.clone()), ("s", Tensor::new(&[1], vec![0.7])?)], |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            probe(t, y, 10)
        })?;
        for (name, k) in [("sigmoid", 0), ("tanh", 1), ("gelu", 2), ("relu", 3)] {
            let x = if k == 3 { off_zero(a.clone()) } else { a.map(|v| 3.0 * v) };
            s.op(&format!("{name} {sh:?}"), vec![("x", x)], move |t, v| {
                let y = match k {
                    0 => t.sigmoid(v[0])?,
                    1 => t.tanh(v[0])?,
                    2 => t.gelu(v[0])?,
                    _ => t.relu(v[0])?,
                };
                probe(t, y, 11)
            })?;
        }
        let last = sh.len() - 1;
        s.op(&format!("softmax {sh:?}"), vec![("x", a.map(|v| 2.0 * v))], move |t, v| {
            let y = t.softmax(v[0], last)?;
            probe(t, y, 12)
        })?;
        let d = *sh.last().unwrap();
        s.op(
            &format!("layer_norm {sh:?}"),
            vec![("x", a.clone()), ("gamma", random(&[d], seed + 4)), ("beta", random(&[d], seed + 5))],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                probe(t, y, 13)
            },
        )?;
        s.op(&format!("sum/mean {sh:?}"), vec![("x", a.clone())], |t, v| {
            let x2 = t.mul(v[0], v[0])?;
            let s1 = t.sum(x2)?;
            let m = t.mean(v[0])?;
            let m = t.mul(m, m)?;
            t.add(s1, m)
        })?;
        s.op(&format!("sum_last {sh:?}"), vec![("x", a.clone())], |t, v| {
            let y = t.sum_last(v[0])?;
            probe(t, y, 14)
        })?;
        let target = random(sh, seed + 6).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        s.op(&format!("bce_with_logits {sh:?}"), vec![("x", a.map(|v| 4.0 * v))], move |t, v| {
            t.bce_with_logits(v[0], &target)
        })?;
    }
    for (i, sh) in [[3usize, 4], [1, 6], [5, 2]].iter().enumerate() {
        let seed = 70 + 10 * i as u64;
        let (r, c) = (sh[0], sh[1]);
        let a = random(sh, seed);
        s.op(&format!("transpose/reshape {sh:?}"), vec![("x", a.clone())], move |t, v| {
            let y = t.transpose(v[0])?;
            let y = t.reshape(y, &[c * r])?;
            probe(t, y, 15)
        })?;
        s.op(&format!("add_bias {sh:?}"), vec![("x", a.clone()), ("b", random(&[c], seed + 1))], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y, 16)
        })?;
        s.op(&format!("mean_rows {sh:?}"), vec![("x", a.clone())], |t, v| {
            let y = t.mean_rows(v[0])?;
            probe(t, y, 17)
        })?;
        s.op(&format!("concat {sh:?}"), vec![("a", a.clone()), ("b", random(&[2, c], seed + 2)), ("c", random(&[r, 3], seed + 3))], |t, v| {
            let rows = t.concat(&[v[0], v[1]], 0)?;
            let cols = t.concat(&[v[0], v[2]], 1)?;
            let p1 = probe(t, rows, 18)?;
            let p2 = probe(t, cols, 19)?;
            t.add(p1, p2)
        })?;
        let idx: Vec<usize> = vec![r - 1, 0, r - 1];
        s.op(&format!("gather_rows {sh:?}"), vec![("x", a.clone())], move |t, v| {
            let y = t.gather_rows(v[0], &idx)?;
            probe(t, y, 20)
        })?;
    }
    for (i, (x, w, stride)) in [([2, 4, 4], [3, 2, 3, 3], 1), ([1, 5, 5], [2, 1, 3, 3], 2), ([3, 4, 6], [2, 3, 1, 1], 1)]
        .iter()
        .enumerate()
    {
        let seed = 100 + 10 * i as u64;
        let stride = *stride;
        s.op(
            &format!("conv2d {x:?}*{w:?}/{stride}"),
            vec![("x", random(x, seed)), ("w", random(w, seed + 1)), ("b", random(&[w[0]], seed + 2))],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride)?;
                probe(t, y, 21)
            },
        )?;
    }
    for (i, (nq, nk, d, heads, masked)) in [(3, 5, 4, 2, false), (1, 2, 6, 3, false), (4, 4, 2, 1, true)].iter().enumerate() {
        let seed = 130 + 10 * i as u64;
        let (heads, masked) = (*heads, *masked);
        let blocked: Vec<bool> = (0..nq * nk).map(|j| j % 3 == 1).collect();
        s.op(
            &format!("attention q{nq} k{nk} d{d} h{heads}{}", if masked { " masked" } else { "" }),
            vec![("q", random(&[*nq, *d], seed)), ("k", random(&[*nk, *d], seed + 1)), ("v", random(&[*nk, *d], seed + 2))],
            move |t, v| {
                let y = t.attention(v[0], v[1], v[2], heads, masked.then_some(blocked.as_slice()))?;
                probe(t, y, 22)
            },
        )?;
    }
    Ok(())
}

/// The small model used for the module checks.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    let d = &mut cfg.decoder;
    d.layers = 2;
    d.queries = 4;
    d.dim = 8;
    d.heads = 2;
    d.condition_dim = 4;
    d.projector_hidden = 8;
    cfg.bar.channels = 2;
    cfg
}

/// A 16×16 scene with two rectangles and a two-token condition; masks are
/// 8×8 at decoder resolution.
pub fn tiny_sample() -> SceneSample {
    let (h, w) = (16, 16);
    let mut masks = Tensor::zeros(&[2, h, w]);
    let mut image = random(&[3, h, w], 7).map(|v| 0.1 * v);
    for (k, (r0, r1, c0, c1)) in [(2, 8, 2, 7), (9, 14, 8, 15)].into_iter().enumerate() {
        for y in r0..r1 {
            for x in c0..c1 {
                masks.data_mut()[k * h * w + y * w + x] = 1.0;
                image.data_mut()[k * h * w + y * w + x] += 1.0;
            }
        }
    }
    let a = Attributes {
        shape: Shape::Rectangle,
        color: Color::Red,
        size: Size::Small,
        quadrant: Quadrant::Nw,
    };
    let b = Attributes {
        color: Color::Green,
        quadrant: Quadrant::Se,
        ..a
    };
    SceneSample {
        id: 0,
        seed: 0,
        image,
        masks,
        objects: vec![a, b],
        condition: vec![Attribute::Color(Color::Red), Attribute::Shape(Shape::Rectangle)],
        referred: 0,
    }
}

fn modules(s: &mut Suite) -> Result<()> {
    let cfg = tiny_config();
    let model = Model::new(&cfg, 3)?;
    let st = &model.store;
    let d = cfg.decoder.dim;
    let (n, t_len, hw) = (cfg.decoder.queries, 2, 8);
    let layer = &model.decoder.layers[0];
    let q = random(&[n, d], 201);
    let c = random(&[t_len, d], 202);
    let pixels = random(&[d, hw, hw], 203);
    let feats = random(&[hw * hw, d], 204);

    s.module("encoder", st, &["encoder."], vec![("image", random(&[3, 8, 8], 205).map(|v| v.abs()))], |t, p, v| {
        let (pixels, features) = model.encoder.forward(t, p, v[0])?;
        let a = probe(t, pixels, 30)?;
        let b = probe(t, features, 29)?;
        t.add(a, b)
    })?;
    s.module("projector", st, &["projector."], vec![("raw", random(&[t_len, cfg.decoder.condition_dim], 206))], |t, p, v| {
        let y = model.projector.project(t, p, v[0])?;
        probe(t, y, 31)
    })?;
    s.module("visual_cross_attention", st, &["decoder.layer0.vis_"], vec![("q", q.clone()), ("f", feats.clone())], |t, p, v| {
        let y = layer.visual_cross_attention(t, p, v[0], v[1], None)?;
        probe(t, y, 32)
    })?;
    s.module("semantic_cross_attention", st, &["decoder.layer0.sem_"], vec![("q_vis", q.clone()), ("c", c.clone())], |t, p, v| {
        let y = layer.semantic_cross_attention(t, p, v[0], v[1])?;
        probe(t, y, 33)
    })?;
    s.module(
        "adaptive_fusion",
        st,
        &["decoder.layer0.gate"],
        vec![("q_vis", q.clone()), ("q_sem", random(&[n, d], 207))],
        |t, p, v| {
            let (f, g) = layer.adaptive_fusion(t, p, v[0], v[1])?;
            let a = probe(t, f, 34)?;
            let b = probe(t, g, 35)?;
            t.add(a, b)
        },
    )?;
    s.module("self_attention", st, &["decoder.layer0.self_"], vec![("q", q.clone())], |t, p, v| {
        let y = layer.self_attention(t, p, v[0])?;
        probe(t, y, 36)
    })?;
    s.module("condition_refinement", st, &["decoder.layer0.cond_attn"], vec![("c", c.clone()), ("q_s", q.clone())], |t, p, v| {
        let y = layer.condition_refinement(t, p, v[0], v[1])?;
        probe(t, y, 37)
    })?;
    s.module("feed_forward", st, &["decoder.layer0.ffn"], vec![("q", q.clone())], |t, p, v| {
        let y = layer.feed_forward(t, p, v[0])?;
        probe(t, y, 38)
    })?;
    s.module(
        "decoder_layer",
        st,
        &["decoder.layer0."],
        vec![("q", q.clone()), ("c", c.clone()), ("f", feats.clone())],
        |t, p, v| {
            let (q, c, g) = layer.forward(t, p, &cfg.decoder, v[0], v[1], v[2], None)?;
            let a = probe(t, q, 39)?;
            let b = probe(t, c, 40)?;
            let g = probe(t, g.expect("gated"), 41)?;
            let s = t.add(a, b)?;
            t.add(s, g)
        },
    )?;
    s.module("mask_head", st, &["decoder.head_norm", "decoder.mask_head"], vec![("q", q.clone()), ("pixels", pixels.clone())], |t, p, v| {
        let nq = model.decoder.head_norm.forward(t, p, v[0])?;
        let m = model.decoder.mask_head.forward(t, p, nq, v[1])?;
        probe(t, m, 42)
    })?;
    s.module("similarity_scores", st, &["decoder.cls"], vec![("q", q.clone()), ("c", c.clone())], |t, p, v| {
        let y = similarity_scores(t, p, &model.decoder.cls, v[0], v[1])?;
        probe(t, y, 43)
    })?;
    let refiner = model.refiner.as_ref().expect("tiny model has a refiner");
    let raw = random(&[2, hw, hw], 208).map(|v| 4.0 * v);
    s.module("boundary_refiner", st, &["bar."], vec![("raw", raw), ("pixels", pixels.clone())], |t, p, v| {
        let y = refiner.refine_masks(t, p, v[0], v[1], cfg.bar.eps)?;
        probe(t, y, 44)
    })?;
    let sample = tiny_sample();
    let w = LossWeights::default();
    s.module("segmentation_loss", st, &[""], Vec::new(), |t, p, _| Ok(model.loss(t, p, &sample, &w)?.total))?;
    Ok(())
}

/// Runs every check; errors only when a check cannot be evaluated.
pub fn run_suite(opts: &GradCheckOptions) -> Result<SuiteReport> {
    let mut s = Suite {
        opts,
        entries: Vec::new(),
    };
    ops(&mut s)?;
    modules(&mut s)?;
    Ok(SuiteReport {
        entries: s.entries,
        tolerance: opts.tolerance,
    })
}
