//! Query decoder with bidirectional semantic flow.
//!
//! Each layer runs, in order: visual cross-attention, optional semantic
//! cross-attention with gated fusion, self-attention, optional condition
//! refinement, and a feed-forward block. Attention and FFN sublayers are
//! pre-norm with residuals; condition refinement is the bare residual
//! `C + MHA(C, Q, Q)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the semantic cross-attention draws its keys and values from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticSource {
    /// Condition embeddings.
    #[default]
    Condition,
    /// Pixel features; a parameter-matched control for the condition path.
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub semantic_refinement: bool,
    pub condition_refinement: bool,
    pub masked_attention: bool,
    pub semantic_source: SemanticSource,
    /// Width of the raw condition embeddings fed to the projector.
    pub condition_dim: usize,
    pub projector_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            queries: 16,
            dim: 64,
            heads: 4,
            semantic_refinement: true,
            condition_refinement: true,
            masked_attention: false,
            semantic_source: SemanticSource::Condition,
            condition_dim: 32,
            projector_hidden: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.queries == 0 || self.dim == 0 || self.condition_dim == 0 || self.projector_hidden == 0 {
            return Err(Error::Config("decoder sizes must all be ≥ 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SemanticBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    /// `W_g`: `2d -> d`.
    pub gate: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub vis_norm: LayerNorm,
    pub vis_attn: MultiHeadAttention,
    pub semantic: Option<SemanticBlock>,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub refine: Option<MultiHeadAttention>,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// Three-layer query MLP whose output is dotted with every pixel feature.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub layers: [Linear; 3],
}

/// Tape handles for one layer's outputs.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub queries: Var,
    pub conditions: Var,
    pub gate: Option<Var>,
    /// `[N × H × W]` mask logits.
    pub masks: Var,
    /// `[N]` similarity scores.
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct TraceVars {
    pub initial_queries: Var,
    pub initial_conditions: Var,
    pub layers: Vec<LayerVars>,
}

impl TraceVars {
    pub fn last(&self) -> &LayerVars {
        self.layers.last().expect("decoder has at least one layer")
    }

    pub fn snapshot(&self, tape: &Tape) -> DecoderTrace {
        DecoderTrace {
            initial_conditions: tape.value(self.initial_conditions).clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    queries: tape.value(l.queries).clone(),
                    conditions: tape.value(l.conditions).clone(),
                    gate: l.gate.map(|g| tape.value(g).clone()),
                    masks: tape.value(l.masks).clone(),
                    scores: tape.value(l.scores).clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub queries: Tensor,
    pub conditions: Tensor,
    pub gate: Option<Tensor>,
    pub masks: Tensor,
    pub scores: Tensor,
}

/// Per-layer values of one decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTrace {
    pub initial_conditions: Tensor,
    pub layers: Vec<LayerRecord>,
}

impl DecoderTrace {
    pub fn last(&self) -> &LayerRecord {
        self.layers.last().expect("decoder has at least one layer")
    }

    pub fn bit_eq(&self, other: &DecoderTrace) -> bool {
        let opt_eq = |a: &Option<Tensor>, b: &Option<Tensor>| match (a, b) {
            (Some(a), Some(b)) => a.bit_eq(b),
            (None, None) => true,
            _ => false,
        };
        self.initial_conditions.bit_eq(&other.initial_conditions)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.queries.bit_eq(&b.queries)
                    && a.conditions.bit_eq(&b.conditions)
                    && opt_eq(&a.gate, &b.gate)
                    && a.masks.bit_eq(&b.masks)
                    && a.scores.bit_eq(&b.scores)
            })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Final-layer selection: the query with the highest score and its mask logits.
pub fn select_mask(trace: &DecoderTrace) -> (usize, Tensor) {
    let last = trace.last();
    let idx = argmax(last.scores.data());
    let hw = &last.masks.shape()[1..];
    let mask = Tensor::new(hw, last.masks.row(idx).to_vec()).expect("mask row");
    (idx, mask)
}

/// `Q⁽⁰⁾ = learned + S` with `S` broadcast over rows.
pub fn init_queries(tape: &mut Tape, learned: Var, seg: Var) -> Result<Var> {
    tape.add_bias(learned, seg)
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(store, init, &format!("{name}.fc1"), dim, dim)?,
                Linear::new(store, init, &format!("{name}.fc2"), dim, dim)?,
                Linear::new(store, init, &format!("{name}.fc3"), dim, dim)?,
            ],
        })
    }

    pub fn embed(&self, tape: &mut Tape, p: &Bound, q: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, p, q)?;
        let h = tape.gelu(h)?;
        let h = self.layers[1].forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        self.layers[2].forward(tape, p, h)
    }

    /// `q[N×d]`, `pixels[d×H×W]` → logits `[N×H×W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, pixels: Var) -> Result<Var> {
        let (d, h, w) = match *tape.shape(pixels) {
            [d, h, w] => (d, h, w),
            ref s => return shape_err("mask_head", format!("pixel features must be d×H×W, got {s:?}")),
        };
        let e = self.embed(tape, p, q)?;
        let n = tape.shape(e)[0];
        if tape.shape(e)[1] != d {
            return shape_err("mask_head", format!("query dim {} vs pixel dim {d}", tape.shape(e)[1]));
        }
        let flat = tape.reshape(pixels, &[d, h * w])?;
        let logits = tape.matmul(e, flat)?;
        tape.reshape(logits, &[n, h, w])
    }
}

/// `s_i = ⟨W_cls q_i, mean(C)⟩ / √d`.
pub fn similarity_scores(tape: &mut Tape, p: &Bound, cls: &Linear, q: Var, c: Var) -> Result<Var> {
    let d = cls.out_dim;
    if tape.shape(c).len() != 2 || tape.shape(c)[1] != d {
        return shape_err("similarity_scores", format!("conditions {:?} for dim {d}", tape.shape(c)));
    }
    let proj = cls.forward(tape, p, q)?;
    let n = tape.shape(proj)[0];
    let pooled = tape.mean_rows(c)?;
    let pooled = tape.reshape(pooled, &[d, 1])?;
    let s = tape.matmul(proj, pooled)?;
    let s = tape.reshape(s, &[n])?;
    tape.scale(s, 1.0 / (d as f64).sqrt())
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.heads);
        let semantic = if cfg.semantic_refinement {
            Some(SemanticBlock {
                norm: LayerNorm::new(store, &format!("{name}.sem_norm"), d)?,
                attn: MultiHeadAttention::new(store, init, &format!("{name}.sem_attn"), d, h)?,
                gate: Linear::new(store, init, &format!("{name}.gate"), 2 * d, d)?,
            })
        } else {
            None
        };
        let refine = if cfg.condition_refinement {
            Some(MultiHeadAttention::new(store, init, &format!("{name}.cond_attn"), d, h)?)
        } else {
            None
        };
        Ok(Self {
            vis_norm: LayerNorm::new(store, &format!("{name}.vis_norm"), d)?,
            vis_attn: MultiHeadAttention::new(store, init, &format!("{name}.vis_attn"), d, h)?,
            semantic,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d, h)?,
            refine,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d)?,
        })
    }

    /// `Q + MHA(LN(Q), F, F)`.
    pub fn visual_cross_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q: Var,
        features: Var,
        blocked: Option<&[bool]>,
    ) -> Result<Var> {
        let n = self.vis_norm.forward(tape, p, q)?;
        let (a, _) = self.vis_attn.forward_traced(tape, p, n, features, features, blocked)?;
        tape.add(q, a)
    }

    /// `Q_vis + MHA(LN(Q_vis), K, K)` where `K` is the condition set (or the
    /// pixel features for the visual control).
    pub fn semantic_cross_attention(&self, tape: &mut Tape, p: &Bound, q_vis: Var, keys: Var) -> Result<Var> {
        let sem = self.semantic_block()?;
        let n = sem.norm.forward(tape, p, q_vis)?;
        let a = sem.attn.forward(tape, p, n, keys, keys)?;
        tape.add(q_vis, a)
    }

    /// Returns `(Q_fused, g)` with `g = σ(W_g [Q_vis ‖ Q_sem])`.
    pub fn adaptive_fusion(&self, tape: &mut Tape, p: &Bound, q_vis: Var, q_sem: Var) -> Result<(Var, Var)> {
        let sem = self.semantic_block()?;
        let cat = tape.concat(&[q_vis, q_sem], 1)?;
        let logits = sem.gate.forward(tape, p, cat)?;
        let g = tape.sigmoid(logits)?;
        let fused = tape.blend(g, q_vis, q_sem)?;
        Ok((fused, g))
    }

    /// `Q + MHA(LN(Q), LN(Q), LN(Q))`.
    pub fn self_attention(&self, tape: &mut Tape, p: &Bound, q: Var) -> Result<Var> {
        let n = self.self_norm.forward(tape, p, q)?;
        let a = self.self_attn.forward(tape, p, n, n, n)?;
        tape.add(q, a)
    }

    /// `C + MHA(C, Q_s, Q_s)`.
    pub fn condition_refinement(&self, tape: &mut Tape, p: &Bound, c: Var, q_s: Var) -> Result<Var> {
        let attn = self
            .refine
            .as_ref()
            .ok_or_else(|| Error::Invalid("condition refinement is disabled".into()))?;
        let a = attn.forward(tape, p, c, q_s, q_s)?;
        tape.add(c, a)
    }

    pub fn feed_forward(&self, tape: &mut Tape, p: &Bound, q: Var) -> Result<Var> {
        let n = self.ffn_norm.forward(tape, p, q)?;
        let f = self.ffn.forward(tape, p, n)?;
        tape.add(q, f)
    }

    fn semantic_block(&self) -> Result<&SemanticBlock> {
        self.semantic
            .as_ref()
            .ok_or_else(|| Error::Invalid("semantic refinement is disabled".into()))
    }

    /// One full layer; returns `(Q⁽ˡ⁾, C⁽ˡ⁾, g⁽ˡ⁾)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cfg: &DecoderConfig,
        q: Var,
        c: Var,
        features: Var,
        blocked: Option<&[bool]>,
    ) -> Result<(Var, Var, Option<Var>)> {
        let q_vis = self.visual_cross_attention(tape, p, q, features, blocked)?;
        let (q_fused, gate) = if self.semantic.is_some() {
            let keys = match cfg.semantic_source {
                SemanticSource::Condition => c,
                SemanticSource::Visual => features,
            };
            let q_sem = self.semantic_cross_attention(tape, p, q_vis, keys)?;
            let (f, g) = self.adaptive_fusion(tape, p, q_vis, q_sem)?;
            (f, Some(g))
        } else {
            (q_vis, None)
        };
        let q_s = self.self_attention(tape, p, q_fused)?;
        let c = if self.refine.is_some() {
            self.condition_refinement(tape, p, c, q_s)?
        } else {
            c
        };
        let q_out = self.feed_forward(tape, p, q_s)?;
        Ok((q_out, c, gate))
    }
}

/// The stacked decoder with its learned queries and shared heads.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub query_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub head_norm: LayerNorm,
    pub mask_head: MaskHead,
    pub cls: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let qname = format!("{name}.query_embed");
        let query_embed = store.add(
            &qname,
            init.xavier_uniform(&qname, &[cfg.queries, cfg.dim], cfg.queries, cfg.dim),
        )?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, init, &format!("{name}.layer{l}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            query_embed,
            layers,
            head_norm: LayerNorm::new(store, &format!("{name}.head_norm"), cfg.dim)?,
            mask_head: MaskHead::new(store, init, &format!("{name}.mask_head"), cfg.dim)?,
            cls: Linear::new(store, init, &format!("{name}.cls"), cfg.dim, cfg.dim)?,
        })
    }

    /// Mask logits and scores read from `q` through the shared heads.
    pub fn heads(&self, tape: &mut Tape, p: &Bound, q: Var, c: Var, pixels: Var) -> Result<(Var, Var)> {
        let n = self.head_norm.forward(tape, p, q)?;
        let masks = self.mask_head.forward(tape, p, n, pixels)?;
        let scores = similarity_scores(tape, p, &self.cls, n, c)?;
        Ok((masks, scores))
    }

    fn attention_mask(&self, tape: &mut Tape, p: &Bound, q: Var, pixels: Var) -> Result<Vec<bool>> {
        let n = self.head_norm.forward(tape, p, q)?;
        let masks = self.mask_head.forward(tape, p, n, pixels)?;
        Ok(tape.value(masks).data().iter().map(|&v| v < 0.0).collect())
    }

    /// Runs all layers. `seg` is the `[d]` segmentation embedding, `conditions`
    /// `[T×d]`, `features` `[P×d]` and `pixels` `[d×H×W]` with `P = H·W`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seg: Var,
        conditions: Var,
        features: Var,
        pixels: Var,
    ) -> Result<TraceVars> {
        let d = self.cfg.dim;
        if tape.shape(conditions).len() != 2 || tape.shape(conditions)[1] != d {
            return shape_err("decoder", format!("conditions {:?} for dim {d}", tape.shape(conditions)));
        }
        if tape.shape(features).len() != 2 || tape.shape(features)[1] != d {
            return shape_err("decoder", format!("features {:?} for dim {d}", tape.shape(features)));
        }
        let q0 = init_queries(tape, p[self.query_embed], seg)?;
        let mut q = q0;
        let mut c = conditions;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let blocked = if self.cfg.masked_attention {
                Some(self.attention_mask(tape, p, q, pixels)?)
            } else {
                None
            };
            let (nq, nc, gate) = layer.forward(tape, p, &self.cfg, q, c, features, blocked.as_deref())?;
            let (masks, scores) = self.heads(tape, p, nq, nc, pixels)?;
            layers.push(LayerVars {
                queries: nq,
                conditions: nc,
                gate,
                masks,
                scores,
            });
            q = nq;
            c = nc;
        }
        Ok(TraceVars {
            initial_queries: q0,
            initial_conditions: conditions,
            layers,
        })
    }

    /// Zeroes the value projections and output biases of every semantic and
    /// condition-refinement attention, so both new paths inject nothing.
    pub fn silence_semantic_paths(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            if let Some(sem) = &layer.semantic {
                sem.attn.silence(store);
            }
            if let Some(r) = &layer.refine {
                r.silence(store);
            }
        }
    }

    /// Zeroes every fusion-gate weight and bias, giving `g ≡ 0.5`.
    pub fn zero_gates(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            if let Some(sem) = &layer.semantic {
                sem.gate.zero(store);
            }
        }
    }
}
