//! Matched segmentation losses with deep supervision.

use serde::{Deserialize, Serialize};

use crate::decoder::TraceVars;
use crate::error::{shape_err, Error, Result};
use crate::matching::{hungarian_match, Assignment};
use crate::tape::{sigmoid, softplus, Tape, Var};
use crate::tensor::Tensor;

pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            mask: 5.0,
            dice: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.mask, self.dice].iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be positive: {self:?}")))
        }
    }
}

/// Soft dice loss against a binary `gt` of the same shape. An `H×W` input is
/// one mask; a `K×H×W` input gives the mean over its `K` masks.
pub fn dice_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(logits) != gt.shape() {
        return shape_err("dice_loss", format!("{:?} vs {:?}", tape.shape(logits), gt.shape()));
    }
    let rows = if gt.rank() == 3 { gt.shape()[0] } else { 1 };
    let width = gt.len() / rows;
    let flat_shape = [rows, width];
    let x = tape.reshape(logits, &flat_shape)?;
    let g = gt.clone().reshape(&flat_shape)?;
    let p = tape.sigmoid(x)?;
    let pg = tape.mul_const(p, &g)?;
    let inter = tape.sum_last(pg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_const(num, DICE_SMOOTHING)?;
    let psum = tape.sum_last(p)?;
    let gsum: Vec<f64> = g.data().chunks_exact(width).map(|r| r.iter().sum::<f64>() + DICE_SMOOTHING).collect();
    let gsum = tape.constant(Tensor::new(&[rows], gsum)?)?;
    let den = tape.add(psum, gsum)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Mean binary cross-entropy with logits over all pixels.
pub fn mask_bce_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, gt)
}

/// Binary cross-entropy on scores: target 1 at `positive`, 0 elsewhere.
pub fn class_ce_loss(tape: &mut Tape, scores: Var, positive: Option<usize>) -> Result<Var> {
    let n = tape.value(scores).len();
    let mut target = vec![0.0; n];
    if let Some(i) = positive {
        if i >= n {
            return Err(Error::Invalid(format!("positive index {i} out of {n} queries")));
        }
        target[i] = 1.0;
    }
    let t = Tensor::new(tape.shape(scores), target)?;
    tape.bce_with_logits(scores, &t)
}

fn dice_value(logits: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
    for (&l, &g) in logits.iter().zip(gt) {
        let p = sigmoid(l);
        inter += p * g;
        ps += p;
        gs += g;
    }
    1.0 - (2.0 * inter + DICE_SMOOTHING) / (ps + gs + DICE_SMOOTHING)
}

fn bce_value(logits: &[f64], gt: &[f64]) -> f64 {
    logits.iter().zip(gt).map(|(&l, &g)| softplus(l) - l * g).sum::<f64>() / logits.len() as f64
}

/// Matching cost `[N×K]` between predicted masks `[N×H×W]` with scores `[N]`
/// and ground-truth masks `[K×H×W]`; column `referred` is the target of the
/// selection head.
pub fn cost_matrix(masks: &Tensor, scores: &Tensor, gt: &Tensor, referred: usize, w: &LossWeights) -> Result<Tensor> {
    if masks.rank() < 2 || gt.rank() != masks.rank() || masks.shape()[1..] != gt.shape()[1..] {
        return shape_err("cost_matrix", format!("masks {:?} vs targets {:?}", masks.shape(), gt.shape()));
    }
    let (n, k) = (masks.shape()[0], gt.shape()[0]);
    if scores.len() != n || referred >= k {
        return shape_err("cost_matrix", format!("{} scores / referred {referred} for {n}×{k}", scores.len()));
    }
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        let p = sigmoid(scores.data()[i]);
        let m = masks.row(i);
        for j in 0..k {
            let g = gt.row(j);
            let cls = if j == referred { -p } else { -(1.0 - p) };
            data.push(w.cls * cls + w.mask * bce_value(m, g) + w.dice * dice_value(m, g));
        }
    }
    Tensor::new(&[n, k], data)
}

/// Weighted loss components of one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerLoss {
    pub layer: usize,
    pub cls: f64,
    pub mask: f64,
    pub dice: f64,
    pub total: f64,
}

/// Ground truth for one scene: `[K×H×W]` binary masks and the referred index.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub masks: &'a Tensor,
    pub referred: usize,
}

pub struct SegmentationLoss {
    pub total: Var,
    pub layers: Vec<LayerLoss>,
    pub assignments: Vec<Assignment>,
    /// Per layer, the weighted `(cls, mask, dice)` nodes.
    pub terms: Vec<[Var; 3]>,
}

/// Loss of one layer's `masks[N×H×W]` and `scores[N]` under an assignment.
pub fn matched_loss(
    tape: &mut Tape,
    masks: Var,
    scores: Var,
    target: Target<'_>,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<[Var; 3]> {
    let picked = tape.gather_rows(masks, &assignment.rows)?;
    let bce = mask_bce_loss(tape, picked, target.masks)?;
    let dice = dice_loss(tape, picked, target.masks)?;
    let cls = class_ce_loss(tape, scores, Some(assignment.rows[target.referred]))?;
    Ok([tape.scale(cls, w.cls)?, tape.scale(bce, w.mask)?, tape.scale(dice, w.dice)?])
}

/// Deep-supervised loss: every layer is matched against all `K` objects
/// and contributes `λ_cls·CE + λ_mask·BCE + λ_dice·Dice`.
pub fn segmentation_loss(tape: &mut Tape, trace: &TraceVars, target: Target<'_>, w: &LossWeights) -> Result<SegmentationLoss> {
    let mut total: Option<Var> = None;
    let mut layers = Vec::with_capacity(trace.layers.len());
    let mut assignments = Vec::with_capacity(trace.layers.len());
    let mut terms = Vec::with_capacity(trace.layers.len());
    for (l, lv) in trace.layers.iter().enumerate() {
        let cost = cost_matrix(tape.value(lv.masks), tape.value(lv.scores), target.masks, target.referred, w)?;
        let a = hungarian_match(&cost)?;
        let [cls, mask, dice] = matched_loss(tape, lv.masks, lv.scores, target, &a, w)?;
        let s = tape.add(cls, mask)?;
        let layer_total = tape.add(s, dice)?;
        layers.push(LayerLoss {
            layer: l,
            cls: tape.value(cls).item(),
            mask: tape.value(mask).item(),
            dice: tape.value(dice).item(),
            total: tape.value(layer_total).item(),
        });
        total = Some(match total {
            None => layer_total,
            Some(t) => tape.add(t, layer_total)?,
        });
        assignments.push(a);
        terms.push([cls, mask, dice]);
    }
    Ok(SegmentationLoss {
        total: total.ok_or_else(|| Error::Invalid("empty trace".into()))?,
        layers,
        assignments,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let l = mask_bce_loss(&mut tape, x, &Tensor::ones(&[3, 3])).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn class_ce_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[4])).unwrap();
        let l = class_ce_loss(&mut tape, s, Some(2)).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let s = tape.constant(Tensor::new(&[3], vec![-50.0, 50.0, -50.0]).unwrap()).unwrap();
        let l = class_ce_loss(&mut tape, s, Some(1)).unwrap();
        assert!(tape.value(l).item() <= 1e-20);
        assert!(class_ce_loss(&mut tape, s, Some(3)).is_err());
    }

    #[test]
    fn dice_perfect_and_empty() {
        let mut gt = Tensor::zeros(&[4, 4]);
        for i in [5, 6, 9, 10] {
            gt.data_mut()[i] = 1.0;
        }
        let logits = gt.map(|g| if g > 0.0 { 50.0 } else { -50.0 });
        let mut tape = Tape::new();
        let x = tape.constant(logits).unwrap();
        let l = dice_loss(&mut tape, x, &gt).unwrap();
        assert!(tape.value(l).item() <= 1.0 / 9.0);
        let x = tape.constant(Tensor::full(&[4, 4], -50.0)).unwrap();
        let l = dice_loss(&mut tape, x, &Tensor::zeros(&[4, 4])).unwrap();
        assert!(tape.value(l).item() < 1e-15);
    }
}
