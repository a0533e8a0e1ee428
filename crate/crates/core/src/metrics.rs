//! Mask metrics and analysis reports.
//!
//! Intersections and unions are accumulated as integer pixel counts so that
//! cumulative scores are exact ratios of integers.

use serde::Serialize;

use crate::decoder::DecoderTrace;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{pool3, PoolKind, Tensor};

/// Pixels with `sigmoid(logit) ≥ 0.5`.
pub fn binarize(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&v| v >= 0.0).collect()
}

pub fn to_bool(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&v| v > 0.5).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub inter: u64,
    pub union: u64,
}

impl Counts {
    /// `|∩|/|∪|`, defined as 1 when both masks are empty.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

pub fn counts(pred: &[bool], gt: &[bool]) -> Result<Counts> {
    if pred.len() != gt.len() {
        return shape_err("iou", format!("{} vs {} pixels", pred.len(), gt.len()));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        c.inter += (p && g) as u64;
        c.union += (p || g) as u64;
    }
    Ok(c)
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(counts(pred, gt)?.iou())
}

/// Cumulative IoU: `Σ∩ / Σ∪`.
pub fn ciou(records: &[Counts]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("cIoU of an empty set".into()));
    }
    let inter: u64 = records.iter().map(|c| c.inter).sum();
    let union: u64 = records.iter().map(|c| c.union).sum();
    Ok(Counts { inter, union }.iou())
}

/// Mean of per-sample IoUs.
pub fn giou(records: &[Counts]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("gIoU of an empty set".into()));
    }
    Ok(records.iter().map(|c| c.iou()).sum::<f64>() / records.len() as f64)
}

/// `max(1, round(0.02 · diagonal))`.
pub fn band_width(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// Mask minus its `d`-fold 3×3 erosion (edge-replicated borders).
pub fn boundary_band(mask: &[bool], h: usize, w: usize, d: usize) -> Result<Vec<bool>> {
    if mask.len() != h * w || d == 0 {
        return shape_err("boundary_band", format!("{} pixels for {h}×{w}, band {d}", mask.len()));
    }
    let mut eroded = Tensor::new(&[h, w], mask.iter().map(|&b| b as u8 as f64).collect())?;
    for _ in 0..d {
        eroded = pool3(PoolKind::Min, &eroded)?;
    }
    Ok(mask.iter().zip(eroded.data()).map(|(&m, &e)| m && e < 0.5).collect())
}

/// IoU between the boundary bands of `pred` and `gt`.
pub fn boundary_counts(pred: &[bool], gt: &[bool], h: usize, w: usize, d: usize) -> Result<Counts> {
    counts(&boundary_band(pred, h, w, d)?, &boundary_band(gt, h, w, d)?)
}

pub fn boundary_iou(pred: &[bool], gt: &[bool], h: usize, w: usize, d: usize) -> Result<f64> {
    Ok(boundary_counts(pred, gt, h, w, d)?.iou())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub oracle_index: usize,
    pub oracle_iou: f64,
    pub selected_iou: f64,
    pub gap: f64,
}

/// Best achievable IoU over all candidate masks `[N×H×W]` against `gt`.
pub fn oracle_analysis(masks: &Tensor, selected: usize, gt: &[bool]) -> Result<OracleResult> {
    if masks.rank() != 3 || selected >= masks.shape()[0] {
        return shape_err("oracle_analysis", format!("masks {:?}, selected {selected}", masks.shape()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    let mut selected_iou = 0.0;
    for i in 0..masks.shape()[0] {
        let v = iou(&binarize(masks.row(i)), gt)?;
        if v > best.1 {
            best = (i, v);
        }
        if i == selected {
            selected_iou = v;
        }
    }
    Ok(OracleResult {
        oracle_index: best.0,
        oracle_iou: best.1,
        selected_iou,
        gap: best.1 - selected_iou,
    })
}

/// Per-sample evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub id: usize,
    pub selected_index: usize,
    pub oracle_index: usize,
    pub selected_iou: f64,
    pub oracle_iou: f64,
    pub counts: Counts,
    pub boundary: Counts,
    /// Per layer `(mean, std)` of the fusion gate; empty without gates.
    pub gates: Vec<(f64, f64)>,
    /// Per layer (layer 0 first) mean cosine between `C⁽⁰⁾` and `C⁽ˡ⁾` rows.
    pub cond_cosine: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub failures: usize,
    pub failure_fraction: f64,
    pub misaligned: usize,
    /// Misaligned share of the failure set; 0 when there are no failures.
    pub misaligned_fraction: f64,
    pub mean_selected_iou: f64,
    pub mean_oracle_iou: f64,
}

/// Failure cases `selected < τ` and, within them, the misaligned cases
/// where a candidate with IoU ≥ τ existed.
pub fn misalignment_report(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<ThresholdReport>> {
    if records.is_empty() {
        return Err(Error::Invalid("misalignment report of an empty set".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let fails: Vec<&EvalRecord> = records.iter().filter(|r| r.selected_iou < t).collect();
            let mis = fails.iter().filter(|r| r.oracle_iou >= t).count();
            let mean = |f: fn(&EvalRecord) -> f64| {
                if fails.is_empty() {
                    0.0
                } else {
                    fails.iter().map(|r| f(r)).sum::<f64>() / fails.len() as f64
                }
            };
            ThresholdReport {
                threshold: t,
                failures: fails.len(),
                failure_fraction: fails.len() as f64 / records.len() as f64,
                misaligned: mis,
                misaligned_fraction: if fails.is_empty() { 0.0 } else { mis as f64 / fails.len() as f64 },
                mean_selected_iou: mean(|r| r.selected_iou),
                mean_oracle_iou: mean(|r| r.oracle_iou),
            }
        })
        .collect())
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-layer `(mean, std)` of gate values already grouped by layer.
pub fn gate_summary(per_layer: &[Vec<f64>]) -> Vec<(f64, f64)> {
    per_layer.iter().map(|v| mean_std(v.iter().copied())).collect()
}

/// Per-layer `(mean, std)` over every gate entry of every trace.
pub fn gate_statistics(traces: &[&DecoderTrace]) -> Result<Vec<(f64, f64)>> {
    let layers = traces.first().map_or(0, |t| t.layers.len());
    let mut per_layer = vec![Vec::new(); layers];
    for t in traces {
        for (l, rec) in t.layers.iter().enumerate() {
            let g = rec
                .gate
                .as_ref()
                .ok_or_else(|| Error::Invalid("gate statistics need semantic refinement".into()))?;
            per_layer[l].extend_from_slice(g.data());
        }
    }
    Ok(gate_summary(&per_layer))
}

/// Cosine of two rows; exactly 1 for bitwise-identical rows.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine between each condition token at layer 0 and at layer `l`;
/// entry 0 is 1 by definition.
pub fn condition_cosines(trace: &DecoderTrace) -> Vec<f64> {
    let c0 = &trace.initial_conditions;
    let t = c0.shape()[0];
    let mut out = vec![1.0];
    for layer in &trace.layers {
        let s: f64 = (0..t).map(|i| cosine(c0.row(i), layer.conditions.row(i))).sum();
        out.push(s / t as f64);
    }
    out
}

/// Per-layer mean of [`condition_cosines`] over traces.
pub fn condition_drift(traces: &[&DecoderTrace]) -> Vec<f64> {
    let per: Vec<Vec<f64>> = traces.iter().map(|t| condition_cosines(t)).collect();
    let layers = per.first().map_or(0, Vec::len);
    (0..layers)
        .map(|l| {
            if l == 0 {
                1.0
            } else {
                per.iter().map(|p| p[l]).sum::<f64>() / per.len() as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSummary {
    pub mean_selected_iou: f64,
    pub mean_oracle_iou: f64,
    pub mean_gap: f64,
    pub oracle_hits: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateRow {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

/// Aggregate evaluation report; serializes with a fixed key order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub ciou: f64,
    pub giou: f64,
    pub cbiou: f64,
    pub gbiou: f64,
    pub selection_accuracy: f64,
    pub oracle: OracleSummary,
    pub misalignment: Vec<ThresholdReport>,
    pub gates: Vec<GateRow>,
    pub cond_drift: Vec<f64>,
}

pub const MISALIGNMENT_THRESHOLDS: [f64; 2] = [0.5, 0.2];

/// Builds the report from per-sample records and the run-level gate and
/// condition-drift summaries.
pub fn build_report(records: &[EvalRecord], gates: Vec<(f64, f64)>, cond_drift: Vec<f64>) -> Result<Report> {
    let c: Vec<Counts> = records.iter().map(|r| r.counts).collect();
    let b: Vec<Counts> = records.iter().map(|r| r.boundary).collect();
    let n = records.len() as f64;
    for r in records {
        if r.oracle_iou < r.selected_iou {
            return Err(Error::Invalid(format!("sample {}: oracle IoU below selected IoU", r.id)));
        }
    }
    Ok(Report {
        ciou: ciou(&c)?,
        giou: giou(&c)?,
        cbiou: ciou(&b)?,
        gbiou: giou(&b)?,
        selection_accuracy: records.iter().filter(|r| r.selected_iou >= 0.5).count() as f64 / n,
        oracle: OracleSummary {
            mean_selected_iou: records.iter().map(|r| r.selected_iou).sum::<f64>() / n,
            mean_oracle_iou: records.iter().map(|r| r.oracle_iou).sum::<f64>() / n,
            mean_gap: records.iter().map(|r| r.oracle_iou - r.selected_iou).sum::<f64>() / n,
            oracle_hits: records.iter().filter(|r| r.selected_index == r.oracle_index).count(),
            samples: records.len(),
        },
        misalignment: misalignment_report(records, &MISALIGNMENT_THRESHOLDS)?,
        gates: gates
            .into_iter()
            .enumerate()
            .map(|(i, (mean, std))| GateRow { layer: i + 1, mean, std })
            .collect(),
        cond_drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(iou(&[false; 4], &a).unwrap(), 0.0);
        assert!(iou(&a, &[true]).is_err());
    }

    #[test]
    fn two_by_two_overlap() {
        // 2×2 squares on a 3×3 grid overlapping in one column pair: ∩ = 2, ∪ = 6.
        let mut p = vec![false; 9];
        let mut g = vec![false; 9];
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            p[i * 3 + j] = true;
        }
        for (i, j) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
            g[i * 3 + j] = true;
        }
        assert_eq!(iou(&p, &g).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn cumulative_examples() {
        let r = [Counts { inter: 2, union: 4 }, Counts { inter: 3, union: 6 }];
        assert_eq!(ciou(&r).unwrap(), 0.5);
        assert_eq!(giou(&r).unwrap(), 0.5);
        assert!(ciou(&[]).is_err());
    }

    #[test]
    fn band_width_default() {
        assert_eq!(band_width(24, 24), 1);
        assert_eq!(band_width(480, 640), 16);
    }
}
