//! Held-out evaluation: decode, select, optionally refine, and score.

use serde::Serialize;

use crate::decoder::{argmax, DecoderTrace};
use crate::error::Result;
use crate::metrics::{
    band_width, binarize, boundary_counts, build_report, condition_cosines, counts, gate_summary, oracle_analysis,
    to_bool, Counts, EvalRecord, Report,
};
use crate::model::Model;
use crate::synth::SceneSample;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Apply the boundary refiner to the selected mask when the model has one.
    pub refine: bool,
    pub eps: f64,
}

impl EvalOptions {
    pub fn for_model(model: &Model) -> Self {
        Self {
            refine: model.refiner.is_some(),
            eps: model.cfg.bar.eps,
        }
    }

    pub fn raw() -> Self {
        Self { refine: false, eps: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub report: Report,
    /// Smallest and largest gate value seen, when the model has gates.
    pub gate_range: Option<(f64, f64)>,
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes")
    }
}

/// Decoder trace plus the final selected (and possibly refined) mask.
pub struct Decoded {
    pub trace: DecoderTrace,
    pub selected: usize,
    pub mask: Tensor,
    pub pixels: Tensor,
}

pub fn decode(model: &Model, sample: &SceneSample, opts: &EvalOptions) -> Result<Decoded> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false)?;
    let fwd = model.forward(&mut tape, &p, sample)?;
    let last = fwd.trace.last();
    let selected = argmax(tape.value(last.scores).data());
    let mut mask = tape.gather_rows(last.masks, &[selected])?;
    if let (true, Some(refiner)) = (opts.refine, &model.refiner) {
        mask = refiner.refine_masks(&mut tape, &p, mask, fwd.pixels, opts.eps)?;
    }
    let m = tape.value(mask);
    let hw = m.shape()[1..].to_vec();
    Ok(Decoded {
        trace: fwd.trace.snapshot(&tape),
        selected,
        mask: m.clone().reshape(&hw)?,
        pixels: tape.value(fwd.pixels).clone(),
    })
}

fn record(sample: &SceneSample, d: &Decoded, gt_all: &Tensor) -> Result<EvalRecord> {
    let (h, w) = (gt_all.shape()[1], gt_all.shape()[2]);
    let gt = to_bool(gt_all.row(sample.referred));
    let pred = binarize(d.mask.data());
    let c = counts(&pred, &gt)?;
    let mut oracle = oracle_analysis(&d.trace.last().masks, d.selected, &gt)?;
    // The refined selection is itself a candidate.
    oracle.selected_iou = c.iou();
    if oracle.selected_iou > oracle.oracle_iou {
        oracle.oracle_iou = oracle.selected_iou;
        oracle.oracle_index = d.selected;
    }
    let gates = d
        .trace
        .layers
        .iter()
        .filter_map(|l| l.gate.as_ref())
        .map(|g| gate_summary(&[g.data().to_vec()])[0])
        .collect();
    Ok(EvalRecord {
        id: sample.id,
        selected_index: d.selected,
        oracle_index: oracle.oracle_index,
        selected_iou: oracle.selected_iou,
        oracle_iou: oracle.oracle_iou,
        counts: c,
        boundary: boundary_counts(&pred, &gt, h, w, band_width(h, w))?,
        gates,
        cond_cosine: condition_cosines(&d.trace),
    })
}

/// Evaluates `model` on `samples`; the model is never modified.
pub fn evaluate(model: &Model, samples: &[SceneSample], opts: &EvalOptions) -> Result<Evaluation> {
    let layers = model.cfg.decoder.layers;
    let mut records = Vec::with_capacity(samples.len());
    let mut gate_values: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut has_gates = false;
    let mut drift = vec![0.0; layers + 1];
    for s in samples {
        let d = decode(model, s, opts)?;
        let gt = s.target_masks(model.mask_stride())?;
        let r = record(s, &d, &gt)?;
        for (acc, v) in drift.iter_mut().zip(&r.cond_cosine) {
            *acc += v;
        }
        for (l, layer) in d.trace.layers.iter().enumerate() {
            if let Some(g) = &layer.gate {
                has_gates = true;
                gate_values[l].extend_from_slice(g.data());
            }
        }
        records.push(r);
    }
    let n = samples.len().max(1) as f64;
    let drift: Vec<f64> = drift
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 { 1.0 } else { v / n })
        .collect();
    let gate_range = has_gates.then(|| {
        gate_values.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let gates = if has_gates { gate_summary(&gate_values) } else { Vec::new() };
    let report = build_report(&records, gates, drift)?;
    Ok(Evaluation {
        records,
        report,
        gate_range,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub gbiou: f64,
    pub cbiou: f64,
    pub giou: f64,
    pub ciou: f64,
}

/// Boundary metrics of the refined selection for each `ε` (ascending).
/// The model must have a refiner; `ε = 1` leaves every mask untouched.
pub fn eps_sweep(model: &Model, samples: &[SceneSample], eps_list: &[f64]) -> Result<Vec<EpsRow>> {
    let mut eps: Vec<f64> = eps_list.to_vec();
    eps.sort_by(f64::total_cmp);
    let mut per_eps: Vec<(Vec<Counts>, Vec<Counts>)> = vec![(Vec::new(), Vec::new()); eps.len()];
    for s in samples {
        let gt_all = s.target_masks(model.mask_stride())?;
        let (h, w) = (gt_all.shape()[1], gt_all.shape()[2]);
        let gt = to_bool(gt_all.row(s.referred));
        let d = decode(model, s, &EvalOptions::raw())?;
        for (i, &e) in eps.iter().enumerate() {
            let pred = binarize(model.refine_one(&d.mask, &d.pixels, e)?.data());
            per_eps[i].0.push(boundary_counts(&pred, &gt, h, w, band_width(h, w))?);
            per_eps[i].1.push(counts(&pred, &gt)?);
        }
    }
    eps.iter()
        .zip(per_eps)
        .map(|(&e, (b, c))| {
            Ok(EpsRow {
                eps: e,
                gbiou: crate::metrics::giou(&b)?,
                cbiou: crate::metrics::ciou(&b)?,
                giou: crate::metrics::giou(&c)?,
                ciou: crate::metrics::ciou(&c)?,
            })
        })
        .collect()
}
