//! Component ablation: train every variant on every seed, evaluate on the
//! held-out split and tabulate.

use std::io::Write;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Evaluation};
use crate::model::Model;
use crate::synth::{generate_set, SceneSample};
use crate::train::{train, TrainSummary};

/// Training and held-out scenes for `cfg` under `seed`.
pub fn datasets(cfg: &RunConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let spec = cfg.data.spec();
    Ok((
        generate_set(&spec, seed, cfg.data.train_ids())?,
        generate_set(&spec, seed, cfg.data.heldout_ids())?,
    ))
}

pub struct TrainedRun {
    pub model: Model,
    pub summary: TrainSummary,
    pub eval: Evaluation,
    /// Evaluation with the refiner bypassed; present when the model has one.
    pub eval_no_bar: Option<Evaluation>,
}

/// Initializes from `seed`, trains on `train_set` and evaluates on `heldout`.
pub fn run(
    cfg: &RunConfig,
    seed: u64,
    train_set: &[SceneSample],
    heldout: &[SceneSample],
    log: &mut dyn Write,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut model = Model::new(&cfg.model(), seed)?;
    let summary = train(&mut model, train_set, &cfg.optim, &cfg.loss, seed, log)?;
    let eval = evaluate(&model, heldout, &EvalOptions::for_model(&model))?;
    let eval_no_bar = match model.refiner {
        Some(_) => Some(evaluate(&model, heldout, &EvalOptions::raw())?),
        None => None,
    };
    Ok(TrainedRun {
        model,
        summary,
        eval,
        eval_no_bar,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// `None` on mean rows.
    pub seed: Option<u64>,
    pub giou: f64,
    pub ciou: f64,
    pub gbiou: f64,
    pub cbiou: f64,
    pub selection_accuracy: f64,
    pub oracle_iou: f64,
    pub gbiou_no_bar: Option<f64>,
    pub cbiou_no_bar: Option<f64>,
    pub cond_drift: Vec<f64>,
}

impl AblationRow {
    fn new(variant: &str, seed: u64, run: &TrainedRun) -> Self {
        let r = &run.eval.report;
        Self {
            variant: variant.to_string(),
            seed: Some(seed),
            giou: r.giou,
            ciou: r.ciou,
            gbiou: r.gbiou,
            cbiou: r.cbiou,
            selection_accuracy: r.selection_accuracy,
            oracle_iou: r.oracle.mean_oracle_iou,
            gbiou_no_bar: run.eval_no_bar.as_ref().map(|e| e.report.gbiou),
            cbiou_no_bar: run.eval_no_bar.as_ref().map(|e| e.report.cbiou),
            cond_drift: r.cond_drift.clone(),
        }
    }

    fn mean(variant: &str, rows: &[&AblationRow]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&AblationRow) -> Option<f64>| {
            rows.iter().map(|r| f(r)).sum::<Option<f64>>().map(|s| s / n)
        };
        let width = rows.first().map_or(0, |r| r.cond_drift.len());
        Self {
            variant: variant.to_string(),
            seed: None,
            giou: avg(&|r| r.giou),
            ciou: avg(&|r| r.ciou),
            gbiou: avg(&|r| r.gbiou),
            cbiou: avg(&|r| r.cbiou),
            selection_accuracy: avg(&|r| r.selection_accuracy),
            oracle_iou: avg(&|r| r.oracle_iou),
            gbiou_no_bar: avg_opt(&|r| r.gbiou_no_bar),
            cbiou_no_bar: avg_opt(&|r| r.cbiou_no_bar),
            cond_drift: (0..width).map(|i| avg(&|r| r.cond_drift[i])).collect(),
        }
    }
}

/// Full-model versus baseline on the samples the baseline gets wrong.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Recovery {
    pub seed: u64,
    /// Held-out samples whose baseline selected IoU is below 0.5.
    pub failures: usize,
    pub baseline_iou: f64,
    pub full_iou: f64,
    pub baseline_oracle: f64,
    pub full_oracle: f64,
    pub margin: f64,
}

fn recovery(seed: u64, baseline: &Evaluation, full: &Evaluation) -> Recovery {
    let idx: Vec<usize> = baseline
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.selected_iou < 0.5)
        .map(|(i, _)| i)
        .collect();
    let mean = |e: &Evaluation, f: fn(&crate::metrics::EvalRecord) -> f64| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| f(&e.records[i])).sum::<f64>() / idx.len() as f64
        }
    };
    let baseline_iou = mean(baseline, |r| r.selected_iou);
    let full_iou = mean(full, |r| r.selected_iou);
    Recovery {
        seed,
        failures: idx.len(),
        baseline_iou,
        full_iou,
        baseline_oracle: mean(baseline, |r| r.oracle_iou),
        full_oracle: mean(full, |r| r.oracle_iou),
        margin: full_iou - baseline_iou,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Per-seed rows grouped by variant, each group followed by its mean row.
    pub rows: Vec<AblationRow>,
    /// Present when both `baseline` and `full` ran.
    pub recovery: Vec<Recovery>,
}

impl AblationTable {
    pub fn mean(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed.is_none())
    }

    pub fn mean_recovery_margin(&self) -> Option<f64> {
        (!self.recovery.is_empty())
            .then(|| self.recovery.iter().map(|r| r.margin).sum::<f64>() / self.recovery.len() as f64)
    }

    /// Plain-text table, one line per row.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<9} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "variant", "seed", "gIoU", "cIoU", "gBIoU", "cBIoU", "acc", "oracle"
        );
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |v| v.to_string());
            s.push_str(&format!(
                "{:<9} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.3} {:>7.4}\n",
                r.variant, seed, r.giou, r.ciou, r.gbiou, r.cbiou, r.selection_accuracy, r.oracle_iou
            ));
        }
        s
    }
}

/// Trains and evaluates each variant on each seed. Progress lines go to
/// `progress`; the datasets depend only on the seed, so all variants of a
/// seed see the same scenes.
pub fn ablate(base: &RunConfig, variants: &[&str], seeds: &[u64], progress: &mut dyn Write) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("ablation needs at least one variant and one seed".into()));
    }
    let configs: Vec<RunConfig> = variants.iter().map(|v| base.variant(v)).collect::<Result<_>>()?;
    let mut per_variant: Vec<Vec<AblationRow>> = vec![Vec::new(); variants.len()];
    let mut recoveries = Vec::new();
    for &seed in seeds {
        let (train_set, heldout) = datasets(base, seed)?;
        let mut baseline: Option<Evaluation> = None;
        let mut full: Option<Evaluation> = None;
        for (i, (name, cfg)) in variants.iter().zip(&configs).enumerate() {
            let r = run(cfg, seed, &train_set, &heldout, &mut std::io::sink())?;
            let row = AblationRow::new(name, seed, &r);
            writeln!(
                progress,
                "{name} seed {seed}: gIoU {:.4} acc {:.3}",
                row.giou, row.selection_accuracy
            )?;
            per_variant[i].push(row);
            match *name {
                "baseline" => baseline = Some(r.eval),
                "full" => full = Some(r.eval),
                _ => {}
            }
        }
        if let (Some(b), Some(f)) = (&baseline, &full) {
            recoveries.push(recovery(seed, b, f));
        }
    }
    let mut rows = Vec::new();
    for (name, group) in variants.iter().zip(per_variant) {
        let refs: Vec<&AblationRow> = group.iter().collect();
        let mean = AblationRow::mean(name, &refs);
        rows.extend(group);
        rows.push(mean);
    }
    Ok(AblationTable {
        variants: variants.iter().map(|v| v.to_string()).collect(),
        seeds: seeds.to_vec(),
        rows,
        recovery: recoveries,
    })
}
