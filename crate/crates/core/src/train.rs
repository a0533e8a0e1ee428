//! AdamW training loop with warmup and cosine decay.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LayerLoss, LossWeights};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::synth::SceneSample;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub batch_size: usize,
    /// Log the loss breakdown every this many steps.
    pub log_every: usize,
    /// Window (in steps) of the running loss that picks the best checkpoint.
    pub best_window: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 3000,
            warmup: 100,
            clip: 1.0,
            batch_size: 1,
            log_every: 10,
            best_window: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("optim.lr must be > 0 and optim.weight_decay ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optim betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.best_window == 0 {
            return Err(Error::Config("optim.batch_size, log_every and best_window must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based): linear warmup, then cosine to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Decoupled-weight-decay Adam. Decay applies to matrices and higher-rank
/// tensors only.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (param, grad)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let decay = if param.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
            }
        }
    }
}

fn clip_global(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Loss and gradients of one sample under the current parameters.
pub fn sample_gradients(model: &Model, sample: &SceneSample, w: &LossWeights) -> Result<(f64, Vec<LayerLoss>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true)?;
    let out = model.loss(&mut tape, &p, sample, w)?;
    tape.backward(out.total)?;
    let grads = p.grads(&tape);
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { op: "backward" });
    }
    Ok((tape.value(out.total).item(), out.layers, grads))
}

/// Mean total loss over `samples` without updating anything.
pub fn mean_loss(model: &Model, samples: &[SceneSample], w: &LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false)?;
        let out = model.loss(&mut tape, &p, s, w)?;
        sum += tape.value(out.total).item();
    }
    Ok(sum / samples.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean total loss per step (averaged over the batch).
    pub losses: Vec<f64>,
    /// Parameters at the lowest running-mean loss, and that step.
    pub best: Option<(usize, ParamStore)>,
}

/// Trains `model` in place on `data`, writing `step,layer,term,value` lines.
pub fn train(
    model: &mut Model,
    data: &[SceneSample],
    optim: &OptimConfig,
    weights: &LossWeights,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    optim.validate()?;
    weights.validate()?;
    if data.is_empty() && optim.steps > 0 {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut opt = AdamW::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5348_5546); // shuffle stream
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(optim.steps);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut window = 0.0;
    writeln!(log, "step,layer,term,value")?;
    for step in 0..optim.steps {
        let mut acc: Option<Vec<Tensor>> = None;
        let mut step_loss = 0.0;
        let mut breakdown: Vec<LayerLoss> = Vec::new();
        for _ in 0..optim.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &data[order[cursor]];
            cursor += 1;
            let (loss, layers, grads) = match sample_gradients(model, sample, weights) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, sample: sample.id }),
                Err(e) => return Err(e),
            };
            step_loss += loss / optim.batch_size as f64;
            breakdown = layers;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, g) in a.iter_mut().zip(&grads) {
                        for (u, v) in x.data_mut().iter_mut().zip(g.data()) {
                            *u += v;
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("batch_size ≥ 1");
        if optim.batch_size > 1 {
            let s = 1.0 / optim.batch_size as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        clip_global(&mut grads, optim.clip);
        opt.step(&mut model.store, &grads, optim.lr_at(step), optim);
        if step % optim.log_every == 0 || step + 1 == optim.steps {
            for l in &breakdown {
                for (term, v) in [("cls", l.cls), ("mask", l.mask), ("dice", l.dice), ("total", l.total)] {
                    writeln!(log, "{step},{},{term},{v:.6e}", l.layer)?;
                }
            }
        }
        losses.push(step_loss);
        window += step_loss;
        if step >= optim.best_window {
            window -= losses[step - optim.best_window];
        }
        if step + 1 >= optim.best_window && (step + 1) % optim.best_window == 0 {
            let mean = window / optim.best_window as f64;
            if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
                best = Some((mean, step + 1, model.store.clone()));
            }
        }
    }
    Ok(TrainSummary {
        steps: optim.steps,
        losses,
        best: best.map(|(_, s, p)| (s, p)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = OptimConfig {
            lr: 1.0,
            steps: 110,
            warmup: 10,
            ..OptimConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(109) < 0.01);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store);
        let g = vec![Tensor::new(&[2], vec![0.5, -3.0]).unwrap()];
        opt.step(&mut store, &g, 0.01, &OptimConfig::default());
        let d = store.tensors()[0].data();
        assert!((d[0] - 0.99).abs() < 1e-6 && (d[1] + 0.99).abs() < 1e-6);
    }
}
