//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor, so that entries whose true gradient is ~0 are
    /// judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per parameter (sampled without
    /// replacement); `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// Merges several reports under a common tolerance.
    pub fn merge(reports: impl IntoIterator<Item = GradReport>, tolerance: f64) -> Self {
        Self {
            params: reports.into_iter().flat_map(|r| r.params).collect(),
            tolerance,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    Ok(v)
}

/// Compares the tape's gradient of the scalar `f` with central differences
/// for every tensor in `params`.
pub fn grad_check<F>(f: F, params: &[(&str, Tensor)], opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|(_, p)| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check loss" });
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("leaf requires grad")).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, p)) in params.iter().enumerate() {
        let n = p.len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[e];
            max_rel = max_rel.max(rel_err(a, numeric, opts.floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            name: name.to_string(),
            checked: entries.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradReport {
        params: report,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn exact_quadratic() {
        let x = random(&[3, 4], 1);
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                t.sum(sq)
            },
            &[("x", x)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_backward_rule_fails() {
        // x ⊙ stopgrad(x): the analytic gradient is x, the true one 2x.
        let x = random(&[5], 2);
        let report = grad_check(
            |t, p| {
                let frozen = t.value(p[0]).clone();
                let y = t.mul_const(p[0], &frozen)?;
                t.sum(y)
            },
            &[("x", x)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err() > 0.4);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::zeros(&[2]);
        let r = grad_check(
            |t, p| {
                let y = t.div(p[0], p[0])?;
                t.sum(y)
            },
            &[("x", x)],
            &GradCheckOptions::default(),
        );
        assert!(r.is_err());
    }
}
