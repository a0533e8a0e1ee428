//! Boundary-aware mask refinement.
//!
//! A boundary band is found with a morphological gradient of the mask
//! probabilities; inside it a small CNN adds a `tanh`-bounded, `α`-scaled
//! residual to the raw logits. Outside the band logits pass through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamId, ParamStore};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::{pool3, PoolKind, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarConfig {
    pub enabled: bool,
    /// Morphological-gradient threshold `ε`.
    pub eps: f64,
    /// Compressed pixel channels `d_c`.
    pub channels: usize,
    pub alpha_init: f64,
}

impl Default for BarConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eps: 0.1,
            channels: 4,
            alpha_init: 0.1,
        }
    }
}

impl BarConfig {
    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        if self.channels == 0 {
            return Err(Error::Config("bar.channels must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("boundary threshold ε = {eps} outside (0, 1]")))
    }
}

/// `B = 1[(maxpool3(M) − minpool3(M)) > ε]` for probabilities `M[H×W]`.
pub fn boundary_mask(prob: &Tensor, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    let hi = pool3(PoolKind::Max, prob)?;
    let lo = pool3(PoolKind::Min, prob)?;
    let data = hi
        .data()
        .iter()
        .zip(lo.data())
        .map(|(a, b)| if a - b > eps { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(prob.shape(), data)
}

#[derive(Clone, Debug)]
pub struct RefinementNet {
    /// 1×1 compression `C -> d_c`.
    pub comp: Conv2d,
    /// 3×3 `(1 + d_c) -> d_c`.
    pub conv1: Conv2d,
    /// 3×3 `d_c -> 1`.
    pub conv2: Conv2d,
    pub alpha: ParamId,
}

impl RefinementNet {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, pixel_channels: usize, cfg: &BarConfig) -> Result<Self> {
        let dc = cfg.channels;
        Ok(Self {
            comp: Conv2d::new(store, init, &format!("{name}.comp"), pixel_channels, dc, 1, 1)?,
            conv1: Conv2d::new(store, init, &format!("{name}.refine1"), 1 + dc, dc, 3, 1)?,
            conv2: Conv2d::new(store, init, &format!("{name}.refine2"), dc, 1, 3, 1)?,
            alpha: store.add(&format!("{name}.alpha"), Tensor::new(&[1], vec![cfg.alpha_init])?)?,
        })
    }

    /// Zeroes every convolution, leaving `α` alone.
    pub fn zero(&self, store: &mut ParamStore) {
        self.comp.zero(store);
        self.conv1.zero(store);
        self.conv2.zero(store);
    }

    /// Refines `raw[N×H×W]` given `pixels[C×H×W]`.
    pub fn refine_masks(&self, tape: &mut Tape, p: &Bound, raw: Var, pixels: Var, eps: f64) -> Result<Var> {
        check_eps(eps)?;
        let (n, h, w) = match *tape.shape(raw) {
            [n, h, w] => (n, h, w),
            ref s => return shape_err("refine_masks", format!("masks must be N×H×W, got {s:?}")),
        };
        if tape.shape(pixels).len() != 3 || tape.shape(pixels)[1..] != [h, w] {
            return shape_err("refine_masks", format!("pixels {:?} for masks {:?}", tape.shape(pixels), [n, h, w]));
        }
        let bands: Vec<Tensor> = (0..n)
            .map(|i| {
                let prob = Tensor::new(&[h, w], tape.value(raw).row(i).iter().map(|&v| sigmoid(v)).collect())?;
                boundary_mask(&prob, eps)?.reshape(&[1, h, w])
            })
            .collect::<Result<_>>()?;
        if bands.iter().all(|b| b.data().iter().all(|&v| v == 0.0)) {
            return Ok(raw);
        }
        let comp = self.comp.forward(tape, p, pixels)?;
        let mut rows = Vec::with_capacity(n);
        for (i, band) in bands.iter().enumerate() {
            let m = tape.gather_rows(raw, &[i])?;
            if band.data().iter().all(|&v| v == 0.0) {
                rows.push(m);
                continue;
            }
            let x = tape.concat(&[m, comp], 0)?;
            let hdn = self.conv1.forward(tape, p, x)?;
            let hdn = tape.gelu(hdn)?;
            let r = self.conv2.forward(tape, p, hdn)?;
            let r = tape.tanh(r)?;
            let delta = tape.mul_scalar(r, p[self.alpha])?;
            let delta = tape.mul_const(delta, band)?;
            rows.push(tape.add(m, delta)?);
        }
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        tape.concat(&rows, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_has_no_boundary() {
        let b = boundary_mask(&Tensor::full(&[6, 6], 0.3), 0.1).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eps_one_saturates() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.data_mut()[..8].fill(1.0);
        assert!(boundary_mask(&m, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(boundary_mask(&m, 0.0).is_err());
        assert!(boundary_mask(&m, 1.5).is_err());
    }

    #[test]
    fn step_edge_band() {
        // Left half 0, right half 1 on a 4×6 map: columns 2 and 3 straddle the edge.
        let mut m = Tensor::zeros(&[4, 6]);
        for r in 0..4 {
            for c in 3..6 {
                m.data_mut()[r * 6 + c] = 1.0;
            }
        }
        let b = boundary_mask(&m, 0.1).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let expect = if c == 2 || c == 3 { 1.0 } else { 0.0 };
                assert_eq!(b.data()[r * 6 + c], expect);
            }
        }
    }
}
