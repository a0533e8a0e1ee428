//! The full referring segmenter: pixel encoder, condition vocabulary and
//! projector, decoder, heads and the optional boundary refiner.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, TraceVars};
use crate::error::{Error, Result};
use crate::loss::{dice_loss, mask_bce_loss, segmentation_loss, LayerLoss, LossWeights, SegmentationLoss, Target};
use crate::nn::{Bound, Init, MlpProjector, ParamId, ParamStore};
use crate::refine::{BarConfig, RefinementNet};
use crate::synth::{encode_condition, PixelEncoder, SceneSample, VOCAB_SIZE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shape-affecting configuration of a [`Model`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub bar: BarConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.bar.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: ParamId,
    pub projector: MlpProjector,
    pub encoder: PixelEncoder,
    pub decoder: Decoder,
    pub refiner: Option<RefinementNet>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub pixels: Var,
    pub features: Var,
    pub raw_conditions: Var,
    pub trace: TraceVars,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = Init::new(seed);
        let d = &cfg.decoder;
        let mut store = ParamStore::new();
        let vocab = store.add("vocab.table", init.normal("vocab.table", &[VOCAB_SIZE, d.condition_dim], 1.0))?;
        let projector = MlpProjector::new(&mut store, init, "projector", d.condition_dim, d.projector_hidden, d.dim)?;
        let encoder = PixelEncoder::new(&mut store, init, "encoder", d.dim)?;
        let decoder = Decoder::new(&mut store, init, "decoder", d)?;
        let refiner = if cfg.bar.enabled {
            Some(RefinementNet::new(&mut store, init, "bar", d.dim, &cfg.bar)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            vocab,
            projector,
            encoder,
            decoder,
            refiner,
        })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bound> {
        self.store.bind(tape, requires_grad)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, sample: &SceneSample) -> Result<ForwardVars> {
        let image = tape.constant(sample.image.clone())?;
        self.forward_image(tape, p, image, sample)
    }

    /// As [`Model::forward`] with the image already on the tape.
    pub fn forward_image(&self, tape: &mut Tape, p: &Bound, image: Var, sample: &SceneSample) -> Result<ForwardVars> {
        let (pixels, features) = self.encoder.forward(tape, p, image)?;
        let raw = encode_condition(tape, p[self.vocab], &sample.condition)?;
        let conditions = self.projector.project(tape, p, raw)?;
        let pooled = tape.mean_rows(raw)?;
        let pooled = tape.reshape(pooled, &[1, self.cfg.decoder.condition_dim])?;
        let seg = self.projector.project(tape, p, pooled)?;
        let seg = tape.reshape(seg, &[self.cfg.decoder.dim])?;
        let trace = self.decoder.forward(tape, p, seg, conditions, features, pixels)?;
        Ok(ForwardVars {
            pixels,
            features,
            raw_conditions: raw,
            trace,
        })
    }

    /// Factor between image and mask resolution.
    pub fn mask_stride(&self) -> usize {
        2
    }

    /// Training loss: deep-supervised segmentation loss plus, when the
    /// refiner is present, the mask losses of the refined final-layer
    /// matched masks (reported as an extra row after the decoder layers).
    pub fn loss(&self, tape: &mut Tape, p: &Bound, sample: &SceneSample, w: &LossWeights) -> Result<ModelLoss> {
        let fwd = self.forward(tape, p, sample)?;
        let targets = sample.target_masks(self.mask_stride())?;
        let target = Target {
            masks: &targets,
            referred: sample.referred,
        };
        let seg = segmentation_loss(tape, &fwd.trace, target, w)?;
        let mut layers = seg.layers.clone();
        let mut total = seg.total;
        if let Some(refiner) = &self.refiner {
            let last = seg.assignments.last().expect("nonempty");
            let picked = tape.gather_rows(fwd.trace.last().masks, &last.rows)?;
            let refined = refiner.refine_masks(tape, p, picked, fwd.pixels, self.cfg.bar.eps)?;
            let bce = mask_bce_loss(tape, refined, &targets)?;
            let dice = dice_loss(tape, refined, &targets)?;
            let bce = tape.scale(bce, w.mask)?;
            let dice = tape.scale(dice, w.dice)?;
            let bar = tape.add(bce, dice)?;
            layers.push(LayerLoss {
                layer: layers.len(),
                cls: 0.0,
                mask: tape.value(bce).item(),
                dice: tape.value(dice).item(),
                total: tape.value(bar).item(),
            });
            total = tape.add(total, bar)?;
        }
        Ok(ModelLoss {
            total,
            layers,
            segmentation: seg,
            forward: fwd,
        })
    }

    /// Checks that `other` has the same shape-affecting configuration,
    /// naming the first field that differs.
    pub fn check_structure(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
        let e = serde_json::to_value(expected)?;
        let f = serde_json::to_value(found)?;
        for section in ["decoder", "bar"] {
            let (Some(es), Some(fs)) = (e[section].as_object(), f[section].as_object()) else {
                continue;
            };
            for (key, ev) in es {
                // Thresholds and initial values do not change parameter shapes.
                if matches!(key.as_str(), "eps" | "alpha_init") {
                    continue;
                }
                let fv = fs.get(key).cloned().unwrap_or(serde_json::Value::Null);
                if &fv != ev {
                    return Err(Error::ConfigMismatch {
                        field: format!("{section}.{key}"),
                        expected: ev.to_string(),
                        found: fv.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Refines one `[H×W]` mask against the pixel features of its scene.
    pub fn refine_one(&self, mask: &Tensor, pixels: &Tensor, eps: f64) -> Result<Tensor> {
        let refiner = self
            .refiner
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no boundary refiner".into()))?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let shape = mask.shape().to_vec();
        let m = tape.constant(mask.clone().reshape(&[1, shape[0], shape[1]])?)?;
        let px = tape.constant(pixels.clone())?;
        let out = refiner.refine_masks(&mut tape, &p, m, px, eps)?;
        tape.value(out).clone().reshape(&shape)
    }
}

pub struct ModelLoss {
    pub total: Var,
    /// Decoder layers, then the refiner row when present.
    pub layers: Vec<LayerLoss>,
    pub segmentation: SegmentationLoss,
    pub forward: ForwardVars,
}
