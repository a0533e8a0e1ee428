//! Run configuration: a TOML file with `[decoder]`, `[bar]`, `[loss]`,
//! `[optim]` and `[data]` sections, plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, SemanticSource};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::refine::BarConfig;
use crate::synth::SceneSpec;
use crate::train::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shared_color: bool,
    /// Scenes with ids `0..train` form the training split.
    pub train: usize,
    /// Scenes with ids `train..train + heldout` form the held-out split.
    pub heldout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            height: s.height,
            width: s.width,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            shared_color: s.shared_color,
            train: 2000,
            heldout: 200,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            shared_color: self.shared_color,
        }
    }

    pub fn train_ids(&self) -> std::ops::Range<usize> {
        0..self.train
    }

    pub fn heldout_ids(&self) -> std::ops::Range<usize> {
        self.train..self.train + self.heldout
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Master seed; there is no fallback to an entropy source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub decoder: DecoderConfig,
    pub bar: BarConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
}


/// Ablation variants, in table order.
pub const VARIANTS: [&str; 5] = ["baseline", "sr", "srcr", "full", "vis"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.data.spec().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            decoder: self.decoder.clone(),
            bar: self.bar.clone(),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (set `seed` or pass --seed)".into()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses `text` and applies `section.key=value` overrides in order.
    /// Values are read as TOML literals, falling back to bare strings.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The configuration of one ablation variant built on `self`.
    pub fn variant(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        let d = &mut c.decoder;
        d.semantic_source = SemanticSource::Condition;
        let (sr, cr, bar) = match name {
            "baseline" => (false, false, false),
            "sr" => (true, false, false),
            "srcr" => (true, true, false),
            "full" => (true, true, true),
            "vis" => {
                d.semantic_source = SemanticSource::Visual;
                (true, true, false)
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant `{name}` (expected one of {})",
                    VARIANTS.join(", ")
                )))
            }
        };
        d.semantic_refinement = sr;
        d.condition_refinement = cr;
        c.bar.enabled = bar;
        Ok(c)
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) || path.len() > 2 {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("nonempty");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Default output locations under a run directory.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("final.ckpt"), dir.join("best.ckpt"))
}
