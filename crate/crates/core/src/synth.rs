//! Synthetic referring-segmentation scenes.
//!
//! Each scene holds 2–5 flat-colored shapes. One of them is referred to by a
//! three-token condition drawn from four attribute families (shape, color,
//! size, quadrant); the family left out is chosen so that the tuple still
//! singles out the referred object.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fstn::{self, Dtype};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrant {
    Nw,
    Ne,
    Sw,
    Se,
}

const SHAPES: [Shape; 3] = [Shape::Rectangle, Shape::Circle, Shape::Triangle];
const COLORS: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];
const SIZES: [Size; 2] = [Size::Small, Size::Large];
const QUADRANTS: [Quadrant; 4] = [Quadrant::Nw, Quadrant::Ne, Quadrant::Sw, Quadrant::Se];

impl Color {
    /// RGB in `[0, 1]`; every value is exact in `f32`.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.125, 0.125],
            Color::Green => [0.125, 0.875, 0.25],
            Color::Blue => [0.25, 0.375, 1.0],
            Color::Yellow => [1.0, 0.875, 0.125],
            Color::Magenta => [0.875, 0.25, 0.875],
            Color::Cyan => [0.125, 0.875, 0.875],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Shape,
    Color,
    Size,
    Quadrant,
}

pub const FAMILIES: [Family; 4] = [Family::Shape, Family::Color, Family::Size, Family::Quadrant];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub quadrant: Quadrant,
}

/// One attribute value; its vocabulary row is [`Attribute::token`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family", content = "value")]
pub enum Attribute {
    Shape(Shape),
    Color(Color),
    Size(Size),
    Quadrant(Quadrant),
}

/// Number of attribute values across all families.
pub const VOCAB_SIZE: usize = SHAPES.len() + COLORS.len() + SIZES.len() + QUADRANTS.len();

fn index_of<T: PartialEq>(all: &[T], v: &T) -> usize {
    all.iter().position(|x| x == v).expect("value in family")
}

impl Attribute {
    pub fn token(self) -> usize {
        match self {
            Attribute::Shape(s) => index_of(&SHAPES, &s),
            Attribute::Color(c) => SHAPES.len() + index_of(&COLORS, &c),
            Attribute::Size(s) => SHAPES.len() + COLORS.len() + index_of(&SIZES, &s),
            Attribute::Quadrant(q) => SHAPES.len() + COLORS.len() + SIZES.len() + index_of(&QUADRANTS, &q),
        }
    }

    pub fn family(self) -> Family {
        match self {
            Attribute::Shape(_) => Family::Shape,
            Attribute::Color(_) => Family::Color,
            Attribute::Size(_) => Family::Size,
            Attribute::Quadrant(_) => Family::Quadrant,
        }
    }

    /// Parses the lowercase value name, e.g. `red` or `triangle`.
    pub fn parse(name: &str) -> Result<Self> {
        let quoted = serde_json::Value::String(name.to_string());
        serde_json::from_value::<Shape>(quoted.clone())
            .map(Attribute::Shape)
            .or_else(|_| serde_json::from_value::<Color>(quoted.clone()).map(Attribute::Color))
            .or_else(|_| serde_json::from_value::<Size>(quoted.clone()).map(Attribute::Size))
            .or_else(|_| serde_json::from_value::<Quadrant>(quoted).map(Attribute::Quadrant))
            .map_err(|_| Error::Invalid(format!("unknown attribute `{name}`")))
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self {
            Attribute::Shape(s) => serde_json::to_value(s),
            Attribute::Color(c) => serde_json::to_value(c),
            Attribute::Size(s) => serde_json::to_value(s),
            Attribute::Quadrant(q) => serde_json::to_value(q),
        }
        .map_err(|_| fmt::Error)?;
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

impl Attributes {
    pub fn get(&self, family: Family) -> Attribute {
        match family {
            Family::Shape => Attribute::Shape(self.shape),
            Family::Color => Attribute::Color(self.color),
            Family::Size => Attribute::Size(self.size),
            Family::Quadrant => Attribute::Quadrant(self.quadrant),
        }
    }

    pub fn matches(&self, condition: &[Attribute]) -> bool {
        condition.iter().all(|a| self.get(a.family()) == *a)
    }

    pub fn shared(&self, other: &Attributes) -> usize {
        FAMILIES.iter().filter(|&&f| self.get(f) == other.get(f)).count()
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            shape: *SHAPES.choose(rng).expect("nonempty"),
            color: *COLORS.choose(rng).expect("nonempty"),
            size: *SIZES.choose(rng).expect("nonempty"),
            quadrant: *QUADRANTS.choose(rng).expect("nonempty"),
        }
    }

    fn with_changed(&self, family: Family, rng: &mut ChaCha8Rng) -> Self {
        let mut out = *self;
        loop {
            let cand = Self::random(rng);
            match family {
                Family::Shape => out.shape = cand.shape,
                Family::Color => out.color = cand.color,
                Family::Size => out.size = cand.size,
                Family::Quadrant => out.quadrant = cand.quadrant,
            }
            if out.get(family) != self.get(family) {
                return out;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Give every object the referred object's color.
    pub shared_color: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            min_objects: 2,
            max_objects: 5,
            shared_color: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "scene size {}×{} must be ≥ 16 and divisible by 4",
                self.height, self.width
            )));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_objects > 8 {
            return Err(Error::Config(format!(
                "object count range [{}, {}] must lie within [2, 8]",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

pub const MAX_ATTEMPTS: usize = 1000;
/// Minimum Chebyshev gap between pixels of different objects.
const SEPARATION: usize = 2;
const MIN_AREA: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub seed: u64,
    /// `[3 × H × W]`.
    pub image: Tensor,
    /// `[K × H × W]` binary, pairwise disjoint.
    pub masks: Tensor,
    pub objects: Vec<Attributes>,
    pub condition: Vec<Attribute>,
    pub referred: usize,
}

impl SceneSample {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.condition.iter().map(|a| a.token()).collect()
    }

    /// Masks reduced by `factor` with area majority (at least half of each
    /// `factor×factor` block set).
    pub fn target_masks(&self, factor: usize) -> Result<Tensor> {
        downsample_majority(&self.masks, factor)
    }
}

pub fn downsample_majority(masks: &Tensor, factor: usize) -> Result<Tensor> {
    let (k, h, w) = match *masks.shape() {
        [k, h, w] => (k, h, w),
        ref s => return shape_err("downsample", format!("expected K×H×W, got {s:?}")),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err("downsample", format!("{h}×{w} by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let need = (factor * factor).div_ceil(2);
    let mut out = vec![0.0; k * oh * ow];
    for m in 0..k {
        let src = masks.row(m);
        for i in 0..oh {
            for j in 0..ow {
                let mut count = 0;
                for di in 0..factor {
                    for dj in 0..factor {
                        if src[(i * factor + di) * w + j * factor + dj] > 0.5 {
                            count += 1;
                        }
                    }
                }
                if count >= need {
                    out[(m * oh + i) * ow + j] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[k, oh, ow], out)
}

/// Rasterizes one object centered at `(cy, cx)` with half-extent `r`.
fn rasterize(shape: Shape, cy: usize, cx: usize, r: usize, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    let rf = r as f64;
    for i in cy.saturating_sub(r)..(cy + r + 1).min(h) {
        for j in cx.saturating_sub(r)..(cx + r + 1).min(w) {
            let dy = i as f64 - cy as f64;
            let dx = j as f64 - cx as f64;
            let inside = match shape {
                Shape::Rectangle => dy.abs() <= rf - 1.0 && dx.abs() <= rf,
                Shape::Circle => dy * dy + dx * dx <= rf * rf + 0.5,
                Shape::Triangle => dx.abs() <= (dy + rf) / 2.0 + 0.5,
            };
            m[i * w + j] = inside;
        }
    }
    m
}

fn radius(size: Size, h: usize) -> usize {
    match size {
        Size::Small => h / 12,
        Size::Large => h / 7,
    }
}

fn quadrant_origin(q: Quadrant, h: usize, w: usize) -> (usize, usize) {
    match q {
        Quadrant::Nw => (0, 0),
        Quadrant::Ne => (0, w / 2),
        Quadrant::Sw => (h / 2, 0),
        Quadrant::Se => (h / 2, w / 2),
    }
}

/// Sets every pixel within Chebyshev distance `r` of `m`.
fn dilate(m: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if !m[i * w + j] {
                continue;
            }
            for ii in i.saturating_sub(r)..(i + r + 1).min(h) {
                for jj in j.saturating_sub(r)..(j + r + 1).min(w) {
                    out[ii * w + jj] = true;
                }
            }
        }
    }
    out
}

fn draw_objects(objects: &[Attributes], spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<bool>>> {
    let (h, w) = (spec.height, spec.width);
    let mut occupied = vec![false; h * w];
    let mut masks = Vec::with_capacity(objects.len());
    for obj in objects {
        let r = radius(obj.size, h);
        let (qy, qx) = quadrant_origin(obj.quadrant, h, w);
        let (qh, qw) = (h / 2, w / 2);
        if 2 * r + 1 > qh.min(qw) {
            return None;
        }
        let cy = qy + rng.gen_range(r..qh - r);
        let cx = qx + rng.gen_range(r..qw - r);
        let m = rasterize(obj.shape, cy, cx, r, h, w);
        let area = m.iter().filter(|&&b| b).count();
        if area < MIN_AREA || m.iter().zip(&occupied).any(|(&a, &b)| a && b) {
            return None;
        }
        for (o, g) in occupied.iter_mut().zip(dilate(&m, h, w, SEPARATION - 1)) {
            *o |= g;
        }
        masks.push(m);
    }
    Some(masks)
}

/// One seeded scene; `(seed, id)` fully determine the output.
pub fn generate_scene(spec: &SceneSpec, seed: u64, id: usize) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let (h, w) = (spec.height, spec.width);
    for _ in 0..MAX_ATTEMPTS {
        let k = rng.gen_range(spec.min_objects..=spec.max_objects);
        let referred_attrs = Attributes::random(&mut rng);
        let omitted = *FAMILIES.choose(&mut rng).expect("nonempty");
        let condition: Vec<Attribute> = FAMILIES
            .iter()
            .filter(|&&f| f != omitted)
            .map(|&f| referred_attrs.get(f))
            .collect();
        let mut objects = vec![referred_attrs];
        // The first distractor differs from the referred object in exactly
        // one condition family.
        let kept: Vec<Family> = FAMILIES.iter().copied().filter(|&f| f != omitted).collect();
        let change = *kept.choose(&mut rng).expect("nonempty");
        objects.push(referred_attrs.with_changed(change, &mut rng));
        while objects.len() < k {
            objects.push(Attributes::random(&mut rng));
        }
        if spec.shared_color {
            for o in &mut objects {
                o.color = referred_attrs.color;
            }
        }
        if objects[1..].iter().any(|o| o.matches(&condition)) {
            continue;
        }
        objects.shuffle(&mut rng);
        let referred = objects.iter().position(|o| o.matches(&condition)).expect("referred present");
        let Some(masks) = draw_objects(&objects, spec, &mut rng) else {
            continue;
        };
        let low = downsample_majority(&masks_tensor(&masks, h, w)?, 2)?;
        if (0..k).any(|m| low.row(m).iter().filter(|&&v| v > 0.5).count() < 4) {
            continue;
        }
        let mut image = vec![0.0; 3 * h * w];
        for (obj, m) in objects.iter().zip(&masks) {
            let rgb = obj.color.rgb();
            for (p, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                for c in 0..3 {
                    image[c * h * w + p] = rgb[c];
                }
            }
        }
        return Ok(SceneSample {
            id,
            seed,
            image: Tensor::new(&[3, h, w], image)?,
            masks: masks_tensor(&masks, h, w)?,
            objects,
            condition,
            referred,
        });
    }
    Err(Error::Invalid(format!(
        "scene {id} (seed {seed}): no valid placement after {MAX_ATTEMPTS} attempts"
    )))
}

fn masks_tensor(masks: &[Vec<bool>], h: usize, w: usize) -> Result<Tensor> {
    let data = masks.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[masks.len(), h, w], data)
}

pub fn generate_set(spec: &SceneSpec, seed: u64, ids: std::ops::Range<usize>) -> Result<Vec<SceneSample>> {
    ids.map(|i| generate_scene(spec, seed, i)).collect()
}

/// Looks up one vocabulary row per condition token: `table[V×D] -> [T×D]`.
pub fn encode_condition(tape: &mut Tape, table: Var, condition: &[Attribute]) -> Result<Var> {
    if condition.is_empty() {
        return Err(Error::Invalid("empty condition".into()));
    }
    let tokens: Vec<usize> = condition.iter().map(|a| a.token()).collect();
    tape.gather_rows(table, &tokens)
}

/// Fixed `[2 × H × W]` coordinate map: channel 0 is y, channel 1 is x, both
/// running from −1 at the top-left to +1 at the bottom-right.
pub fn coordinate_channels(h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 2 * h * w];
    let lin = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    for i in 0..h {
        for j in 0..w {
            data[i * w + j] = lin(i, h);
            data[h * w + i * w + j] = lin(j, w);
        }
    }
    Tensor::new(&[2, h, w], data).expect("coordinate shape")
}

/// Two 3×3 conv + GELU stages, `(3+2) -> d/2 -> d`, the second with stride 2.
#[derive(Clone, Debug)]
pub struct PixelEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub dim: usize,
}

impl PixelEncoder {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, dim: usize) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("encoder dim {dim} must be even")));
        }
        Ok(Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), 5, dim / 2, 3, 1)?,
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), dim / 2, dim, 3, 2)?,
            dim,
        })
    }

    /// Returns `(F_pix[d × H/2 × W/2], F[P × d])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<(Var, Var)> {
        let (h, w) = match *tape.shape(image) {
            [3, h, w] => (h, w),
            ref s => return shape_err("encode_pixels", format!("image must be 3×H×W, got {s:?}")),
        };
        let coords = tape.constant(coordinate_channels(h, w))?;
        let x = tape.concat(&[image, coords], 0)?;
        let x = self.conv1.forward(tape, p, x)?;
        let x = tape.gelu(x)?;
        let x = self.conv2.forward(tape, p, x)?;
        let pixels = tape.gelu(x)?;
        let (oh, ow) = (tape.shape(pixels)[1], tape.shape(pixels)[2]);
        let flat = tape.reshape(pixels, &[self.dim, oh * ow])?;
        let features = tape.transpose(flat)?;
        Ok((pixels, features))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub spec: SceneSpec,
    pub referred: usize,
    pub objects: Vec<Attributes>,
    pub condition: Vec<Attribute>,
    pub image: String,
    pub masks: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes `manifest.jsonl` plus one image and one mask FSTN file per sample.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, samples: &[SceneSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    for s in samples {
        let image = format!("{:06}_image.fstn", s.id);
        let masks = format!("{:06}_masks.fstn", s.id);
        fstn::write_file(&dir.join(&image), &s.image, Dtype::F32)?;
        fstn::write_file(&dir.join(&masks), &s.masks, Dtype::F32)?;
        let entry = ManifestEntry {
            id: s.id,
            seed: s.seed,
            spec: spec.clone(),
            referred: s.referred,
            objects: s.objects.clone(),
            condition: s.condition.clone(),
            image,
            masks,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Corrupt {
            path: path.clone(),
            reason: format!("line {}: {err}", n + 1),
        })?;
        let image = fstn::read_file(&dir.join(&e.image))?;
        let masks = fstn::read_file(&dir.join(&e.masks))?;
        let bad = |reason: String| Error::Corrupt {
            path: dir.join(&e.masks),
            reason,
        };
        if masks.rank() != 3 || masks.shape()[0] != e.objects.len() || e.referred >= e.objects.len() {
            return Err(bad(format!("masks {:?} for {} objects", masks.shape(), e.objects.len())));
        }
        if image.shape() != [3, masks.shape()[1], masks.shape()[2]] {
            return Err(bad(format!("image {:?} vs masks {:?}", image.shape(), masks.shape())));
        }
        out.push(SceneSample {
            id: e.id,
            seed: e.seed,
            image,
            masks,
            objects: e.objects,
            condition: e.condition,
            referred: e.referred,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_tokens_are_dense() {
        let mut seen = [false; VOCAB_SIZE];
        for s in SHAPES {
            seen[Attribute::Shape(s).token()] = true;
        }
        for c in COLORS {
            seen[Attribute::Color(c).token()] = true;
        }
        for s in SIZES {
            seen[Attribute::Size(s).token()] = true;
        }
        for q in QUADRANTS {
            seen[Attribute::Quadrant(q).token()] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn attribute_names_round_trip() {
        for name in ["red", "triangle", "large", "se"] {
            assert_eq!(Attribute::parse(name).unwrap().to_string(), name);
        }
        assert!(Attribute::parse("purple").is_err());
    }

    #[test]
    fn coordinates_at_corners() {
        let c = coordinate_channels(4, 5);
        assert_eq!((c.data()[0], c.data()[20]), (-1.0, -1.0));
        assert_eq!((c.data()[19], c.data()[39]), (1.0, 1.0));
    }

    #[test]
    fn majority_downsample() {
        let m = Tensor::new(&[1, 2, 4], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(downsample_majority(&m, 2).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn scene_is_well_posed() {
        let spec = SceneSpec::default();
        for id in 0..50 {
            let s = generate_scene(&spec, 3, id).unwrap();
            assert_eq!(s.condition.len(), 3);
            let hits: Vec<usize> = (0..s.num_objects()).filter(|&i| s.objects[i].matches(&s.condition)).collect();
            assert_eq!(hits, vec![s.referred]);
        }
    }
}
