//! Procedural shapes whose categories are defined by attribute combinations.
//!
//! Each category is a unique (color, shape, parts, texture, rim) tuple with
//! an invented name that carries no meaning, so a model can only find the
//! object through its attribute descriptions. Categories are arranged so
//! that every attribute value of a held-out fold also occurs among the
//! training classes of that fold; novel classes are unseen combinations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{save_catalog, load_catalog, Catalog, CategoryEntry, Source};
use crate::encoders::{TextEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::eval::FoldSplit;
use crate::mask::{image_to_mask, mask_to_image};
use crate::tape::Mat;

pub const NUM_FOLDS: usize = 4;
pub const MIN_CANVAS: u32 = 32;
/// Object radius ranges in pixels on a 64-pixel canvas (scaled with the
/// shorter canvas side).
pub const TARGET_RADIUS: (f64, f64) = (11.0, 16.0);
pub const DISTRACTOR_RADIUS: (f64, f64) = (7.0, 11.0);
/// Ceiling on pairwise cosine similarity between category mean embeddings.
pub const SEPARABILITY_LIMIT: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeAxis {
    Color,
    Shape,
    Parts,
    Others,
}

impl AttributeAxis {
    pub const ALL: [AttributeAxis; 4] = [
        AttributeAxis::Color,
        AttributeAxis::Shape,
        AttributeAxis::Parts,
        AttributeAxis::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeAxis::Color => "color",
            AttributeAxis::Shape => "shape",
            AttributeAxis::Parts => "parts",
            AttributeAxis::Others => "others",
        }
    }
}

struct ColorSpec {
    rgb: [u8; 3],
    phrases: [&'static str; 4],
}

const COLORS: [ColorSpec; 5] = [
    ColorSpec { rgb: [220, 40, 40], phrases: ["red color", "red body", "reddish surface", "crimson paint"] },
    ColorSpec { rgb: [40, 200, 60], phrases: ["green color", "green body", "greenish surface", "emerald paint"] },
    ColorSpec { rgb: [50, 80, 230], phrases: ["blue color", "blue body", "bluish surface", "azure paint"] },
    ColorSpec { rgb: [230, 210, 40], phrases: ["yellow color", "yellow body", "yellowish surface", "golden paint"] },
    ColorSpec { rgb: [210, 60, 210], phrases: ["magenta color", "magenta body", "purplish surface", "violet paint"] },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

const SHAPES: [(Shape, [&str; 3]); 5] = [
    (Shape::Circle, ["round shape", "circular outline", "curved edge all around"]),
    (Shape::Square, ["square shape", "four right angles", "boxy outline"]),
    (Shape::Triangle, ["triangular shape", "three corners", "pointed top"]),
    (Shape::Diamond, ["diamond shape", "rhombus outline", "four pointed tips"]),
    (Shape::Cross, ["cross shape", "plus sign outline", "four arms"]),
];

const PARTS: [[&str; 2]; 4] = [
    ["smooth rim without knobs", "no protrusions"],
    ["one small knob", "single bump on the edge"],
    ["two small knobs", "pair of bumps"],
    ["three small knobs", "three bumps around the edge"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
    Checkered,
}

const TEXTURES: [(Texture, [&str; 2]); 4] = [
    (Texture::Solid, ["solid fill", "uniform surface"]),
    (Texture::Striped, ["striped texture", "parallel stripes"]),
    (Texture::Dotted, ["dotted texture", "speckled with dots"]),
    (Texture::Checkered, ["checkered texture", "checkerboard pattern"]),
];

const RIMS: [[&str; 2]; 2] = [["no border", "soft edges"], ["dark rim", "shadowed border"]];

/// Shading factors applied to the base color on object pixels.
pub const SHADE_TEXTURE: f64 = 0.6;
pub const SHADE_RIM: f64 = 0.4;
const BACKGROUND: u8 = 28;
const BACKGROUND_NOISE: i32 = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub color: usize,
    pub shape: Shape,
    pub knobs: usize,
    pub texture: Texture,
    pub rim: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCategory {
    pub name: String,
    pub spec: AttributeSpec,
    /// Distractors are drawn only from categories of a different color.
    pub distractor_policy: String,
}

impl SyntheticCategory {
    pub fn base_rgb(&self) -> [u8; 3] {
        COLORS[self.spec.color].rgb
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpace {
    pub categories: Vec<SyntheticCategory>,
    pub attributes: Vec<Vec<String>>,
    pub attribute_types: BTreeMap<String, AttributeAxis>,
}

fn nonsense_name<R: Rng>(rng: &mut R, index: usize) -> String {
    const ONSETS: [&str; 12] = ["z", "bl", "gr", "qu", "thr", "v", "sn", "kr", "fl", "m", "dr", "x"];
    const VOWELS: [&str; 6] = ["a", "o", "i", "u", "e", "y"];
    const CODAS: [&str; 8] = ["rb", "m", "lk", "x", "nd", "sp", "rl", "g"];
    let mut name = String::new();
    for _ in 0..2 {
        name.push_str(ONSETS.choose(rng).expect("non-empty"));
        name.push_str(VOWELS.choose(rng).expect("non-empty"));
        name.push_str(CODAS.choose(rng).expect("non-empty"));
    }
    format!("{name}-{index:02}")
}

/// Builds `n_categories` attribute combinations (at most 20, a multiple of
/// the fold count). Category `i` belongs to fold `i / (n / 4)`.
pub fn make_category_space(n_categories: usize, seed: u64) -> Result<CategorySpace> {
    if n_categories == 0 || n_categories > 20 || n_categories % NUM_FOLDS != 0 {
        return Err(Error::Config(format!(
            "category count {n_categories} must be a positive multiple of {NUM_FOLDS} up to 20"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_fold = n_categories / NUM_FOLDS;
    let mut categories = Vec::with_capacity(n_categories);
    let mut attributes = Vec::with_capacity(n_categories);
    let mut attribute_types = BTreeMap::new();
    for i in 0..n_categories {
        let (slot, fold) = (i % per_fold, i / per_fold);
        let spec = AttributeSpec {
            color: slot % COLORS.len(),
            shape: SHAPES[(slot + fold) % SHAPES.len()].0,
            knobs: (slot + fold) % PARTS.len(),
            texture: TEXTURES[(slot + 2 * fold) % TEXTURES.len()].0,
            rim: (slot + fold) % 2 == 1,
        };
        let mut attrs = Vec::new();
        let mut add = |axis, phrases: &[&str]| {
            for p in phrases {
                attribute_types.insert(p.to_string(), axis);
                attrs.push(p.to_string());
            }
        };
        add(AttributeAxis::Color, &COLORS[spec.color].phrases);
        add(AttributeAxis::Shape, &SHAPES[(slot + fold) % SHAPES.len()].1);
        add(AttributeAxis::Parts, &PARTS[spec.knobs]);
        add(AttributeAxis::Others, &TEXTURES[(slot + 2 * fold) % TEXTURES.len()].1);
        add(AttributeAxis::Others, &RIMS[spec.rim as usize]);
        categories.push(SyntheticCategory {
            name: nonsense_name(&mut rng, i),
            spec,
            distractor_policy: "different-color".into(),
        });
        attributes.push(attrs);
    }
    Ok(CategorySpace {
        categories,
        attributes,
        attribute_types,
    })
}

impl CategorySpace {
    pub fn catalog(&self, dataset_name: &str) -> Catalog {
        Catalog {
            dataset_name: dataset_name.to_string(),
            categories: self
                .categories
                .iter()
                .zip(&self.attributes)
                .map(|(c, a)| CategoryEntry::new(c.name.clone(), a.clone(), Source::Manual))
                .collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    /// Contiguous folds: fold `k` holds out categories `k·m .. (k+1)·m`.
    pub fn folds(&self) -> Vec<FoldSplit> {
        let names: Vec<String> = self.categories.iter().map(|c| c.name.clone()).collect();
        FoldSplit::contiguous(&names, NUM_FOLDS)
    }

    /// Largest pairwise cosine similarity between category mean attribute
    /// embeddings.
    pub fn max_pairwise_similarity(&self, encoder: &ToyEncoder) -> Result<f64> {
        let means = self
            .attributes
            .iter()
            .map(|a| {
                let m = encoder.encode_attributes(a)?.data.mean_axis(ndarray::Axis(0)).expect("non-empty");
                let n = m.dot(&m).sqrt();
                Ok(m / n)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                worst = worst.max(means[i].dot(&means[j]));
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: RgbImage,
    /// `H × W`, 1.0 on target pixels.
    pub mask: Mat,
    pub category: String,
    /// Categories painted as distractors.
    pub distractors: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

fn inside_shape(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.82 * r && dy.abs() <= 0.82 * r,
        Shape::Diamond => dx.abs() + dy.abs() <= 1.1 * r,
        Shape::Cross => {
            let arm = 0.36 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        Shape::Triangle => {
            // Apex up; base at dy = 0.7r, apex at dy = -r.
            let (top, bottom) = (-r, 0.7 * r);
            if dy < top || dy > bottom {
                return false;
            }
            let half_width = 1.05 * r * (dy - top) / (bottom - top);
            dx.abs() <= half_width
        }
    }
}

fn knob_centers(pose: &Pose, knobs: usize) -> Vec<(f64, f64)> {
    (0..knobs)
        .map(|k| {
            let theta = pose.angle - std::f64::consts::FRAC_PI_2
                + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            (
                pose.cx + 0.95 * pose.radius * theta.cos(),
                pose.cy + 0.95 * pose.radius * theta.sin(),
            )
        })
        .collect()
}

/// Object footprint: 0 outside, 1 body, 2 rim.
fn footprint(spec: &AttributeSpec, pose: &Pose, w: u32, h: u32) -> Vec<u8> {
    let mut out = vec![0u8; (w * h) as usize];
    let knob_r = (pose.radius / 4.0).max(2.5);
    let knobs = knob_centers(pose, spec.knobs);
    let (sin, cos) = pose.angle.sin_cos();
    let inside = |x: f64, y: f64| {
        let (dx, dy) = (x - pose.cx, y - pose.cy);
        let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        inside_shape(spec.shape, rx, ry, pose.radius)
            || knobs
                .iter()
                .any(|&(kx, ky)| (x - kx).powi(2) + (y - ky).powi(2) <= knob_r * knob_r)
    };
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if inside(fx, fy) {
                let edge = spec.rim
                    && [(-1.5, 0.0), (1.5, 0.0), (0.0, -1.5), (0.0, 1.5)]
                        .iter()
                        .any(|&(ox, oy)| !inside(fx + ox, fy + oy));
                out[(y * w + x) as usize] = if edge { 2 } else { 1 };
            }
        }
    }
    out
}

fn textured(texture: Texture, x: u32, y: u32) -> bool {
    match texture {
        Texture::Solid => false,
        Texture::Striped => (y / 3) % 2 == 1,
        Texture::Dotted => x % 4 == 1 && y % 4 == 1 || x % 4 == 2 && y % 4 == 1,
        Texture::Checkered => ((x / 4) + (y / 4)) % 2 == 1,
    }
}

fn shade(rgb: [u8; 3], factor: f64) -> Rgb<u8> {
    Rgb(rgb.map(|c| (c as f64 * factor).round() as u8))
}

fn paint(img: &mut RgbImage, cat: &SyntheticCategory, fp: &[u8]) {
    let w = img.width();
    for (i, &v) in fp.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (x, y) = (i as u32 % w, i as u32 / w);
        let factor = if v == 2 {
            SHADE_RIM
        } else if textured(cat.spec.texture, x, y) {
            SHADE_TEXTURE
        } else {
            1.0
        };
        img.put_pixel(x, y, shade(cat.base_rgb(), factor));
    }
}

fn random_pose<R: Rng>(rng: &mut R, w: u32, h: u32, rmin: f64, rmax: f64) -> Pose {
    let radius = rng.random_range(rmin..rmax);
    let margin = radius + radius / 4.0 + 1.0;
    Pose {
        cx: rng.random_range(margin..(w as f64 - margin).max(margin + 1e-9)),
        cy: rng.random_range(margin..(h as f64 - margin).max(margin + 1e-9)),
        radius,
        angle: rng.random_range(-0.35..0.35),
    }
}

/// Renders `space.categories[target]` plus up to two distractors of other
/// colors. Distractors are painted first and never overlap the target.
pub fn render_sample(
    space: &CategorySpace,
    target: usize,
    canvas: (u32, u32),
    seed: u64,
) -> Result<SegmentationSample> {
    let (w, h) = canvas;
    if w < MIN_CANVAS || h < MIN_CANVAS {
        return Err(Error::Invalid(format!(
            "canvas {w}x{h} is smaller than the {MIN_CANVAS}x{MIN_CANVAS} minimum"
        )));
    }
    let cat = space
        .categories
        .get(target)
        .ok_or_else(|| Error::UnknownCategory(format!("#{target}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_fn(w, h, |_, _| {
        let v = BACKGROUND as i32 + rng.random_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
        Rgb([v as u8; 3])
    });
    let scale = w.min(h) as f64 / 64.0;
    let pose = random_pose(&mut rng, w, h, TARGET_RADIUS.0 * scale, TARGET_RADIUS.1 * scale);
    let fp = footprint(&cat.spec, &pose, w, h);

    let others: Vec<usize> = (0..space.categories.len())
        .filter(|&j| space.categories[j].spec.color != cat.spec.color)
        .collect();
    let n_distractors = if others.is_empty() { 0 } else { rng.random_range(0..=2) };
    let mut occupied: Vec<bool> = fp.iter().map(|&v| v > 0).collect();
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        let j = *others.choose(&mut rng).expect("non-empty");
        for _attempt in 0..20 {
            let dp = random_pose(&mut rng, w, h, DISTRACTOR_RADIUS.0 * scale, DISTRACTOR_RADIUS.1 * scale);
            let dfp = footprint(&space.categories[j].spec, &dp, w, h);
            // Require a one-pixel gap to the target and earlier distractors.
            let clash = dfp.iter().enumerate().any(|(i, &v)| {
                v > 0 && {
                    let (x, y) = ((i as u32 % w) as i64, (i as u32 / w) as i64);
                    (-2..=2).any(|oy| {
                        (-2..=2).any(|ox| {
                            let (nx, ny) = (x + ox, y + oy);
                            nx >= 0
                                && ny >= 0
                                && nx < w as i64
                                && ny < h as i64
                                && occupied[(ny as u32 * w + nx as u32) as usize]
                        })
                    })
                }
            });
            if !clash {
                paint(&mut img, &space.categories[j], &dfp);
                distractors.push(space.categories[j].name.clone());
                for (o, &v) in occupied.iter_mut().zip(&dfp) {
                    *o |= v > 0;
                }
                break;
            }
        }
    }
    paint(&mut img, cat, &fp);
    let mask = Mat::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if fp[y * w as usize + x] > 0 {
            1.0
        } else {
            0.0
        }
    });
    Ok(SegmentationSample {
        image: img,
        mask,
        category: cat.name.clone(),
        distractors,
        seed,
    })
}

pub fn sample_seed(base: u64, category: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ ((category as u64) << 32)
        ^ index as u64
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub space: CategorySpace,
    pub samples: Vec<SegmentationSample>,
    pub folds: Vec<FoldSplit>,
    pub catalog: Catalog,
    pub canvas: (u32, u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub categories: usize,
    pub per_category: usize,
    pub canvas: (u32, u32),
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            categories: 20,
            per_category: 25,
            canvas: (64, 64),
            seed: 0,
        }
    }
}

/// Generates the category space, renders `per_category` samples each and
/// checks that the catalog validates and category embeddings are separable
/// under `encoder`.
pub fn generate_dataset(cfg: &GenerationConfig, encoder: &ToyEncoder) -> Result<SyntheticDataset> {
    let patch = encoder.config().patch_size as u32;
    if cfg.canvas.0 % patch != 0 || cfg.canvas.1 % patch != 0 {
        return Err(Error::Config(format!(
            "canvas {:?} is not divisible by patch size {patch}",
            cfg.canvas
        )));
    }
    let space = make_category_space(cfg.categories, cfg.seed)?;
    let catalog = space.catalog("synthetic-shapes");
    catalog.validate()?;
    let worst = space.max_pairwise_similarity(encoder)?;
    if worst >= SEPARABILITY_LIMIT {
        return Err(Error::Invalid(format!(
            "category embeddings are not separable: max cosine {worst:.3}"
        )));
    }
    let mut samples = Vec::with_capacity(cfg.categories * cfg.per_category);
    for c in 0..space.categories.len() {
        for i in 0..cfg.per_category {
            samples.push(render_sample(&space, c, cfg.canvas, sample_seed(cfg.seed, c, i))?);
        }
    }
    let folds = space.folds();
    Ok(SyntheticDataset {
        space,
        samples,
        folds,
        catalog,
        canvas: cfg.canvas,
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    canvas: (u32, u32),
    space: CategorySpace,
    samples: Vec<MetaSample>,
}

#[derive(Serialize, Deserialize)]
struct MetaSample {
    id: String,
    category: String,
    distractors: Vec<String>,
    seed: u64,
}

impl SyntheticDataset {
    /// Writes `images/{id}.png`, `masks/{id}.png`, `meta.json`,
    /// `catalog.json` and `folds.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("masks"))?;
        let mut meta = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let id = format!("{i:05}");
            s.image.save(root.join("images").join(format!("{id}.png")))?;
            mask_to_image(&s.mask).save(root.join("masks").join(format!("{id}.png")))?;
            meta.push(MetaSample {
                id,
                category: s.category.clone(),
                distractors: s.distractors.clone(),
                seed: s.seed,
            });
        }
        let meta = Meta {
            canvas: self.canvas,
            space: self.space.clone(),
            samples: meta,
        };
        fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        save_catalog(&self.catalog, &root.join("catalog.json"))?;
        fs::write(root.join("folds.json"), serde_json::to_string_pretty(&self.folds)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(root.join("meta.json"))?)?;
        let catalog = load_catalog(&root.join("catalog.json"))?;
        let folds: Vec<FoldSplit> =
            serde_json::from_str(&fs::read_to_string(root.join("folds.json"))?)?;
        let mut samples = Vec::with_capacity(meta.samples.len());
        for m in &meta.samples {
            let image = image::open(root.join("images").join(format!("{}.png", m.id)))?.to_rgb8();
            let mask = image_to_mask(
                &image::open(root.join("masks").join(format!("{}.png", m.id)))?.to_luma8(),
            );
            samples.push(SegmentationSample {
                image,
                mask,
                category: m.category.clone(),
                distractors: m.distractors.clone(),
                seed: m.seed,
            });
        }
        Ok(Self {
            space: meta.space,
            samples,
            folds,
            catalog,
            canvas: meta.canvas,
        })
    }

    pub fn samples_of<'a>(&'a self, classes: &'a [String]) -> impl Iterator<Item = (usize, &'a SegmentationSample)> + 'a {
        self.samples
            .iter()
            .enumerate()
            .filter(move |(_, s)| classes.contains(&s.category))
    }
}
