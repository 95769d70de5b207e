//! Fold protocol, IoU metrics and image-conditioned attribute filtering.
//!
//! Per-class IoU accumulates intersection and union over every test image
//! of the class (ΣI / ΣU) rather than averaging per-image scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::TextInput;
use crate::catalog::{sample_attributes, Catalog};
use crate::encoders::{AttributeTokens, TextEncoder, ToyEncoder, VisualEncoder, VisualTokens};
use crate::error::{Error, Result};
use crate::mask::{MaskHeadConfig, Similarity};
use crate::pipeline::Segmenter;
use crate::synth::SegmentationSample;
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
}

impl FoldSplit {
    /// Splits `names` into `n_folds` contiguous blocks; fold `k` holds out
    /// block `k` as novel and trains on the rest.
    pub fn contiguous(names: &[String], n_folds: usize) -> Vec<FoldSplit> {
        assert!(n_folds > 0 && names.len() % n_folds == 0, "classes must split evenly");
        let per = names.len() / n_folds;
        (0..n_folds)
            .map(|k| FoldSplit {
                fold_id: k,
                base_classes: names
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i / per != k)
                    .map(|(_, n)| n.clone())
                    .collect(),
                novel_classes: names[k * per..(k + 1) * per].to_vec(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(Error::Config(format!(
                "fold {} needs both base and novel classes",
                self.fold_id
            )));
        }
        if let Some(c) = self.novel_classes.iter().find(|c| self.base_classes.contains(c)) {
            return Err(Error::Config(format!(
                "fold {}: class `{c}` is both base and novel",
                self.fold_id
            )));
        }
        Ok(())
    }

    /// Checks disjointness and that base ∪ novel equals `classes`.
    pub fn validate_against(&self, classes: &[String]) -> Result<()> {
        self.validate()?;
        let mut union: Vec<&String> = self.base_classes.iter().chain(&self.novel_classes).collect();
        union.sort();
        union.dedup();
        let mut all: Vec<&String> = classes.iter().collect();
        all.sort();
        all.dedup();
        if union != all {
            return Err(Error::Config(format!(
                "fold {} does not cover the dataset classes",
                self.fold_id
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Intersection and union pixel counts of two binary masks (values > 0.5
/// are foreground).
pub fn intersection_union(pred: &Mat, gt: &Mat) -> Result<(u64, u64)> {
    check_same_shape(pred, gt)?;
    let (mut i, mut u) = (0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        i += (p && g) as u64;
        u += (p || g) as u64;
    }
    Ok((i, u))
}

/// |pred ∧ gt| / |pred ∨ gt|, defined as 1 when both masks are empty.
pub fn binary_iou(pred: &Mat, gt: &Mat) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Produces a binary mask for a sample given attribute descriptions.
pub trait MaskPredictor {
    fn predict(&self, sample: &SegmentationSample, attributes: &[String]) -> Result<Mat>;

    fn strategy(&self) -> String {
        "custom".into()
    }

    fn head(&self) -> Option<&MaskHeadConfig> {
        None
    }
}

/// Wraps a trained aggregator and the frozen encoders.
pub struct ModelPredictor<'a> {
    pub segmenter: Segmenter<'a>,
}

impl MaskPredictor for ModelPredictor<'_> {
    fn predict(&self, sample: &SegmentationSample, attributes: &[String]) -> Result<Mat> {
        let visual = self.segmenter.encoder.encode_image(&sample.image)?;
        let text = TextInput::encode(self.segmenter.encoder, attributes)?;
        self.segmenter.predict(&visual, &text)
    }

    fn strategy(&self) -> String {
        self.segmenter.model.strategy.to_string()
    }

    fn head(&self) -> Option<&MaskHeadConfig> {
        Some(self.segmenter.head)
    }
}

/// Returns the ground-truth mask regardless of the attributes.
pub struct OraclePredictor;

impl MaskPredictor for OraclePredictor {
    fn predict(&self, sample: &SegmentationSample, _: &[String]) -> Result<Mat> {
        Ok(sample.mask.clone())
    }

    fn strategy(&self) -> String {
        "oracle".into()
    }
}

/// Predicts the same mask for every image.
pub struct ConstantPredictor(pub Mat);

impl MaskPredictor for ConstantPredictor {
    fn predict(&self, sample: &SegmentationSample, _: &[String]) -> Result<Mat> {
        check_same_shape(&self.0, &sample.mask)?;
        Ok(self.0.clone())
    }

    fn strategy(&self) -> String {
        "constant".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub attributes_per_class: usize,
    /// Fraction of the sampled attributes replaced by attributes of other
    /// categories.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attributes_per_class: 15,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attributes_per_class == 0 {
            return Err(Error::Config("attributes_per_class must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        Ok(())
    }

    pub fn noisy_count(&self) -> usize {
        (self.noise_rate * self.attributes_per_class as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold_id: usize,
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub strategy: String,
    pub attributes_per_class: usize,
    pub temperature: Option<f64>,
    pub threshold: Option<f64>,
    pub similarity: Option<Similarity>,
    pub noise_rate: f64,
    pub filtered: bool,
    pub accumulation: String,
    pub images: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one row per class plus the mean.
    pub fn table(&self) -> String {
        let width = self.per_class_iou.keys().map(|k| k.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}", "class", "IoU");
        for (class, iou) in &self.per_class_iou {
            let _ = writeln!(out, "{class:<width$}  {iou:>7.4}");
        }
        let _ = writeln!(out, "{:<width$}  {:>7.4}", "mIoU", self.miou);
        out
    }
}

fn eval_rng(cfg: &EvalConfig, sample_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ sample_seed)
}

/// Attributes presented for `category` on one test image: `k` draws with
/// replacement, of which `noisy_count` are replaced by attributes absent
/// from the category's pool.
pub fn evaluation_attributes<R: Rng>(
    catalog: &Catalog,
    category: &str,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<Vec<String>> {
    let entry = catalog.get(category)?;
    let mut attrs = sample_attributes(entry, cfg.attributes_per_class, rng)?;
    let n_bad = cfg.noisy_count();
    if n_bad > 0 {
        let foreign: Vec<&String> = catalog
            .categories
            .iter()
            .filter(|c| c.name != category)
            .flat_map(|c| &c.attributes)
            .filter(|a| !entry.attributes.contains(a))
            .collect();
        if foreign.is_empty() {
            return Err(Error::EmptyPool(format!("attributes foreign to `{category}`")));
        }
        for slot in attrs.iter_mut().take(n_bad) {
            *slot = foreign[rng.random_range(0..foreign.len())].clone();
        }
    }
    Ok(attrs)
}

/// Keeps the `keep` attributes most cosine-similar to `image_embedding`,
/// preserving their input order. Ties favour earlier rows.
pub fn filter_attributes_by_image(
    attributes: &AttributeTokens,
    image_embedding: &Mat,
    keep: usize,
) -> Result<AttributeTokens> {
    if keep == 0 {
        return Err(Error::Invalid("keep must be positive".into()));
    }
    if keep > attributes.len() {
        return Err(Error::Invalid(format!(
            "keep {keep} exceeds the {} available attributes",
            attributes.len()
        )));
    }
    if image_embedding.dim() != (1, attributes.data.ncols()) {
        return Err(Error::Shape(format!(
            "image embedding {:?} vs width {}",
            image_embedding.dim(),
            attributes.data.ncols()
        )));
    }
    let e = image_embedding.row(0);
    let en = e.dot(&e).sqrt().max(f64::MIN_POSITIVE);
    let scores: Vec<f64> = attributes
        .data
        .rows()
        .into_iter()
        .map(|r| r.dot(&e) / (r.dot(&r).sqrt().max(f64::MIN_POSITIVE) * en))
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(attributes.select(&kept))
}

/// Linear map from an image's mean visual token to the text space, fit by
/// ridge regression onto the mean attribute embedding of the image's
/// category. The toy encoders share no embedding space, so this stands in
/// for a pretrained vision-language model when filtering attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentProbe {
    /// `(d_vis + 1) × d_txt`; the last row is the bias.
    pub weights: Mat,
}

fn mean_row(m: &Mat) -> Mat {
    m.mean_axis(ndarray::Axis(0)).expect("non-empty").insert_axis(ndarray::Axis(0))
}

/// Solves `a · x = b` for symmetric positive definite `a`.
fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let am = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let bm = nalgebra::DMatrix::from_fn(n, b.ncols(), |i, j| b[[i, j]]);
    let chol = am
        .cholesky()
        .ok_or_else(|| Error::Invalid("normal equations are not positive definite".into()))?;
    let x = chol.solve(&bm);
    Ok(Mat::from_shape_fn((n, b.ncols()), |(i, j)| x[(i, j)]))
}

impl AlignmentProbe {
    pub fn fit(
        encoder: &ToyEncoder,
        samples: &[SegmentationSample],
        catalog: &Catalog,
        classes: &[String],
        ridge: f64,
    ) -> Result<Self> {
        // Targets are centered on the catalog-wide mean attribute so that
        // words shared by every pool ("color", "shape") do not dominate.
        let everything: Vec<String> = catalog.categories.iter().flat_map(|c| c.attributes.iter().cloned()).collect();
        let center = mean_row(&encoder.encode_attributes(&everything)?.data);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut targets: BTreeMap<&str, Mat> = BTreeMap::new();
        for s in samples.iter().filter(|s| classes.contains(&s.category)) {
            if !targets.contains_key(s.category.as_str()) {
                let a = encoder.encode_attributes(&catalog.get(&s.category)?.attributes)?;
                targets.insert(&s.category, mean_row(&a.data) - &center);
            }
            xs.push(Self::features(&encoder.encode_image(&s.image)?));
            ys.push(targets[s.category.as_str()].clone());
        }
        if xs.is_empty() {
            return Err(Error::Invalid("no samples to fit the alignment probe".into()));
        }
        let x = ndarray::concatenate(ndarray::Axis(0), &xs.iter().map(|m| m.view()).collect::<Vec<_>>())
            .expect("equal widths");
        let y = ndarray::concatenate(ndarray::Axis(0), &ys.iter().map(|m| m.view()).collect::<Vec<_>>())
            .expect("equal widths");
        let mut gram = x.t().dot(&x);
        let last = gram.nrows() - 1;
        for i in 0..last {
            gram[[i, i]] += ridge;
        }
        gram[[last, last]] += 1e-9;
        let weights = solve_spd(&gram, &x.t().dot(&y))?;
        Ok(Self { weights })
    }

    fn features(visual: &VisualTokens) -> Mat {
        let mean = visual.mean_token();
        let mut f = Mat::ones((1, mean.ncols() + 1));
        f.slice_mut(ndarray::s![.., ..mean.ncols()]).assign(&mean);
        f
    }

    /// Image embedding in the text space (`1 × d_txt`).
    pub fn embed(&self, visual: &VisualTokens) -> Result<Mat> {
        let f = Self::features(visual);
        if f.ncols() != self.weights.nrows() {
            return Err(Error::Shape(format!(
                "probe expects width {}, got {}",
                self.weights.nrows() - 1,
                f.ncols() - 1
            )));
        }
        Ok(f.dot(&self.weights))
    }
}

/// Image-conditioned attribute filter built from the frozen encoders and a
/// fitted probe.
pub struct AttributeFilter<'a> {
    pub encoder: &'a ToyEncoder,
    pub probe: &'a AlignmentProbe,
}

impl AttributeFilter<'_> {
    pub fn filter(&self, sample: &SegmentationSample, attributes: &[String], keep: usize) -> Result<Vec<String>> {
        let tokens = self.encoder.encode_attributes(attributes)?;
        let embedding = self.probe.embed(&self.encoder.encode_image(&sample.image)?)?;
        Ok(filter_attributes_by_image(&tokens, &embedding, keep)?.labels)
    }
}

/// Evaluates the novel classes of `fold`: every sample of a novel class is
/// segmented from attributes sampled for its own category, and IoU is
/// accumulated per class as ΣI / ΣU. When `filter` is given, the noisy
/// attribute list is cut back to `k - noisy_count` before prediction.
pub fn evaluate_fold(
    predictor: &dyn MaskPredictor,
    samples: &[SegmentationSample],
    catalog: &Catalog,
    fold: &FoldSplit,
    cfg: &EvalConfig,
    filter: Option<&AttributeFilter<'_>>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    fold.validate()?;
    for class in &fold.novel_classes {
        catalog.get(class)?;
    }
    let mut totals: BTreeMap<String, (u64, u64)> =
        fold.novel_classes.iter().map(|c| (c.clone(), (0, 0))).collect();
    let mut images = 0;
    for sample in samples {
        let Some(acc) = totals.get_mut(&sample.category) else {
            continue;
        };
        let mut rng = eval_rng(cfg, sample.seed);
        let mut attrs = evaluation_attributes(catalog, &sample.category, cfg, &mut rng)?;
        if let Some(f) = filter {
            attrs = f.filter(sample, &attrs, cfg.attributes_per_class - cfg.noisy_count())?;
        }
        let pred = predictor.predict(sample, &attrs)?;
        let (i, u) = intersection_union(&pred, &sample.mask)?;
        acc.0 += i;
        acc.1 += u;
        images += 1;
    }
    let per_class_iou: BTreeMap<String, f64> = totals
        .into_iter()
        .map(|(c, (i, u))| (c, if u == 0 { 1.0 } else { i as f64 / u as f64 }))
        .collect();
    let miou = per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64;
    let head = predictor.head();
    Ok(MetricsReport {
        fold_id: fold.fold_id,
        per_class_iou,
        miou,
        strategy: predictor.strategy(),
        attributes_per_class: cfg.attributes_per_class,
        temperature: head.map(|h| h.temperature),
        threshold: head.map(|h| h.threshold),
        similarity: head.map(|h| h.similarity),
        noise_rate: cfg.noise_rate,
        filtered: filter.is_some(),
        accumulation: "per-class sum of intersections over sum of unions".into(),
        images,
        seed: cfg.seed,
    })
}

/// Best mIoU reachable by predicting one fixed mask for every novel-class
/// image. Candidates are the empty mask, the full mask and every threshold
/// of the per-pixel foreground frequency over the test images themselves.
pub fn best_constant_mask_miou(samples: &[SegmentationSample], fold: &FoldSplit) -> Result<f64> {
    let test: Vec<&SegmentationSample> = samples
        .iter()
        .filter(|s| fold.novel_classes.contains(&s.category))
        .collect();
    let Some(first) = test.first() else {
        return Err(Error::Invalid(format!("fold {} has no test samples", fold.fold_id)));
    };
    let mut freq = Mat::zeros(first.mask.dim());
    for s in &test {
        check_same_shape(&freq, &s.mask)?;
        freq += &s.mask;
    }
    freq /= test.len() as f64;
    let mut levels: Vec<f64> = freq.iter().copied().collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut candidates = vec![Mat::zeros(freq.dim()), Mat::ones(freq.dim())];
    candidates.extend(levels.iter().map(|&t| freq.mapv(|f| if f >= t { 1.0 } else { 0.0 })));
    let mut best = 0.0f64;
    for mask in candidates {
        let mut totals: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for s in &test {
            let (i, u) = intersection_union(&mask, &s.mask)?;
            let e = totals.entry(&s.category).or_default();
            e.0 += i;
            e.1 += u;
        }
        let miou = totals
            .values()
            .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .sum::<f64>()
            / totals.len() as f64;
        best = best.max(miou);
    }
    Ok(best)
}
