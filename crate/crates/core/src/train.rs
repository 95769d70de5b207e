//! Optimization of aggregator parameters on base-class samples.
//!
//! Encoders stay frozen: visual tokens are computed once per image and the
//! optimizer only ever sees aggregator parameters. Each example pairs an
//! image with `N` attributes sampled with replacement from a category's
//! pool; with probability `negative_pair_prob` the category is swapped for
//! one absent from the image and the target becomes the empty mask.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig, Strategy, TextInput};
use crate::catalog::{sample_attributes, Catalog};
use crate::encoders::{ToyEncoder, VisualEncoder, VisualTokens};
use crate::error::{Error, Result};
use crate::eval::FoldSplit;
use crate::mask::MaskHeadConfig;
use crate::params::ParamStore;
use crate::pipeline::Segmenter;
use crate::synth::SegmentationSample;
use crate::tape::{Mat, PROB_CLAMP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub attributes_per_sample: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub negative_pair_prob: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            attributes_per_sample: 15,
            epochs: 20,
            warmup_epochs: 10,
            lr_init: 4e-6,
            lr_peak: 1e-3,
            weight_decay: 0.05,
            negative_pair_prob: 0.3,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            hflip: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.attributes_per_sample == 0 {
            return err("attributes_per_sample must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return err(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_init <= self.lr_peak) || self.lr_init < 0.0 {
            return err(format!(
                "learning rates must satisfy 0 <= lr_init ({}) <= lr_peak ({})",
                self.lr_init, self.lr_peak
            ));
        }
        if !(0.0..=1.0).contains(&self.negative_pair_prob) {
            return err(format!(
                "negative_pair_prob {} outside [0, 1]",
                self.negative_pair_prob
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from `lr_init` to `lr_peak` over `warmup_epochs`, then
/// cosine decay reaching zero at the last step of the last epoch.
pub fn lr_at_step(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warmup {
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    if last <= warmup {
        return if step >= last && total > 0 && last > 0 && step > warmup { 0.0 } else { cfg.lr_peak };
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean pixel binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn pixel_bce_loss(probs: &Mat, target: &Mat) -> Result<f64> {
    if probs.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.dim(),
            target.dim()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Decoupled weight decay Adam. Decay applies to weight matrices only; norm
/// parameters, biases and single-row tokens are left undecayed.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: store.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect(),
            v: store.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect(),
            decay: store
                .iter()
                .map(|(_, name, v)| v.nrows() > 1 && v.ncols() > 1 && !name.ends_with(".clusters"))
                .collect(),
        }
    }

    /// Applies one update and rounds the parameters back to `f32`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = &grads[i];
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let decay = if self.decay[i] { self.weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                    *p = *p as f32 as f64;
                });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub sample_index: usize,
    pub category: String,
    pub attributes: Vec<String>,
    pub target: Mat,
    pub negative: bool,
}

/// Pairs a sample with sampled attributes of its own category, or, with
/// probability `negative_pair_prob`, of a candidate category absent from the
/// image (with an all-zero target).
pub fn make_training_example<R: Rng>(
    sample: &SegmentationSample,
    sample_index: usize,
    catalog: &Catalog,
    candidates: &[String],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    catalog.get(&sample.category)?;
    let negative = cfg.negative_pair_prob > 0.0 && rng.random_bool(cfg.negative_pair_prob);
    let absent: Vec<&String> = if negative {
        candidates
            .iter()
            .filter(|c| **c != sample.category && !sample.distractors.contains(c))
            .collect()
    } else {
        Vec::new()
    };
    let (category, target, negative) = match absent.choose(rng) {
        Some(c) => ((*c).clone(), Mat::zeros(sample.mask.dim()), true),
        None => (sample.category.clone(), sample.mask.clone(), false),
    };
    let attributes = sample_attributes(catalog.get(&category)?, cfg.attributes_per_sample, rng)?;
    Ok(TrainingExample {
        sample_index,
        category,
        attributes,
        target,
        negative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub model: Aggregator,
    pub log: Vec<LogRecord>,
}

pub struct TrainSetup<'a> {
    pub samples: &'a [SegmentationSample],
    pub catalog: &'a Catalog,
    pub fold: &'a FoldSplit,
    pub encoder: &'a ToyEncoder,
    pub strategy: Strategy,
    pub aggregator: AggregatorConfig,
    pub head: MaskHeadConfig,
    /// When set, receives `run.json`, `train_log.jsonl` and one checkpoint
    /// directory per epoch under `checkpoints/`.
    pub out_dir: Option<&'a Path>,
    /// Extra members merged into `run.json`.
    pub extra_echo: Option<serde_json::Value>,
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> std::path::PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

fn encoder_snapshot(enc: &ToyEncoder) -> (Mat, Mat) {
    (enc.projection().clone(), enc.word_table().clone())
}

fn max_abs_delta(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn run_echo(setup: &TrainSetup<'_>, cfg: &TrainConfig) -> serde_json::Value {
    let mut echo = serde_json::json!({
        "strategy": setup.strategy,
        "aggregator": setup.aggregator,
        "train": cfg,
        "mask_head": setup.head,
        "encoder": setup.encoder.config(),
        "fold": setup.fold,
    });
    if let Some(serde_json::Value::Object(extra)) = &setup.extra_echo {
        for (k, v) in extra {
            echo[k] = v.clone();
        }
    }
    echo
}

pub fn train(setup: &TrainSetup<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    setup.fold.validate()?;
    for class in &setup.fold.base_classes {
        setup.catalog.get(class)?;
        if !setup.samples.iter().any(|s| &s.category == class) {
            return Err(Error::Invalid(format!("no training samples for base class `{class}`")));
        }
    }
    let mut model = Aggregator::new(setup.strategy, setup.aggregator.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000);
    let before = encoder_snapshot(setup.encoder);

    let train_idx: Vec<usize> = setup
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| setup.fold.base_classes.contains(&s.category))
        .map(|(i, _)| i)
        .collect();
    let visual: Vec<Option<VisualTokens>> = {
        let mut v = vec![None; setup.samples.len()];
        for &i in &train_idx {
            v[i] = Some(setup.encoder.encode_image(&setup.samples[i].image)?);
        }
        v
    };

    if let Some(dir) = setup.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run_echo(setup, cfg))?)?;
        fs::write(dir.join("train_log.jsonl"), "")?;
    }

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at_step(step, steps_per_epoch, cfg);
            let mut acc: Option<Vec<Mat>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = &setup.samples[i];
                let ex = make_training_example(
                    sample,
                    i,
                    setup.catalog,
                    &setup.fold.base_classes,
                    cfg,
                    &mut rng,
                )?;
                let flip = cfg.hflip && rng.random_bool(0.5);
                let (vis, target) = if flip {
                    let img = image::imageops::flip_horizontal(&sample.image);
                    let mut t = ex.target.clone();
                    t.invert_axis(ndarray::Axis(1));
                    (setup.encoder.encode_image(&img)?, t)
                } else {
                    (visual[i].clone().expect("encoded"), ex.target.clone())
                };
                let text = TextInput::encode(setup.encoder, &ex.attributes)?;
                let seg = Segmenter::new(setup.encoder, &model, &setup.head)?;
                let g = seg.loss_and_grads(&vis, &text, &target)?;
                if !g.loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, step {step} (category `{}`)",
                        ex.category
                    )));
                }
                batch_loss += g.loss;
                match &mut acc {
                    None => acc = Some(g.grads),
                    Some(a) => a.iter_mut().zip(&g.grads).for_each(|(a, g)| *a += g),
                }
            }
            let n = batch.len() as f64;
            let mut grads = acc.expect("non-empty batch");
            grads.iter_mut().for_each(|g| *g /= n);
            opt.step(&mut model.params, &grads, lr);
            if !model.params.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += batch_loss;
            last_lr = lr;
            step += 1;
        }
        let record = LogRecord {
            epoch,
            step,
            lr: last_lr,
            loss: epoch_loss / train_idx.len() as f64,
        };
        if let Some(dir) = setup.out_dir {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join("train_log.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            let mut extra = serde_json::json!({"seed": cfg.seed, "epoch": epoch + 1});
            if let Some(serde_json::Value::Object(more)) = &setup.extra_echo {
                for (k, v) in more {
                    extra[k] = v.clone();
                }
            }
            model.save(&checkpoint_dir(dir, epoch + 1), extra)?;
        }
        log.push(record);
    }

    let after = encoder_snapshot(setup.encoder);
    assert_eq!(max_abs_delta(&before.0, &after.0), 0.0, "frozen visual encoder changed");
    assert_eq!(max_abs_delta(&before.1, &after.1), 0.0, "frozen text encoder changed");
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_hits_its_anchor_points() {
        let cfg = TrainConfig::default();
        let spe = 7;
        assert_eq!(lr_at_step(0, spe, &cfg), 4e-6);
        assert!((lr_at_step(10 * spe, spe, &cfg) - 1e-3).abs() < 1e-15);
        assert!(lr_at_step(20 * spe - 1, spe, &cfg).abs() < 1e-15);
        let mid = lr_at_step(5 * spe, spe, &cfg);
        assert!((mid - (4e-6 + (1e-3 - 4e-6) * 0.5)).abs() < 1e-15);
        for s in 10 * spe..20 * spe - 1 {
            assert!(lr_at_step(s + 1, spe, &cfg) <= lr_at_step(s, spe, &cfg));
        }
    }

    #[test]
    fn bce_reference_values() {
        let half = Mat::from_elem((3, 3), 0.5);
        let t = Mat::from_shape_fn((3, 3), |(i, j)| ((i + j) % 2) as f64);
        assert!((pixel_bce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(pixel_bce_loss(&t, &t).unwrap() <= 1e-6);
        assert!(pixel_bce_loss(&half, &Mat::zeros((2, 2))).is_err());
    }

    #[test]
    fn bce_two_by_two_by_hand() {
        let p = array![[0.9, 0.2], [0.6, 0.05]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let expected = -((0.9f64).ln() + (0.8f64).ln() + (0.4f64).ln() + (0.05f64).ln()) / 4.0;
        assert!((pixel_bce_loss(&p, &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        store.register("w", array![[0.5, -0.25], [1.0, 2.0]]);
        store.register("b", array![[0.125, 3.0]]);
        let before = store.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        let zeros: Vec<Mat> = store.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect();
        for _ in 0..3 {
            opt.step(&mut store, &zeros, 1e-2);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.register("b", array![[1.0, -1.0]]);
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[array![[2.0, -0.5]]], 0.125);
        let v = store.get(id);
        assert!((v[[0, 0]] - 0.875).abs() < 1e-6);
        assert!((v[[0, 1]] + 0.875).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 30,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            negative_pair_prob: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
