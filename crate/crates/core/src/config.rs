//! Flat run configuration shared by every command.
//!
//! One JSON object with a documented key set covers the encoder, the
//! aggregator, the mask head, training, evaluation and data generation.
//! Unknown keys are rejected so typos surface as configuration errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, Strategy};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::mask::{MaskHeadConfig, Similarity, Upsampling};
use crate::synth::GenerationConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds training, evaluation sampling and data generation.
    pub seed: u64,
    pub strategy: Strategy,

    // encoder
    pub d: usize,
    pub patch_size: usize,
    pub hash_vocab: usize,
    /// Seed of the frozen toy encoders; independent of `seed`.
    pub encoder_seed: u64,

    // aggregator
    pub stage_cluster_counts: Vec<usize>,
    pub fusion_layers_per_stage: usize,
    pub heads: usize,

    // mask head
    pub temperature: f64,
    pub threshold: f64,
    pub similarity: Similarity,
    pub upsampling: Upsampling,

    // training
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

    // evaluation
    pub attributes_per_class: usize,
    pub noise_rate: f64,

    // data generation
    pub categories: usize,
    pub per_category: usize,
    pub canvas: (u32, u32),
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let agg = AggregatorConfig::default();
        let head = MaskHeadConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        let data = GenerationConfig::default();
        Self {
            seed: 0,
            strategy: Strategy::Hrchy,
            d: enc.d,
            patch_size: enc.patch_size,
            hash_vocab: enc.hash_vocab,
            encoder_seed: enc.seed,
            stage_cluster_counts: agg.stage_cluster_counts,
            fusion_layers_per_stage: agg.fusion_layers_per_stage,
            heads: agg.heads,
            temperature: head.temperature,
            threshold: head.threshold,
            similarity: head.similarity,
            upsampling: head.upsampling,
            attributes_per_sample: train.attributes_per_sample,
            epochs: train.epochs,
            warmup_epochs: train.warmup_epochs,
            lr_init: train.lr_init,
            lr_peak: train.lr_peak,
            weight_decay: train.weight_decay,
            negative_pair_prob: train.negative_pair_prob,
            batch_size: train.batch_size,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            hflip: train.hflip,
            attributes_per_class: eval.attributes_per_class,
            noise_rate: eval.noise_rate,
            categories: data.categories,
            per_category: data.per_category,
            canvas: data.canvas,
        }
    }
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            patch_size: self.patch_size,
            hash_vocab: self.hash_vocab,
            seed: self.encoder_seed,
        }
    }

    pub fn aggregator(&self) -> AggregatorConfig {
        AggregatorConfig {
            stage_cluster_counts: self.stage_cluster_counts.clone(),
            fusion_layers_per_stage: self.fusion_layers_per_stage,
            d: self.d,
            heads: self.heads,
        }
    }

    pub fn head(&self) -> MaskHeadConfig {
        MaskHeadConfig {
            temperature: self.temperature,
            threshold: self.threshold,
            similarity: self.similarity,
            upsampling: self.upsampling,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            attributes_per_sample: self.attributes_per_sample,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            lr_init: self.lr_init,
            lr_peak: self.lr_peak,
            weight_decay: self.weight_decay,
            negative_pair_prob: self.negative_pair_prob,
            batch_size: self.batch_size,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            hflip: self.hflip,
            seed: self.seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            attributes_per_class: self.attributes_per_class,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            categories: self.categories,
            per_category: self.per_category,
            canvas: self.canvas,
            seed: self.seed,
        }
    }

    /// Checks every sub-configuration and their consistency (shared width,
    /// patch size dividing the canvas).
    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.aggregator().validate()?;
        self.head().validate()?;
        self.train().validate()?;
        self.eval().validate()?;
        let p = self.patch_size as u32;
        if self.canvas.0 % p != 0 || self.canvas.1 % p != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide canvas {:?}",
                self.patch_size, self.canvas
            )));
        }
        Ok(())
    }

    /// Reads a configuration file. A `run.json` written by a previous
    /// command is accepted too: its `config` member is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
