//! Frozen visual and text encoders.
//!
//! [`VisualEncoder`] and [`TextEncoder`] describe what the aggregator needs
//! from a vision-language backbone: row-major `tokens × channels` matrices
//! of a shared width. [`ToyEncoder`] implements both with fixed
//! pseudo-random tables so the rest of the pipeline runs without pretrained
//! weights.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    /// `N_v × d`, patches in row-major grid order.
    pub data: Mat,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl VisualTokens {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Mean over tokens, `1 × d`.
    pub fn mean_token(&self) -> Mat {
        self.data
            .mean_axis(ndarray::Axis(0))
            .expect("visual tokens are non-empty")
            .insert_axis(ndarray::Axis(0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTokens {
    /// `N_a × d`; row `i` embeds `labels[i]`.
    pub data: Mat,
    pub labels: Vec<String>,
}

impl AttributeTokens {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> AttributeTokens {
        AttributeTokens {
            data: self.data.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub patch_size: usize,
    pub hash_vocab: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            patch_size: 8,
            hash_vocab: 4096,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config(format!("embedding width {} < 2", self.d)));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.hash_vocab == 0 {
            return Err(Error::Config("hash vocabulary must be positive".into()));
        }
        Ok(())
    }
}

pub trait VisualEncoder {
    fn encode_image(&self, image: &RgbImage) -> Result<VisualTokens>;
    fn dim(&self) -> usize;
    /// Frozen encoders never receive gradient updates.
    fn frozen(&self) -> bool {
        true
    }
}

pub trait TextEncoder {
    /// Embeds each attribute independently, stacking rows in input order.
    fn encode_attributes(&self, attributes: &[String]) -> Result<AttributeTokens>;
    /// Sentence-level embedding, `1 × d`.
    fn encode_sentence(&self, sentence: &str) -> Result<Mat>;
    fn dim(&self) -> usize;
    fn frozen(&self) -> bool {
        true
    }
}

/// Deterministic stand-in for a pretrained vision-language backbone.
///
/// Images are cut into patches, each flattened patch (values in `[0, 1]`) is
/// multiplied by a fixed Gaussian projection, and 2-D sinusoidal positional
/// encodings are added. Text is a hashed bag of words: the mean of fixed
/// Gaussian word vectors, L2-normalized.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    cfg: EncoderConfig,
    projection: Mat,
    word_table: Mat,
}

const PROJECTION_STREAM: u64 = 0x5eed_0001;
const WORD_STREAM: u64 = 0x5eed_0002;

fn gaussian_matrix(seed: u64, rows: usize, cols: usize, std: f64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

/// FNV-1a; stable across platforms and releases.
fn hash_word(word: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl ToyEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let projection = gaussian_matrix(
            cfg.seed ^ PROJECTION_STREAM,
            patch_dim,
            cfg.d,
            1.0 / (patch_dim as f64).sqrt(),
        );
        let word_table = gaussian_matrix(cfg.seed ^ WORD_STREAM, cfg.hash_vocab, cfg.d, 1.0);
        Ok(Self {
            cfg,
            projection,
            word_table,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `patch_dim × d` projection applied to flattened patches.
    pub fn projection(&self) -> &Mat {
        &self.projection
    }

    pub fn word_table(&self) -> &Mat {
        &self.word_table
    }

    pub fn word_index(&self, word: &str) -> usize {
        (hash_word(word, self.cfg.seed) % self.cfg.hash_vocab as u64) as usize
    }

    /// Flattened patch `(pr, pc)`: pixels in row-major order, RGB interleaved,
    /// scaled to `[0, 1]`.
    pub fn flatten_patch(&self, image: &RgbImage, pr: usize, pc: usize) -> Vec<f64> {
        let p = self.cfg.patch_size;
        let mut out = Vec::with_capacity(p * p * 3);
        for y in 0..p {
            for x in 0..p {
                let px = image.get_pixel((pc * p + x) as u32, (pr * p + y) as u32);
                out.extend(px.0.iter().map(|&c| c as f64 / 255.0));
            }
        }
        out
    }

    fn embed_words(&self, text: &str) -> Result<Mat> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::Invalid(format!("`{text}` contains no words")));
        }
        let mut acc = ndarray::Array1::<f64>::zeros(self.cfg.d);
        for w in &words {
            acc += &self.word_table.row(self.word_index(w));
        }
        acc /= words.len() as f64;
        let norm = acc.dot(&acc).sqrt();
        if norm == 0.0 {
            return Err(Error::Invalid(format!("`{text}` embeds to the zero vector")));
        }
        acc /= norm;
        Ok(acc.insert_axis(ndarray::Axis(0)))
    }
}

/// Fixed 2-D sinusoidal encoding: the first half of the channels encodes the
/// grid row, the second half the grid column. With an odd width the last
/// channel stays zero.
pub fn positional_encoding(rows: usize, cols: usize, d: usize) -> Mat {
    let half = d / 2;
    let mut pe = Mat::zeros((rows * cols, d));
    let fill = |pe: &mut Mat, token: usize, offset: usize, pos: f64| {
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
            pe[[token, offset + i]] = if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            };
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let token = r * cols + c;
            fill(&mut pe, token, 0, r as f64);
            fill(&mut pe, token, half, c as f64);
        }
    }
    pe
}

impl VisualEncoder for ToyEncoder {
    fn encode_image(&self, image: &RgbImage) -> Result<VisualTokens> {
        let p = self.cfg.patch_size;
        let (w, h) = (image.width() as usize, image.height() as usize);
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Invalid(format!(
                "image {h}x{w} is not divisible by patch size {p}"
            )));
        }
        let (rows, cols) = (h / p, w / p);
        let mut patches = Mat::zeros((rows * cols, p * p * 3));
        for r in 0..rows {
            for c in 0..cols {
                let flat = self.flatten_patch(image, r, c);
                patches
                    .row_mut(r * cols + c)
                    .assign(&ndarray::ArrayView1::from(&flat));
            }
        }
        let data = patches.dot(&self.projection) + positional_encoding(rows, cols, self.cfg.d);
        Ok(VisualTokens {
            data,
            grid: (rows, cols),
            patch_size: p,
        })
    }

    fn dim(&self) -> usize {
        self.cfg.d
    }
}

impl TextEncoder for ToyEncoder {
    fn encode_attributes(&self, attributes: &[String]) -> Result<AttributeTokens> {
        if attributes.is_empty() {
            return Err(Error::Invalid("no attributes to encode".into()));
        }
        let mut data = Mat::zeros((attributes.len(), self.cfg.d));
        for (i, a) in attributes.iter().enumerate() {
            data.row_mut(i).assign(&self.embed_words(a)?.row(0));
        }
        Ok(AttributeTokens {
            data,
            labels: attributes.to_vec(),
        })
    }

    fn encode_sentence(&self, sentence: &str) -> Result<Mat> {
        self.embed_words(sentence)
    }

    fn dim(&self) -> usize {
        self.cfg.d
    }
}
