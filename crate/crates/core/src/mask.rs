//! Per-pixel masks from token–pixel similarity.
//!
//! Logits are the similarity between each final visual token and the class
//! token, laid out on the patch grid. Prediction upsamples the logit grid
//! to image size, applies `sigmoid(logit / τ)` and thresholds strictly.

use std::fs;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{sigmoid, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskHeadConfig {
    pub temperature: f64,
    pub threshold: f64,
    pub similarity: Similarity,
    pub upsampling: Upsampling,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            threshold: 0.5,
            similarity: Similarity::Cosine,
            upsampling: Upsampling::Bilinear,
        }
    }
}

impl MaskHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    /// `rows × cols` on the visual token grid.
    pub values: Mat,
    /// `H × W` probabilities, filled by [`LogitMap::with_probs`].
    pub upsampled_probs: Option<Mat>,
}

impl LogitMap {
    pub fn new(values: Mat) -> Self {
        Self {
            values,
            upsampled_probs: None,
        }
    }

    pub fn with_probs(mut self, cfg: &MaskHeadConfig, out_size: (usize, usize)) -> Self {
        self.upsampled_probs = Some(probabilities(&self.values, cfg, out_size));
        self
    }
}

/// Records the similarity logits on the tape, reshaped to `grid`.
pub fn compute_logits_var(
    t: &mut Tape,
    visual: Var,
    token: Var,
    grid: (usize, usize),
    cfg: &MaskHeadConfig,
) -> Result<Var> {
    let (nv, d) = t.shape(visual);
    if t.shape(token) != (1, d) {
        return Err(shape_err(format!(
            "token shape {:?}, expected (1, {d})",
            t.shape(token)
        )));
    }
    if grid.0 * grid.1 != nv {
        return Err(shape_err(format!("grid {grid:?} does not hold {nv} tokens")));
    }
    let scores = match cfg.similarity {
        Similarity::Cosine => {
            let norm = t.value(token).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Invalid("zero-norm class token in cosine mode".into()));
            }
            let v = t.normalize_rows(visual);
            let tok = t.normalize_rows(token);
            t.matmul_t(v, tok)
        }
        Similarity::Dot => t.matmul_t(visual, token),
    };
    Ok(t.reshape(scores, grid.0, grid.1))
}

/// Similarity logits of `visual` (`N_v × d`) against `token` (`1 × d`).
pub fn compute_logits(
    visual: &Mat,
    token: &Mat,
    grid: (usize, usize),
    cfg: &MaskHeadConfig,
) -> Result<LogitMap> {
    let mut t = Tape::new();
    let v = t.constant(visual.clone());
    let tok = t.constant(token.clone());
    let logits = compute_logits_var(&mut t, v, tok, grid, cfg)?;
    Ok(LogitMap::new(t.value(logits).clone()))
}

/// `out × input` matrix resampling a 1-D signal.
///
/// Bilinear uses half-pixel centers with edge clamping; nearest picks the
/// source cell containing the output pixel center.
pub fn resample_matrix(input: usize, output: usize, mode: Upsampling) -> Mat {
    let mut m = Mat::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let center = (o as f64 + 0.5) * scale;
        match mode {
            Upsampling::Nearest => {
                let i = (center.floor() as usize).min(input - 1);
                m[[o, i]] = 1.0;
            }
            Upsampling::Bilinear => {
                let src = (center - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                let frac = src - lo as f64;
                m[[o, lo]] += 1.0 - frac;
                m[[o, hi]] += frac;
            }
        }
    }
    m
}

/// Upsamples a logit grid to `(H, W)` on the tape.
pub fn upsample_var(t: &mut Tape, grid: Var, out_size: (usize, usize), mode: Upsampling) -> Var {
    let (rows, cols) = t.shape(grid);
    if (rows, cols) == out_size {
        return grid;
    }
    let r = t.constant(resample_matrix(rows, out_size.0, mode));
    let c = t.constant(resample_matrix(cols, out_size.1, mode));
    let tall = t.matmul(r, grid);
    t.matmul_t(tall, c)
}

pub fn upsample(grid: &Mat, out_size: (usize, usize), mode: Upsampling) -> Mat {
    let r = resample_matrix(grid.nrows(), out_size.0, mode);
    let c = resample_matrix(grid.ncols(), out_size.1, mode);
    r.dot(grid).dot(&c.t())
}

/// `sigmoid(upsampled / τ)` at `(H, W)`.
pub fn probabilities(logits: &Mat, cfg: &MaskHeadConfig, out_size: (usize, usize)) -> Mat {
    upsample(logits, out_size, cfg.upsampling).mapv(|z| sigmoid(z / cfg.temperature))
}

/// Binary mask (`true` = foreground) of size `out_size`.
pub fn predict_mask(logits: &LogitMap, cfg: &MaskHeadConfig, out_size: (usize, usize)) -> Mat {
    let probs = match &logits.upsampled_probs {
        Some(p) if p.dim() == out_size => p.clone(),
        _ => probabilities(&logits.values, cfg, out_size),
    };
    probs.mapv(|p| if p > cfg.threshold { 1.0 } else { 0.0 })
}

/// 8-bit single-channel image: 0 background, 255 foreground.
pub fn mask_to_image(mask: &Mat) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }])
    })
}

pub fn image_to_mask(img: &GrayImage) -> Mat {
    Mat::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32).0[0] > 127 {
            1.0
        } else {
            0.0
        }
    })
}

pub const PROB_MAGIC: &[u8; 8] = b"ATSGPRB1";

/// Float32 grid: 16-byte header (8-byte magic, `u32` rows, `u32` cols, all
/// little-endian) followed by row-major values.
pub fn write_prob_map(path: &Path, probs: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + probs.len() * 4);
    bytes.extend_from_slice(PROB_MAGIC);
    bytes.extend_from_slice(&(probs.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(probs.ncols() as u32).to_le_bytes());
    for &v in probs.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_prob_map(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != PROB_MAGIC {
        return Err(Error::Invalid(format!("{} is not a probability map", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(Error::Invalid(format!("{}: truncated probability map", path.display())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Invalid(e.to_string()))
}
