//! End-to-end segmentation: frozen encoders, an aggregator and the mask head.

use image::RgbImage;

use crate::aggregator::{Aggregator, TextInput};
use crate::encoders::{ToyEncoder, VisualEncoder, VisualTokens};
use crate::error::{Error, Result};
use crate::mask::{compute_logits_var, predict_mask, upsample_var, LogitMap, MaskHeadConfig};
use crate::tape::{Mat, Tape};

pub struct Segmenter<'a> {
    pub encoder: &'a ToyEncoder,
    pub model: &'a Aggregator,
    pub head: &'a MaskHeadConfig,
}

/// Loss and per-parameter gradients of one example.
pub struct ExampleGrad {
    pub loss: f64,
    pub grads: Vec<Mat>,
}

impl<'a> Segmenter<'a> {
    pub fn new(encoder: &'a ToyEncoder, model: &'a Aggregator, head: &'a MaskHeadConfig) -> Result<Self> {
        if VisualEncoder::dim(encoder) != model.config.d {
            return Err(Error::Config(format!(
                "encoder width {} differs from aggregator width {}",
                VisualEncoder::dim(encoder),
                model.config.d
            )));
        }
        head.validate()?;
        Ok(Self { encoder, model, head })
    }

    /// Logit grid for pre-encoded inputs.
    pub fn logits(&self, visual: &VisualTokens, text: &TextInput) -> Result<LogitMap> {
        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t, false);
        let v = t.constant(visual.data.clone());
        let out = self.model.forward(&mut t, &p, v, text)?;
        let logits = compute_logits_var(&mut t, out.visual, out.token, visual.grid, self.head)?;
        Ok(LogitMap::new(t.value(logits).clone()))
    }

    /// Binary mask at the resolution of the encoded image.
    pub fn predict(&self, visual: &VisualTokens, text: &TextInput) -> Result<Mat> {
        let size = (visual.grid.0 * visual.patch_size, visual.grid.1 * visual.patch_size);
        Ok(predict_mask(&self.logits(visual, text)?, self.head, size))
    }

    /// Encodes `image` and `attributes`, returning the logits (with
    /// probabilities at image size) and the binary mask.
    pub fn segment(&self, image: &RgbImage, attributes: &[String]) -> Result<(LogitMap, Mat)> {
        let visual = self.encoder.encode_image(image)?;
        let text = TextInput::encode(self.encoder, attributes)?;
        let size = (image.height() as usize, image.width() as usize);
        let logits = self.logits(&visual, &text)?.with_probs(self.head, size);
        let mask = predict_mask(&logits, self.head, size);
        Ok((logits, mask))
    }

    /// Pixel cross-entropy at full resolution and its gradient with respect
    /// to every aggregator parameter.
    pub fn loss_and_grads(&self, visual: &VisualTokens, text: &TextInput, target: &Mat) -> Result<ExampleGrad> {
        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t, true);
        let v = t.constant(visual.data.clone());
        let out = self.model.forward(&mut t, &p, v, text)?;
        let logits = compute_logits_var(&mut t, out.visual, out.token, visual.grid, self.head)?;
        let up = upsample_var(&mut t, logits, target.dim(), self.head.upsampling);
        let z = t.scale(up, 1.0 / self.head.temperature);
        let loss = t.bce_with_logits(z, target.clone());
        let grads = t.backward(loss);
        Ok(ExampleGrad {
            loss: t.value(loss)[[0, 0]],
            grads: p.collect_grads(&t, &grads),
        })
    }
}
