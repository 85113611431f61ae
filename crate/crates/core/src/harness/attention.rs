//! CLS-to-patch attention maps.

use std::path::Path;

use ndarray::Array2;

use crate::encoders::{embed_visible_patches, encode_modality, Slot};
use crate::error::{invalid_input, Result};
use crate::graph::Tape;
use crate::masking::MaskPlan;
use crate::model::{ModelState, PreparedSample};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Head-averaged CLS attention per patch, on the patch grid.
    pub raw: Array2<f32>,
    /// `raw` min-max scaled to `[0, 1]`; all zeros when `raw` is constant.
    pub normalized: Array2<f32>,
}

impl AttentionMap {
    pub fn to_gray(&self) -> image::GrayImage {
        let (h, w) = self.normalized.dim();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(self.normalized[[y as usize, x as usize]] * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

pub fn min_max(raw: &Array2<f32>) -> Array2<f32> {
    let lo = raw.fold(f32::INFINITY, |a, &b| a.min(b));
    let hi = raw.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    if hi > lo {
        raw.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(raw.raw_dim())
    }
}

/// Attention of the CLS token over patches at encoder block `layer`
/// (1-based), with every patch visible. `rgb` picks the modality.
pub fn export_attention(
    model: &ModelState<f32>,
    sample: &PreparedSample,
    rgb: bool,
    layer: usize,
) -> Result<AttentionMap> {
    let (enc, patches) = if rgb {
        (&model.layout.rgb_encoder, &sample.rgb)
    } else {
        (&model.layout.event_encoder, &sample.event)
    };
    let depth = enc.stack.blocks.len();
    if layer == 0 || layer > depth {
        return Err(invalid_input(format!("layer {layer} outside 1..={depth}")));
    }
    let n = model.config.num_patches();
    let plan = MaskPlan::fully_visible(n);
    let mut tape = Tape::new(&model.params);
    let tokens = embed_visible_patches(&mut tape, enc, patches, &plan.rgb_visible)?;
    let mut trace = Vec::new();
    encode_modality(&mut tape, &enc.stack, &tokens, Some(&mut trace))?;
    let probs = tape.attention_probs(trace[layer - 1]).expect("attention node");
    let cls = tokens.cls_index().expect("encoder sequences start with CLS");
    let g = model.config.grid();
    let mut raw = Array2::zeros((g, g));
    for (col, slot) in tokens.slots.iter().enumerate() {
        if let Slot::Patch(p) = slot {
            let mean = probs.iter().map(|h| h[[cls, col]]).sum::<f32>() / probs.len() as f32;
            raw[[p / g, p % g]] = mean;
        }
    }
    Ok(AttentionMap {
        normalized: min_max(&raw),
        raw,
    })
}
