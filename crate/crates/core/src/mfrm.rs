//! Multimodal fusion reconstruction: RGB tokens, the Event tokens at shared
//! positions, and optionally voxel tokens pass through one transformer
//! block; the RGB rows of the result reconstruct the RGB image.
//!
//! Only Event tokens at positions visible in *both* plans may enter the
//! block. Every entry point re-checks this so masked RGB content can never
//! reach the reconstruction through the Event branch.

use std::collections::BTreeSet;

use rand::Rng;

use crate::decoders::{
    assemble_decoder_input, decode_and_predict, reconstruction_mse, Decoder, DecoderOutput, ReconTerm,
};
use crate::encoders::{Slot, TokenSequence};
use crate::error::{invalid_input, Error, Result};
use crate::graph::{trunc_normal, ParamId, ParamStore, Real, Tape, Var};
use crate::masking::{MaskPlan, PatchSequence};
use crate::nn::{Block, StackConfig, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Event,
    Voxel,
}

/// Output of the fusion block with the source modality of each row.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub var: Var,
    pub slots: Vec<Slot>,
    pub provenance: Vec<Modality>,
}

/// The fusion block and the mask token used for fused reconstruction.
/// `decoder` is `Some` only when fused reconstruction uses its own decoder
/// instead of the RGB decoder.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub block: Block,
    pub mask_token: ParamId,
    pub decoder: Option<Decoder>,
}

impl FusionModule {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &StackConfig,
        dedicated_decoder: Option<(&StackConfig, usize, usize)>,
    ) -> Result<Self> {
        let block = Block::new(store, rng, &format!("{name}.block"), cfg.dim, cfg.heads, cfg.mlp_ratio)?;
        let mask_token = store.add(format!("{name}.mask_token"), trunc_normal(1, cfg.dim, INIT_STD, rng))?;
        let decoder = dedicated_decoder
            .map(|(dec_cfg, n, patch_dim)| Decoder::new(store, rng, &format!("{name}.decoder"), n, patch_dim, dec_cfg))
            .transpose()?;
        Ok(Self {
            block,
            mask_token,
            decoder,
        })
    }
}

/// Errors unless every shared position is visible in the RGB plan.
pub fn check_anti_leakage(plan: &MaskPlan) -> Result<()> {
    let rgb: BTreeSet<_> = plan.rgb_visible.iter().collect();
    let event: BTreeSet<_> = plan.event_visible.iter().collect();
    for p in &plan.shared {
        if !rgb.contains(p) || !event.contains(p) {
            return Err(Error::Integrity(format!(
                "shared position {p} is masked in one modality; fusion would leak masked content"
            )));
        }
    }
    Ok(())
}

/// Picks the Event tokens at the plan's shared positions, ascending, CLS
/// excluded.
pub fn select_shared_event_tokens<T: Real>(
    tape: &mut Tape<'_, T>,
    event_tokens: &TokenSequence,
    plan: &MaskPlan,
) -> Result<TokenSequence> {
    check_anti_leakage(plan)?;
    let mut rows = Vec::with_capacity(plan.shared.len());
    for &p in &plan.shared {
        let row = event_tokens
            .slots
            .iter()
            .position(|s| *s == Slot::Patch(p))
            .ok_or_else(|| Error::Integrity(format!("event tokens lack shared position {p}")))?;
        rows.push(row);
    }
    let var = tape.gather_rows(event_tokens.var, rows)?;
    Ok(TokenSequence {
        var,
        slots: plan.shared.iter().map(|&p| Slot::Patch(p)).collect(),
    })
}

/// Concatenates the parts along the sequence axis (in the given order) and
/// runs the fusion block once.
pub fn fuse_tokens<T: Real>(
    tape: &mut Tape<'_, T>,
    block: &Block,
    parts: &[(&TokenSequence, Modality)],
) -> Result<FusedSequence> {
    let mut slots = Vec::new();
    let mut provenance = Vec::new();
    let mut vars = Vec::with_capacity(parts.len());
    let dim = tape.store().get(block.norm1.gamma).ncols();
    for (seq, modality) in parts {
        let width = tape.value(seq.var).ncols();
        if width != dim {
            return Err(crate::error::invalid_config(format!(
                "{modality:?} tokens are {width} wide, fusion block expects {dim}"
            )));
        }
        slots.extend_from_slice(&seq.slots);
        provenance.extend(std::iter::repeat_n(*modality, seq.len()));
        vars.push(seq.var);
    }
    let input = tape.concat_rows(&vars)?;
    let (var, _) = block.forward(tape, input)?;
    Ok(FusedSequence {
        var,
        slots,
        provenance,
    })
}

/// Drops the non-RGB rows of a fused sequence, scatters the rest onto the
/// grid with `mask_token` at RGB-masked positions, and decodes.
pub fn reconstruct_from_fused<T: Real>(
    tape: &mut Tape<'_, T>,
    fused: &FusedSequence,
    plan: &MaskPlan,
    decoder: &Decoder,
    mask_token: ParamId,
) -> Result<DecoderOutput> {
    if fused.provenance.len() != fused.slots.len() {
        return Err(Error::Integrity("fused sequence is missing provenance tags".into()));
    }
    check_anti_leakage(plan)?;
    let rgb_visible: BTreeSet<_> = plan.rgb_visible.iter().collect();
    for (slot, m) in fused.slots.iter().zip(&fused.provenance) {
        if let (Modality::Event, Slot::Patch(p)) = (m, slot) {
            if !rgb_visible.contains(p) {
                return Err(Error::Integrity(format!(
                    "event token at RGB-masked position {p} entered fusion"
                )));
            }
        }
    }
    let keep: Vec<usize> = fused
        .provenance
        .iter()
        .enumerate()
        .filter(|(_, m)| **m == Modality::Rgb)
        .map(|(i, _)| i)
        .collect();
    let slots: Vec<Slot> = keep.iter().map(|&i| fused.slots[i]).collect();
    let var = tape.gather_rows(fused.var, keep)?;
    let rgb = TokenSequence { var, slots };
    let n = tape.store().get(decoder.pos).nrows() - 1;
    let tokens = assemble_decoder_input(tape, &rgb, &plan.rgb_visible, n, mask_token, decoder.pos)?;
    decode_and_predict(tape, decoder, &tokens)
}

/// Fusion reconstruction loss for one sample: both fused predictions scored
/// on the RGB-masked pixels only, divided by the masked pixel count of both
/// terms together.
pub fn loss_fusion<T: Real>(
    tape: &mut Tape<'_, T>,
    pred_re: Var,
    pred_rev: Var,
    target_rgb: &PatchSequence,
    plan: &MaskPlan,
) -> Result<Var> {
    let masked = plan.rgb_masked();
    if masked.is_empty() {
        return Err(invalid_input("no RGB-masked patches"));
    }
    reconstruction_mse(
        tape,
        &[
            ReconTerm {
                pred: pred_re,
                target: target_rgb,
                masked: &masked,
            },
            ReconTerm {
                pred: pred_rev,
                target: target_rgb,
                masked: &masked,
            },
        ],
    )
}
