//! Per-modality reconstruction decoders and the masked reconstruction loss.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::encoders::{Slot, TokenSequence};
use crate::error::{invalid_input, shape, Result};
use crate::graph::{trunc_normal, ParamId, ParamStore, Real, Tape, Var};
use crate::masking::{MaskPlan, PatchSequence};
use crate::nn::{Linear, StackConfig, TransformerStack, INIT_STD};

pub type DecoderConfig = StackConfig;

/// Mask token, positional table, transformer stack, and pixel head.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `1 × dim`, substituted at every masked position.
    pub mask_token: ParamId,
    /// `(num_patches + 1) × dim`.
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub head: Linear,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        num_patches: usize,
        patch_dim: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        Ok(Self {
            mask_token: store.add(format!("{name}.mask_token"), trunc_normal(1, cfg.dim, INIT_STD, rng))?,
            pos: store.add(
                format!("{name}.pos_embed"),
                trunc_normal(num_patches + 1, cfg.dim, INIT_STD, rng),
            )?,
            stack: TransformerStack::new(store, rng, &format!("{name}.decoder"), cfg)?,
            head: Linear::new(store, rng, &format!("{name}.head"), cfg.dim, patch_dim, true)?,
        })
    }
}

/// Scatters visible tokens back onto the full grid.
///
/// Row 0 is the CLS token; row `1 + p` holds the visible token for grid
/// position `p` or a copy of `mask_token`. Every row then receives its
/// positional entry. `positions` must list the grid position of each
/// non-CLS row of `visible`, in row order.
pub fn assemble_decoder_input<T: Real>(
    tape: &mut Tape<'_, T>,
    visible: &TokenSequence,
    positions: &[usize],
    num_patches: usize,
    mask_token: ParamId,
    pos_table: ParamId,
) -> Result<TokenSequence> {
    if visible.len() != positions.len() + 1 || visible.slots.first() != Some(&Slot::Cls) {
        return Err(invalid_input(format!(
            "decoder input needs CLS plus {} visible tokens, got {} rows",
            positions.len(),
            visible.len()
        )));
    }
    if visible.positions() != positions {
        return Err(invalid_input("visible token slots disagree with plan positions"));
    }
    let mut rank = HashMap::with_capacity(positions.len());
    for (r, &p) in positions.iter().enumerate() {
        if p >= num_patches {
            return Err(invalid_input(format!("position {p} >= {num_patches}")));
        }
        if rank.insert(p, r).is_some() {
            return Err(invalid_input(format!("duplicate visible position {p}")));
        }
    }
    let table_rows = tape.store().get(pos_table).nrows();
    if table_rows != num_patches + 1 {
        return Err(shape(format!(
            "decoder positional table has {table_rows} rows for {num_patches} patches"
        )));
    }
    let mask = tape.param(mask_token);
    let pool = tape.concat_rows(&[visible.var, mask])?;
    let mask_row = positions.len() + 1;
    let idx = std::iter::once(0)
        .chain((0..num_patches).map(|p| rank.get(&p).map_or(mask_row, |&r| r + 1)))
        .collect();
    let grid = tape.gather_rows(pool, idx)?;
    let pos = tape.param(pos_table);
    let var = tape.add(grid, pos)?;
    let slots = std::iter::once(Slot::Cls)
        .chain((0..num_patches).map(Slot::Patch))
        .collect();
    Ok(TokenSequence { var, slots })
}

/// Decoder features (CLS included) and per-patch pixel predictions
/// (CLS dropped).
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub features: TokenSequence,
    pub pixels: Var,
}

pub fn decode_and_predict<T: Real>(
    tape: &mut Tape<'_, T>,
    decoder: &Decoder,
    tokens: &TokenSequence,
) -> Result<DecoderOutput> {
    let width = tape.value(tokens.var).ncols();
    if width != decoder.stack.dim {
        return Err(crate::error::invalid_config(format!(
            "decoder width {} but tokens are {width} wide",
            decoder.stack.dim
        )));
    }
    let features = TokenSequence {
        var: decoder.stack.forward(tape, tokens.var, None)?,
        slots: tokens.slots.clone(),
    };
    let patch_rows: Vec<usize> = features
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| **s != Slot::Cls)
        .map(|(i, _)| i)
        .collect();
    let body = tape.gather_rows(features.var, patch_rows)?;
    let pixels = decoder.head.forward(tape, body)?;
    Ok(DecoderOutput { features, pixels })
}

/// One prediction scored against its target on a subset of patches.
pub struct ReconTerm<'a> {
    pub pred: Var,
    pub target: &'a PatchSequence,
    pub masked: &'a [usize],
}

/// Squared pixel error summed over every term's masked patches, divided by
/// the total number of masked pixels across all terms.
pub fn reconstruction_mse<T: Real>(tape: &mut Tape<'_, T>, terms: &[ReconTerm<'_>]) -> Result<Var> {
    let mut pixels = 0usize;
    let mut sums = Vec::with_capacity(terms.len());
    for term in terms {
        let target = term.target.patches.mapv(|v| T::from(v).unwrap());
        if tape.value(term.pred).dim() != target.dim() {
            return Err(shape(format!(
                "prediction {:?} vs target {:?}",
                tape.value(term.pred).dim(),
                target.dim()
            )));
        }
        pixels += term.masked.len() * target.ncols();
        sums.push(tape.sq_err_sum(term.pred, target, term.masked.to_vec())?);
    }
    if pixels == 0 {
        return Err(invalid_input("no masked pixels to score"));
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, T::one() / T::from(pixels).unwrap()))
}

/// Dual-modality masked reconstruction loss for one pair: squared error over
/// RGB-masked and Event-masked pixels, divided by the masked pixel count of
/// both modalities together. Visible patches do not contribute.
pub fn loss_masked_recon<T: Real>(
    tape: &mut Tape<'_, T>,
    pred_rgb: Var,
    pred_event: Var,
    target_rgb: &PatchSequence,
    target_event: &PatchSequence,
    plan: &MaskPlan,
) -> Result<Var> {
    let (rgb_masked, event_masked) = (plan.rgb_masked(), plan.event_masked());
    reconstruction_mse(
        tape,
        &[
            ReconTerm {
                pred: pred_rgb,
                target: target_rgb,
                masked: &rgb_masked,
            },
            ReconTerm {
                pred: pred_event,
                target: target_event,
                masked: &event_masked,
            },
        ],
    )
}

/// [`loss_masked_recon`] on plain predictions, in double precision.
pub fn masked_recon_value(
    pred_rgb: &Array2<f64>,
    pred_event: &Array2<f64>,
    target_rgb: &PatchSequence,
    target_event: &PatchSequence,
    plan: &MaskPlan,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let r = tape.input(pred_rgb.clone());
    let e = tape.input(pred_event.clone());
    let loss = loss_masked_recon(&mut tape, r, e, target_rgb, target_event, plan)?;
    Ok(tape.scalar(loss))
}
