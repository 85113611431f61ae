//! Cross-modal contrastive alignment (RGB-Event and RGB-Voxel) and the
//! combined training objective.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenSequence;
use crate::error::{shape, Error, Result};
use crate::graph::{ParamId, ParamStore, Real, Tape, Var};

pub const MAX_SCALE: f64 = 100.0;

/// `ln(1 / 0.07)`.
pub fn initial_log_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationMode {
    /// Output row of the CLS slot.
    #[default]
    Cls,
    /// Mean over every row, CLS included.
    MeanPool,
}

/// Learnable logit scale stored in log space.
#[derive(Clone, Debug)]
pub struct ContrastiveScale {
    pub log_scale: ParamId,
}

impl ContrastiveScale {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            log_scale: store.add(
                format!("{name}.log_scale"),
                Array2::from_elem((1, 1), T::lit(initial_log_scale())),
            )?,
        })
    }

    /// `min(exp(log_scale), 100)` as a `1 × 1` node.
    pub fn effective<T: Real>(&self, tape: &mut Tape<'_, T>) -> Var {
        let p = tape.param(self.log_scale);
        let e = tape.exp(p);
        tape.clamp_max(e, T::lit(MAX_SCALE))
    }
}

/// Whole-input representation (`1 × dim`) taken from a token sequence.
pub fn extract_representation<T: Real>(
    tape: &mut Tape<'_, T>,
    seq: &TokenSequence,
    mode: RepresentationMode,
) -> Result<Var> {
    let cls = seq
        .cls_index()
        .ok_or_else(|| Error::Integrity("token sequence has no CLS slot".into()))?;
    match mode {
        RepresentationMode::Cls => tape.gather_rows(seq.var, vec![cls]),
        RepresentationMode::MeanPool => tape.mean_rows(seq.var),
    }
}

/// Row-wise L2 normalization; zero rows are rejected.
pub fn normalize_features<T: Real>(tape: &mut Tape<'_, T>, batch: Var) -> Result<Var> {
    tape.l2_normalize_rows(batch)
}

/// `lg_ab = s · a bᵀ` and `lg_ba = lg_abᵀ` (equal to `s · b aᵀ` exactly).
pub fn contrastive_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    a: Var,
    b: Var,
    scale: Var,
) -> Result<(Var, Var)> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.dim() != bv.dim() {
        return Err(shape(format!("contrastive batches {:?} vs {:?}", av.dim(), bv.dim())));
    }
    let bt = tape.transpose(b);
    let sim = tape.matmul(a, bt)?;
    let ab = tape.mul_scalar(sim, scale)?;
    let ba = tape.transpose(ab);
    Ok((ab, ba))
}

/// `-(1/N) Σ_i log softmax(row_i)[i]`, stabilized by row-max subtraction.
pub fn info_nce_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var) -> Result<Var> {
    let n = tape.value(logits).nrows();
    if n < 2 {
        return Err(crate::error::invalid_input(format!(
            "contrastive batch of {n} has no negatives"
        )));
    }
    tape.diagonal_cross_entropy(logits)
}

/// The four directional terms of the contrastive objective.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms {
    pub rgb_event: Var,
    pub event_rgb: Var,
    pub rgb_voxel: Var,
    pub voxel_rgb: Var,
    pub total: Var,
}

/// `L_re + L_er + L_rv + L_vr` over raw (unnormalized) representation
/// batches. There is no Event-Voxel term.
pub fn total_contrastive_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    rgb: Var,
    event: Var,
    voxel: Var,
    scale: Var,
) -> Result<ContrastiveTerms> {
    let r = normalize_features(tape, rgb)?;
    let e = normalize_features(tape, event)?;
    let v = normalize_features(tape, voxel)?;
    let (re, er) = contrastive_logits(tape, r, e, scale)?;
    let (rv, vr) = contrastive_logits(tape, r, v, scale)?;
    let rgb_event = info_nce_loss(tape, re)?;
    let event_rgb = info_nce_loss(tape, er)?;
    let rgb_voxel = info_nce_loss(tape, rv)?;
    let voxel_rgb = info_nce_loss(tape, vr)?;
    let a = tape.add(rgb_event, event_rgb)?;
    let b = tape.add(rgb_voxel, voxel_rgb)?;
    let total = tape.add(a, b)?;
    Ok(ContrastiveTerms {
        rgb_event,
        event_rgb,
        rgb_voxel,
        voxel_rgb,
        total,
    })
}

/// Unweighted sum of the enabled loss terms.
pub fn total_loss<T: Real>(tape: &mut Tape<'_, T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| crate::error::invalid_input("no loss terms"))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// [`info_nce_loss`] on a plain matrix.
pub fn info_nce(logits: &Array2<f64>) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.input(logits.clone());
    let loss = info_nce_loss(&mut tape, l)?;
    Ok(tape.scalar(loss))
}
