//! Token embedding and transformer encoding for RGB patches, Event patches,
//! and event voxels.

use std::cmp::Ordering;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{invalid_config, invalid_input, shape, Result};
use crate::graph::{trunc_normal, ParamId, ParamStore, Real, Tape, Var};
use crate::masking::PatchSequence;
use crate::nn::{Linear, StackConfig, TransformerStack, INIT_STD};

pub type EncoderConfig = StackConfig;

/// Origin of one row in a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Cls,
    /// Grid index of an image patch, or group index of a voxel token.
    Patch(usize),
}

/// Rows of a tape node together with the grid position of each row.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub var: Var,
    pub slots: Vec<Slot>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cls_index(&self) -> Option<usize> {
        self.slots.iter().position(|s| *s == Slot::Cls)
    }

    /// Grid positions of the non-CLS rows, in row order.
    pub fn positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Patch(p) => Some(*p),
                Slot::Cls => None,
            })
            .collect()
    }
}

/// Patch embedding, CLS token, positional table, and transformer stack for
/// one image modality. Parameters are never shared between modalities.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    /// `(num_patches + 1) × dim`; row 0 belongs to the CLS token.
    pub pos: ParamId,
    pub stack: TransformerStack,
}

impl ImageEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        patch_dim: usize,
        num_patches: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        Ok(Self {
            patch_embed: Linear::new(store, rng, &format!("{name}.patch_embed"), patch_dim, cfg.dim, true)?,
            cls: store.add(format!("{name}.cls_token"), trunc_normal(1, cfg.dim, INIT_STD, rng))?,
            pos: store.add(
                format!("{name}.pos_embed"),
                trunc_normal(num_patches + 1, cfg.dim, INIT_STD, rng),
            )?,
            stack: TransformerStack::new(store, rng, &format!("{name}.encoder"), cfg)?,
        })
    }
}

/// Maps the visible patches through the patch embedding (a stride-`p`
/// convolution is the same linear map on the flattened patch), prepends the
/// CLS token, and adds positional entries for CLS and each visible position.
pub fn embed_visible_patches<T: Real>(
    tape: &mut Tape<'_, T>,
    encoder: &ImageEncoder,
    patches: &PatchSequence,
    visible: &[usize],
) -> Result<TokenSequence> {
    if let Some(&bad) = visible.iter().find(|&&i| i >= patches.len()) {
        return Err(invalid_input(format!(
            "visible index {bad} out of range for {} patches",
            patches.len()
        )));
    }
    let table_rows = tape.store().get(encoder.pos).nrows();
    if table_rows != patches.len() + 1 {
        return Err(shape(format!(
            "positional table has {table_rows} rows for {} patches",
            patches.len()
        )));
    }
    let x = patches
        .patches
        .select(Axis(0), visible)
        .mapv(|v| T::from(v).unwrap());
    let x = tape.input(x);
    let emb = encoder.patch_embed.forward(tape, x)?;
    let cls = tape.param(encoder.cls);
    let tokens = tape.concat_rows(&[cls, emb])?;
    let pos = tape.param(encoder.pos);
    let pos = tape.gather_rows(pos, std::iter::once(0).chain(visible.iter().map(|&i| i + 1)).collect())?;
    let var = tape.add(tokens, pos)?;
    let slots = std::iter::once(Slot::Cls)
        .chain(visible.iter().map(|&i| Slot::Patch(i)))
        .collect();
    Ok(TokenSequence { var, slots })
}

/// Pre-norm transformer encoding; shape and slots are preserved.
pub fn encode_modality<T: Real>(
    tape: &mut Tape<'_, T>,
    stack: &TransformerStack,
    tokens: &TokenSequence,
    trace: Option<&mut Vec<Var>>,
) -> Result<TokenSequence> {
    let width = tape.value(tokens.var).ncols();
    if width != stack.dim {
        return Err(invalid_config(format!(
            "token width {width} does not match encoder width {}",
            stack.dim
        )));
    }
    Ok(TokenSequence {
        var: stack.forward(tape, tokens.var, trace)?,
        slots: tokens.slots.clone(),
    })
}

/// Per-token linear map from encoder width to decoder width.
pub fn project_tokens<T: Real>(
    tape: &mut Tape<'_, T>,
    projection: &Linear,
    tokens: &TokenSequence,
) -> Result<TokenSequence> {
    Ok(TokenSequence {
        var: projection.forward(tape, tokens.var)?,
        slots: tokens.slots.clone(),
    })
}

/// Fixed-count set of voxel records, each `events_per_voxel` events of
/// `attrs_per_event` attributes laid out `(x, y, t, polarity)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSet {
    pub events_per_voxel: usize,
    pub attrs_per_event: usize,
    pub records: Array2<f32>,
}

pub const ATTR_X: usize = 0;
pub const ATTR_Y: usize = 1;
pub const ATTR_T: usize = 2;
pub const ATTR_P: usize = 3;

impl VoxelSet {
    pub fn new(records: Array2<f32>, events_per_voxel: usize, attrs_per_event: usize) -> Result<Self> {
        if records.ncols() != events_per_voxel * attrs_per_event {
            return Err(invalid_input(format!(
                "record width {} != {events_per_voxel} x {attrs_per_event}",
                records.ncols()
            )));
        }
        Ok(Self {
            events_per_voxel,
            attrs_per_event,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.records.nrows() == 0
    }

    pub fn record_width(&self) -> usize {
        self.records.ncols()
    }

    /// Mean `(t, y, x)` of a record's events.
    fn sort_key(&self, row: usize) -> [f32; 3] {
        let rec = self.records.row(row);
        let a = self.attrs_per_event;
        let e = self.events_per_voxel as f32;
        let mean = |attr: usize| (0..self.events_per_voxel).map(|k| rec[k * a + attr]).sum::<f32>() / e;
        [mean(ATTR_T), mean(ATTR_Y), mean(ATTR_X)]
    }
}

/// Brings a variable-size voxel collection to exactly `count` records.
///
/// Equal counts pass through unchanged. Smaller sets keep every original
/// record and are padded with uniform draws (with replacement); larger sets
/// are subsampled uniformly without replacement, keeping original order.
pub fn resample_voxels<R: Rng + ?Sized>(raw: &VoxelSet, count: usize, rng: &mut R) -> Result<VoxelSet> {
    let have = raw.len();
    if have == 0 {
        return Err(invalid_input("cannot resample an empty voxel set"));
    }
    let idx: Vec<usize> = match have.cmp(&count) {
        Ordering::Equal => return Ok(raw.clone()),
        Ordering::Less => (0..have)
            .chain((have..count).map(|_| rng.random_range(0..have)))
            .collect(),
        Ordering::Greater => {
            let mut keep = rand::seq::index::sample(rng, have, count).into_vec();
            keep.sort_unstable();
            keep
        }
    };
    VoxelSet::new(
        raw.records.select(Axis(0), &idx),
        raw.events_per_voxel,
        raw.attrs_per_event,
    )
}

/// Sorts records by mean `(t, y, x)` ascending and concatenates contiguous
/// runs of `count / groups` records into one row per group.
pub fn group_voxel_records(voxels: &VoxelSet, groups: usize) -> Result<Array2<f32>> {
    let v = voxels.len();
    if groups == 0 || !v.is_multiple_of(groups) {
        return Err(invalid_config(format!(
            "{v} voxels cannot be split evenly into {groups} groups"
        )));
    }
    let mut order: Vec<usize> = (0..v).collect();
    let keys: Vec<[f32; 3]> = (0..v).map(|i| voxels.sort_key(i)).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    let per = v / groups;
    let width = voxels.record_width();
    let sorted = voxels.records.select(Axis(0), &order);
    sorted
        .into_shape_with_order((groups, per * width))
        .map_err(|e| shape(e.to_string()))
}

/// Linear token embedding, CLS token, positional table, and transformer
/// stack for voxel groups.
#[derive(Clone, Debug)]
pub struct VoxelEncoder {
    pub token_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub stack: TransformerStack,
    pub groups: usize,
}

impl VoxelEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group_width: usize,
        groups: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        Ok(Self {
            token_embed: Linear::new(store, rng, &format!("{name}.token_embed"), group_width, cfg.dim, true)?,
            cls: store.add(format!("{name}.cls_token"), trunc_normal(1, cfg.dim, INIT_STD, rng))?,
            pos: store.add(format!("{name}.pos_embed"), trunc_normal(groups + 1, cfg.dim, INIT_STD, rng))?,
            stack: TransformerStack::new(store, rng, &format!("{name}.encoder"), cfg)?,
            groups,
        })
    }
}

pub fn tokenize_voxels<T: Real>(
    tape: &mut Tape<'_, T>,
    encoder: &VoxelEncoder,
    voxels: &VoxelSet,
) -> Result<TokenSequence> {
    let grouped = group_voxel_records(voxels, encoder.groups)?;
    let (fan_in, _) = encoder.token_embed.dims(tape.store());
    if grouped.ncols() != fan_in {
        return Err(shape(format!(
            "voxel group width {} does not match embedding input {fan_in}",
            grouped.ncols()
        )));
    }
    let x = tape.input(grouped.mapv(|v| T::from(v).unwrap()));
    let emb = encoder.token_embed.forward(tape, x)?;
    let cls = tape.param(encoder.cls);
    let tokens = tape.concat_rows(&[cls, emb])?;
    let pos = tape.param(encoder.pos);
    let var = tape.add(tokens, pos)?;
    let slots = std::iter::once(Slot::Cls)
        .chain((0..encoder.groups).map(Slot::Patch))
        .collect();
    Ok(TokenSequence { var, slots })
}

pub fn encode_voxels<T: Real>(
    tape: &mut Tape<'_, T>,
    encoder: &VoxelEncoder,
    tokens: &TokenSequence,
    trace: Option<&mut Vec<Var>>,
) -> Result<TokenSequence> {
    encode_modality(tape, &encoder.stack, tokens, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(depth: usize, dim: usize, final_norm: bool) -> EncoderConfig {
        EncoderConfig {
            depth,
            dim,
            heads: 2,
            mlp_ratio: 2,
            final_norm,
        }
    }

    #[test]
    fn embed_matches_matrix_arithmetic() {
        // two 1x1x3 patches embedded into width 3
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc_cfg = EncoderConfig { heads: 1, ..cfg(0, 3, false) };
        let enc = ImageEncoder::new(&mut store, &mut rng, "e", 3, 2, &enc_cfg).unwrap();
        let w = array![[1.0, 2.0, 0.0], [0.0, 1.0, -1.0], [0.5, 0.0, 1.0]];
        let b = array![[0.1, 0.2, 0.3]];
        let pos = array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        *store.get_mut(enc.patch_embed.weight) = w.clone();
        *store.get_mut(enc.patch_embed.bias.unwrap()) = b.clone();
        *store.get_mut(enc.pos) = pos.clone();
        let patches = PatchSequence::new(array![[1.0f32, 2.0, 3.0], [-1.0, 0.5, 0.25]], 1, 1, 2, 3).unwrap();
        let mut tape = Tape::new(&store);
        let seq = embed_visible_patches(&mut tape, &enc, &patches, &[1]).unwrap();
        let out = tape.value(seq.var);
        assert_eq!(out.nrows(), 2);
        let p = [-1.0, 0.5, 0.25];
        for j in 0..3 {
            let expected = (0..3).map(|i| p[i] * w[[i, j]]).sum::<f64>() + b[[0, j]] + pos[[2, j]];
            assert!((out[[1, j]] - expected).abs() < 1e-12);
        }
        assert_eq!(seq.slots, vec![Slot::Cls, Slot::Patch(1)]);
    }

    #[test]
    fn zero_weights_leave_only_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let enc = ImageEncoder::new(&mut store, &mut rng, "e", 12, 4, &cfg(0, 4, false)).unwrap();
        store.get_mut(enc.patch_embed.weight).fill(0.0);
        store.get_mut(enc.pos).fill(0.0);
        let cls = store.get(enc.cls).clone();
        let patches = PatchSequence::new(Array2::zeros((4, 12)), 2, 2, 2, 3).unwrap();
        let mut tape = Tape::new(&store);
        let seq = embed_visible_patches(&mut tape, &enc, &patches, &[0, 3]).unwrap();
        let out = tape.value(seq.var);
        assert_eq!(out.row(0), cls.row(0));
        assert!(out.slice(s![1.., ..]).iter().all(|&v| v == 0.0));
        assert!(embed_visible_patches(&mut tape, &enc, &patches, &[4]).is_err());
    }

    #[test]
    fn depth_zero_is_identity_and_width_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let stack = TransformerStack::new(&mut store, &mut rng, "s", &cfg(0, 8, false)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Array2::from_shape_fn((5, 8), |(i, j)| (i * j) as f32));
        let seq = TokenSequence {
            var: x,
            slots: vec![Slot::Cls; 5],
        };
        let out = encode_modality(&mut tape, &stack, &seq, None).unwrap();
        assert_eq!(tape.value(out.var), tape.value(x));
        let y = tape.input(Array2::zeros((5, 6)));
        let bad = TokenSequence { var: y, slots: vec![Slot::Cls; 5] };
        assert!(matches!(
            encode_modality(&mut tape, &stack, &bad, None),
            Err(crate::Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let stack = TransformerStack::new(&mut store, &mut rng, "s", &cfg(2, 8, true)).unwrap();
        let x = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let run = |input: Array2<f64>| {
            let mut tape = Tape::new(&store);
            let v = tape.input(input);
            let y = stack.forward(&mut tape, v, None).unwrap();
            tape.value(y).clone()
        };
        let base = run(x.clone());
        let permuted = run(x.select(Axis(0), &perm));
        for (r, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((permuted[[r, j]] - base[[p, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let proj = Linear::new(&mut store, &mut rng, "p", 6, 3, false).unwrap();
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) / 3.0);
        let y = Array2::from_shape_fn((4, 6), |(i, j)| ((i * j) % 5) as f64);
        let (a, b) = (1.7, -0.3);
        let apply = |m: Array2<f64>| {
            let mut tape = Tape::new(&store);
            let v = tape.input(m);
            let seq = TokenSequence { var: v, slots: vec![Slot::Cls; 4] };
            let out = project_tokens(&mut tape, &proj, &seq).unwrap();
            tape.value(out.var).clone()
        };
        let lhs = apply(&x * a + &y * b);
        let rhs = apply(x) * a + apply(y) * b;
        assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn identity_projection_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let proj = Linear::new(&mut store, &mut rng, "p", 4, 4, true).unwrap();
        *store.get_mut(proj.weight) = Array2::eye(4);
        let mut tape = Tape::new(&store);
        let v = tape.input(Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f32));
        let seq = TokenSequence { var: v, slots: vec![Slot::Cls; 3] };
        let out = project_tokens(&mut tape, &proj, &seq).unwrap();
        assert_eq!(tape.value(out.var), tape.value(v));
    }

    fn voxel_set(rows: usize, seed: u64) -> VoxelSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelSet::new(Array2::from_shape_simple_fn((rows, 8), || rng.random::<f32>()), 2, 4).unwrap()
    }

    #[test]
    fn resampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let same = voxel_set(8, 1);
        assert_eq!(resample_voxels(&same, 8, &mut rng).unwrap(), same);

        let few = voxel_set(3, 2);
        let padded = resample_voxels(&few, 8, &mut rng).unwrap();
        assert_eq!(padded.len(), 8);
        for r in padded.records.rows() {
            assert!(few.records.rows().into_iter().any(|o| o == r));
        }

        let empty = VoxelSet::new(Array2::zeros((0, 8)), 2, 4).unwrap();
        assert!(resample_voxels(&empty, 8, &mut rng).is_err());
    }

    #[test]
    fn subsampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = VoxelSet::new(
            Array2::from_shape_fn((1000, 1), |(i, _)| i as f32),
            1,
            1,
        )
        .unwrap();
        let trials = 10_000;
        let mut counts = vec![0usize; 1000];
        for _ in 0..trials {
            let out = resample_voxels(&raw, 100, &mut rng).unwrap();
            assert_eq!(out.len(), 100);
            for &v in out.records.iter() {
                counts[v as usize] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.1).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn grouping_matches_sort_and_slice() {
        let vox = voxel_set(8, 9);
        let grouped = group_voxel_records(&vox, 4).unwrap();
        assert_eq!(grouped.dim(), (4, 16));
        // oracle: explicit keys, bubble sort, slice
        let mut rows: Vec<Vec<f32>> = vox.records.rows().into_iter().map(|r| r.to_vec()).collect();
        let key = |r: &Vec<f32>| [(r[2] + r[6]) / 2.0, (r[1] + r[5]) / 2.0, (r[0] + r[4]) / 2.0];
        for i in 0..rows.len() {
            for j in 0..rows.len() - 1 - i {
                if key(&rows[j]) > key(&rows[j + 1]) {
                    rows.swap(j, j + 1);
                }
            }
        }
        for g in 0..4 {
            let expected: Vec<f32> = [rows[2 * g].clone(), rows[2 * g + 1].clone()].concat();
            assert_eq!(grouped.row(g).to_vec(), expected);
        }
        assert!(group_voxel_records(&vox, 3).is_err());
    }

    #[test]
    fn one_voxel_per_group_with_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f32>::new();
        let enc = VoxelEncoder::new(&mut store, &mut rng, "v", 8, 4, &cfg(0, 4, false)).unwrap();
        store.get_mut(enc.token_embed.weight).fill(0.0);
        store.get_mut(enc.token_embed.bias.unwrap()).fill(0.5);
        let pos = store.get(enc.pos).clone();
        let mut tape = Tape::new(&store);
        let seq = tokenize_voxels(&mut tape, &enc, &voxel_set(4, 11)).unwrap();
        let out = tape.value(seq.var);
        assert_eq!(out.nrows(), 5);
        for i in 1..5 {
            for j in 0..4 {
                assert_eq!(out[[i, j]], 0.5 + pos[[i, j]]);
            }
        }
    }
}
