//! In-library property suite behind the `verify` subcommand.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    decode_voxels, encode_voxels, generate_synthetic_pair, render_event_frame, simulate_events, voxelize,
    random_scene, SyntheticConfig,
};
use crate::decoders::masked_recon_value;
use crate::encoders::VoxelSet;
use crate::error::Result;
use crate::graph::{ParamStore, Tape};
use crate::harness::checkpoint::{Checkpoint, LoadMode};
use crate::masking::{patchify, sample_mask_plan_with, shared_count, unpatchify, visible_count, ImageArray, MaskPlan, PatchSequence};
use crate::mcl::{contrastive_logits, info_nce};
use crate::mfrm::check_anti_leakage;
use crate::model::{LossFlags, ModelConfig, ModelState, PreparedSample, GROUPS};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<32} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Mask plans drawn per sampling property.
    pub plans: usize,
    /// Fraction of each parameter group's entries checked by finite
    /// differences (at least one entry per group).
    pub grad_fraction: f64,
    /// Shared-position rule handed to the mask sampler; swapping it is how
    /// the suite is mutation-tested.
    pub shared_rule: fn(usize) -> usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            plans: 1000,
            grad_fraction: 0.01,
            shared_rule: shared_count,
        }
    }
}

/// Sequence lengths seen in one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeReport {
    pub patches: usize,
    pub visible: usize,
    pub mask_tokens: usize,
    pub fused_re: usize,
    pub fused_rev: usize,
    pub decoder_input: usize,
}

/// Base-width model with zero-depth stacks: all sequence lengths match
/// the full model, construction stays cheap.
pub fn shallow_base_config() -> ModelConfig {
    let mut c = ModelConfig::base();
    c.encoder.depth = 0;
    c.voxel_encoder.depth = 0;
    c.decoder.depth = 0;
    c
}

/// Runs the full forward pass on random inputs and reports the lengths.
pub fn shape_probe(config: ModelConfig, plans: &[MaskPlan], seed: u64) -> Result<ShapeReport> {
    let model = ModelState::<f32>::new(config, seed)?;
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_patches = |rng: &mut ChaCha8Rng| {
        PatchSequence::square(
            Array2::from_shape_simple_fn((c.num_patches(), c.patch_dim()), || rng.random()),
            c.patch_size,
            crate::model::CHANNELS,
        )
    };
    let batch = plans
        .iter()
        .map(|_| {
            Ok(PreparedSample {
                rgb: random_patches(&mut rng)?,
                event: random_patches(&mut rng)?,
                voxels: Some(VoxelSet::new(
                    Array2::from_shape_simple_fn((c.voxel.count, c.voxel.record_width()), || rng.random()),
                    c.voxel.events_per_voxel,
                    c.voxel.attrs_per_event,
                )?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new(&model.params);
    let (_, traces) = model.forward(&mut tape, &batch, plans, LossFlags::ALL)?;
    let t = &traces[0];
    let visible = t.rgb_visible.len() - 1;
    Ok(ShapeReport {
        patches: tape.value(t.rgb_pixels).nrows(),
        visible,
        mask_tokens: t.decoder_input_len - 1 - visible,
        fused_re: t.fused_re_len.unwrap_or(0),
        fused_rev: t.fused_rev_len.unwrap_or(0),
        decoder_input: t.decoder_input_len,
    })
}

/// Finite-difference agreement for one parameter group.
#[derive(Clone, Debug)]
pub struct GradGroupReport {
    pub group: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the total loss with central differences
/// on a random `fraction` of every parameter group.
pub fn gradient_check(
    model: &mut ModelState<f64>,
    batch: &[PreparedSample],
    plans: &[MaskPlan],
    flags: LossFlags,
    fraction: f64,
    seed: u64,
) -> Result<Vec<GradGroupReport>> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let grads = {
        let mut tape = Tape::new(&model.params);
        let (l, _) = model.forward(&mut tape, batch, plans, flags)?;
        tape.backward(l.total)?.into_params()
    };
    let loss_at = |m: &ModelState<f64>| -> Result<f64> {
        let mut tape = Tape::new(&m.params);
        let (l, _) = m.forward(&mut tape, batch, plans, flags)?;
        Ok(tape.scalar(l.total))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for group in GROUPS {
        let ids = model.params.group(group);
        // flat index over the group's entries
        let sizes: Vec<usize> = ids.iter().map(|&id| model.params.get(id).len()).collect();
        let total: usize = sizes.iter().sum();
        let k = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
        let mut max_rel: f64 = 0.0;
        for flat in sample_indices(&mut rng, total, k) {
            let (mut which, mut off) = (0, flat);
            while off >= sizes[which] {
                off -= sizes[which];
                which += 1;
            }
            let id = ids[which];
            let cols = model.params.get(id).ncols();
            let idx = [off / cols, off % cols];
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[idx]);
            let orig = model.params.get(id)[idx];
            model.params.get_mut(id)[idx] = orig + H;
            let up = loss_at(model)?;
            model.params.get_mut(id)[idx] = orig - H;
            let down = loss_at(model)?;
            model.params.get_mut(id)[idx] = orig;
            let numeric = (up - down) / (2.0 * H);
            max_rel = max_rel.max(rel_err(analytic, numeric, FLOOR));
        }
        out.push(GradGroupReport {
            group,
            checked: k,
            max_rel_err: max_rel,
        });
    }
    Ok(out)
}

/// Random toy batch with independent plans.
pub fn toy_batch(config: &ModelConfig, size: usize, mask_ratio: f64, seed: u64) -> Result<(Vec<PreparedSample>, Vec<MaskPlan>)> {
    let syn = SyntheticConfig::for_model(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(size);
    let mut plans = Vec::with_capacity(size);
    for i in 0..size {
        let s = generate_synthetic_pair(seed.wrapping_add(i as u64), &syn, None)?;
        batch.push(PreparedSample {
            rgb: patchify(&s.rgb, config.patch_size)?,
            event: patchify(&s.event, config.patch_size)?,
            voxels: s.voxels,
        });
        plans.push(crate::masking::sample_mask_plan(config.num_patches(), mask_ratio, &mut rng)?);
    }
    Ok((batch, plans))
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name: name.into(),
        passed,
        detail: format!("{detail} ({:.2}s)", start.elapsed().as_secs_f64()),
    }
}

fn pixel_loop_mse(preds: &[&Array2<f64>], targets: &[&PatchSequence], masked: &[Vec<usize>]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for ((p, t), m) in preds.iter().zip(targets).zip(masked) {
        for &i in m {
            for j in 0..t.patch_dim() {
                let d = p[[i, j]] - f64::from(t.patches[[i, j]]);
                sum += d * d;
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn direct_info_nce(l: &Array2<f64>) -> f64 {
    let n = l.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| l[[i, j]].exp()).sum();
        total -= (l[[i, i]].exp() / denom).ln();
    }
    total / n as f64
}

/// Runs every property and returns one entry per property.
pub fn run_verify(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let seed = opts.seed;
    let n = 196;
    let sampler = |rng: &mut ChaCha8Rng, ratio: f64| sample_mask_plan_with(n, ratio, rng, opts.shared_rule);

    out.push(check("mask.visible_counts", || {
        let got = [0.25, 0.5, 0.75, 0.85].map(|r| visible_count(n, r).unwrap_or(usize::MAX));
        Ok((got == [147, 98, 49, 29], format!("{got:?}")))
    }));

    out.push(check("mask.plan_invariants", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ratio in [0.5, 0.75, 0.85] {
            for _ in 0..opts.plans {
                let p = sampler(&mut rng, ratio)?;
                if let Err(e) = p.validate() {
                    return Ok((false, format!("ratio {ratio}: {e}")));
                }
            }
        }
        Ok((true, format!("{} plans per ratio", opts.plans)))
    }));

    out.push(check("mask.anti_leakage", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut bad = 0;
        for _ in 0..opts.plans {
            let p = sampler(&mut rng, 0.75)?;
            let rgb: BTreeSet<_> = p.rgb_visible.iter().collect();
            if p.shared.len() != 25 || !p.shared.iter().all(|s| rgb.contains(s)) || check_anti_leakage(&p).is_err() {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} violations in {} plans", opts.plans)))
    }));

    out.push(check("shapes.base_widths", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let plans = vec![sampler(&mut rng, 0.75)?, sampler(&mut rng, 0.75)?];
        let r = shape_probe(shallow_base_config(), &plans, seed)?;
        let ok = (r.patches, r.visible, r.mask_tokens, r.fused_re, r.decoder_input) == (196, 49, 147, 75, 197);
        Ok((ok, format!("{r:?}")))
    }));

    out.push(check("patchify.round_trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let img = ImageArray::new(Array3::from_shape_simple_fn((64, 48, 3), || rng.random()))?;
        let back = unpatchify(&patchify(&img, 16)?)?;
        Ok((back == img, "64x48 image".into()))
    }));

    out.push(check("loss.masked_recon_oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
        let target = |rng: &mut ChaCha8Rng| PatchSequence::square(Array2::from_shape_simple_fn((16, 12), || rng.random()), 2, 3);
        let (tr, te) = (target(&mut rng)?, target(&mut rng)?);
        let pr = Array2::from_shape_simple_fn((16, 12), || rng.random::<f64>());
        let pe = Array2::from_shape_simple_fn((16, 12), || rng.random::<f64>());
        let plan = crate::masking::sample_mask_plan(16, 0.75, &mut rng)?;
        let got = masked_recon_value(&pr, &pe, &tr, &te, &plan)?;
        let want = pixel_loop_mse(&[&pr, &pe], &[&tr, &te], &[plan.rgb_masked(), plan.event_masked()]);
        let perfect = masked_recon_value(&tr.patches.mapv(f64::from), &te.patches.mapv(f64::from), &tr, &te, &plan)?;
        Ok(((got - want).abs() < 1e-6 && perfect == 0.0, format!("|diff| = {:.2e}", (got - want).abs())))
    }));

    out.push(check("loss.info_nce_oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
        let l = Array2::from_shape_simple_fn((6, 6), || rng.random_range(-3.0..3.0));
        let d = (info_nce(&l)? - direct_info_nce(&l)).abs();
        let u = (info_nce(&Array2::from_elem((7, 7), 2.5))? - 7f64.ln()).abs();
        Ok((d < 1e-6 && u < 1e-9, format!("oracle diff {d:.2e}, uniform diff {u:.2e}")))
    }));

    out.push(check("mcl.transpose_identity", || {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 6);
        let a = tape.input(Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0)));
        let b = tape.input(Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0)));
        let s = tape.input(Array2::from_elem((1, 1), 14.0));
        let (ab, ba) = contrastive_logits(&mut tape, a, b, s)?;
        Ok((tape.value(ba) == tape.value(ab).t().to_owned(), "lg_ba == lg_ab^T".into()))
    }));

    out.push(check("grad.toy_finite_differences", || {
        let cfg = ModelConfig::toy();
        let (batch, plans) = toy_batch(&cfg, 2, 0.75, seed)?;
        let mut model = ModelState::<f32>::new(cfg, seed)?.cast::<f64>();
        let reports = gradient_check(&mut model, &batch, &plans, LossFlags::ALL, opts.grad_fraction, seed)?;
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let checked: usize = reports.iter().map(|r| r.checked).sum();
        Ok((worst < 1e-3, format!("{checked} entries, worst rel err {worst:.2e}")))
    }));

    out.push(check("data.voxel_file_round_trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let set = VoxelSet::new(Array2::from_shape_simple_fn((8, 56), || rng.random()), 14, 4)?;
        let bytes = encode_voxels(&set);
        let same = decode_voxels(&bytes, 14, 4)? == set && bytes.len() == 1808;
        let corrupt = (0..bytes.len()).all(|cut| decode_voxels(&bytes[..cut], 14, 4).is_err());
        let mut magic = bytes.clone();
        magic[1] ^= 0xff;
        let errs = corrupt && decode_voxels(&magic, 14, 4).is_err() && decode_voxels(&bytes, 7, 4).is_err();
        Ok((same && errs, "round trip and every truncation".into()))
    }));

    out.push(check("data.events_match_voxels", || {
        let cfg = SyntheticConfig::for_model(&ModelConfig::toy());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 8);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, &cfg, None);
            let events = simulate_events(&scene.render(0.0), &scene.render(1.0), cfg.threshold)?;
            let frame = render_event_frame(&events, cfg.image_size);
            let raw = voxelize(&events, cfg.image_size, cfg.voxel_grid, cfg.voxel.events_per_voxel)?;
            let norm = (cfg.image_size - 1) as f32;
            for rec in raw.records.rows() {
                for e in rec.as_slice().unwrap().chunks(4) {
                    let (x, y) = ((e[0] * norm).round() as usize, (e[1] * norm).round() as usize);
                    let ch = if e[3] == 1.0 { 0 } else { 2 };
                    if frame.data()[[y, x, ch]] != 1.0 {
                        return Ok((false, format!("voxel event at ({x},{y}) missing from frame")));
                    }
                }
            }
        }
        Ok((true, "5 scenes".into()))
    }));

    out.push(check("data.determinism", || {
        let cfg = SyntheticConfig::for_model(&ModelConfig::toy());
        let a = generate_synthetic_pair(seed, &cfg, None)?;
        Ok((a == generate_synthetic_pair(seed, &cfg, None)?, "same seed, same pair".into()))
    }));

    out.push(check("checkpoint.round_trip_forward", || {
        let cfg = ModelConfig::toy();
        let (batch, plans) = toy_batch(&cfg, 2, 0.75, seed)?;
        let model = ModelState::<f32>::new(cfg.clone(), seed)?;
        let bytes = Checkpoint::capture(&model, None, 0, None).encode();
        let mut other = ModelState::<f32>::new(cfg, seed + 99)?;
        Checkpoint::decode(&bytes)?.load_into(&mut other.params, LoadMode::Full)?;
        let run = |m: &ModelState<f32>| -> Result<f32> {
            let mut tape = Tape::new(&m.params);
            let (l, _) = m.forward(&mut tape, &batch, &plans, LossFlags::ALL)?;
            Ok(tape.scalar(l.total))
        };
        let (a, b) = (run(&model)?, run(&other)?);
        let corrupt = Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err();
        Ok((a.to_bits() == b.to_bits() && corrupt, format!("loss {a} vs {b}")))
    }));

    out
}
