//! Full model: parameter groups, presets, and the joint forward pass that
//! produces the reconstruction, fusion, and contrastive loss terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{assemble_decoder_input, decode_and_predict, reconstruction_mse, Decoder, ReconTerm};
use crate::encoders::{
    embed_visible_patches, encode_modality, encode_voxels, project_tokens, tokenize_voxels, EncoderConfig,
    ImageEncoder, TokenSequence, VoxelEncoder, VoxelSet,
};
use crate::error::{invalid_config, invalid_input, Result};
use crate::graph::{ParamStore, Real, Tape, Var};
use crate::masking::{MaskPlan, PatchSequence};
use crate::mcl::{extract_representation, total_contrastive_loss, ContrastiveScale, RepresentationMode};
use crate::mfrm::{fuse_tokens, reconstruct_from_fused, select_shared_event_tokens, FusionModule, Modality};
use crate::nn::{Linear, StackConfig};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Base,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelConfig {
    /// Fixed voxel count after resampling.
    pub count: usize,
    pub events_per_voxel: usize,
    pub attrs_per_event: usize,
}

impl VoxelConfig {
    pub fn record_width(&self) -> usize {
        self.events_per_voxel * self.attrs_per_event
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder: EncoderConfig,
    pub voxel_encoder: EncoderConfig,
    pub decoder: StackConfig,
    pub voxel: VoxelConfig,
    pub representation: RepresentationMode,
    /// Fused reconstruction gets its own decoder instead of reusing the RGB one.
    pub dedicated_fusion_decoder: bool,
}

impl ModelConfig {
    /// ViT-B/16 encoders, 8-block 512-wide decoders, 224px input.
    pub fn base() -> Self {
        let encoder = EncoderConfig {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            final_norm: true,
        };
        Self {
            image_size: 224,
            patch_size: 16,
            voxel_encoder: encoder.clone(),
            encoder,
            decoder: StackConfig {
                depth: 8,
                dim: 512,
                heads: 8,
                mlp_ratio: 4,
                final_norm: true,
            },
            voxel: VoxelConfig {
                count: 1960,
                events_per_voxel: 14,
                attrs_per_event: 4,
            },
            representation: RepresentationMode::Cls,
            dedicated_fusion_decoder: false,
        }
    }

    /// Desk-scale model: 64px input (16 patches), width 64 / 32.
    pub fn toy() -> Self {
        let encoder = EncoderConfig {
            depth: 2,
            dim: 64,
            heads: 2,
            mlp_ratio: 4,
            final_norm: true,
        };
        Self {
            image_size: 64,
            patch_size: 16,
            voxel_encoder: encoder.clone(),
            encoder,
            decoder: StackConfig {
                depth: 1,
                dim: 32,
                heads: 2,
                mlp_ratio: 4,
                final_norm: true,
            },
            voxel: VoxelConfig {
                count: 32,
                events_per_voxel: 14,
                attrs_per_event: 4,
            },
            representation: RepresentationMode::Cls,
            dedicated_fusion_decoder: false,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Base => Self::base(),
            Preset::Toy => Self::toy(),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    /// One voxel group per image patch.
    pub fn voxel_groups(&self) -> usize {
        self.num_patches()
    }

    pub fn voxel_group_width(&self) -> usize {
        self.voxel.count / self.voxel_groups() * self.voxel.record_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid_config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        self.encoder.validate()?;
        self.voxel_encoder.validate()?;
        self.decoder.validate()?;
        if self.voxel.count == 0 || !self.voxel.count.is_multiple_of(self.voxel_groups()) {
            return Err(invalid_config(format!(
                "{} voxels cannot be split into {} groups",
                self.voxel.count,
                self.voxel_groups()
            )));
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Handles to every learnable parameter group.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub rgb_encoder: ImageEncoder,
    pub event_encoder: ImageEncoder,
    pub voxel_encoder: VoxelEncoder,
    pub rgb_proj: Linear,
    pub event_proj: Linear,
    pub voxel_proj: Linear,
    pub rgb_decoder: Decoder,
    pub event_decoder: Decoder,
    pub fusion: FusionModule,
    pub scale: ContrastiveScale,
}

/// Parameter-name prefixes of each group.
pub const GROUPS: [&str; 10] = [
    "rgb_encoder.",
    "event_encoder.",
    "voxel_encoder.",
    "rgb_proj.",
    "event_proj.",
    "voxel_proj.",
    "rgb_decoder.",
    "event_decoder.",
    "fusion.",
    "contrastive.",
];

/// Configuration, layout, and parameter values.
#[derive(Clone, Debug)]
pub struct ModelState<T: Real> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

impl<T: Real> ModelState<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.num_patches();
        let pd = config.patch_dim();
        let (ed, dd) = (config.encoder.dim, config.decoder.dim);
        let s = &mut store;
        let r = &mut rng;
        let layout = ModelLayout {
            rgb_encoder: ImageEncoder::new(s, r, "rgb_encoder", pd, n, &config.encoder)?,
            event_encoder: ImageEncoder::new(s, r, "event_encoder", pd, n, &config.encoder)?,
            voxel_encoder: VoxelEncoder::new(
                s,
                r,
                "voxel_encoder",
                config.voxel_group_width(),
                config.voxel_groups(),
                &config.voxel_encoder,
            )?,
            rgb_proj: Linear::new(s, r, "rgb_proj", ed, dd, true)?,
            event_proj: Linear::new(s, r, "event_proj", ed, dd, true)?,
            voxel_proj: Linear::new(s, r, "voxel_proj", config.voxel_encoder.dim, dd, true)?,
            rgb_decoder: Decoder::new(s, r, "rgb_decoder", n, pd, &config.decoder)?,
            event_decoder: Decoder::new(s, r, "event_decoder", n, pd, &config.decoder)?,
            fusion: FusionModule::new(
                s,
                r,
                "fusion",
                &config.decoder,
                config.dedicated_fusion_decoder.then_some((&config.decoder, n, pd)),
            )?,
            scale: ContrastiveScale::new(s, "contrastive")?,
        };
        Ok(Self {
            config,
            layout,
            params: store,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Decoder used for fused reconstruction.
    pub fn fusion_decoder(&self) -> &Decoder {
        self.layout.fusion.decoder.as_ref().unwrap_or(&self.layout.rgb_decoder)
    }
}

/// Which auxiliary objectives take part in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub mfrm: bool,
    pub mcl: bool,
}

impl LossFlags {
    pub const ALL: Self = Self { mfrm: true, mcl: true };
    pub const DMA_ONLY: Self = Self {
        mfrm: false,
        mcl: false,
    };
}

/// One training example as the model consumes it.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub rgb: PatchSequence,
    pub event: PatchSequence,
    pub voxels: Option<VoxelSet>,
}

/// Loss nodes of one forward pass. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardLosses {
    pub recon: Var,
    pub fusion: Option<Var>,
    pub contrastive: Option<Var>,
    pub scale: Option<Var>,
    pub total: Var,
}

/// Per-sample intermediate results of the forward pass.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub rgb_visible: TokenSequence,
    pub event_visible: TokenSequence,
    pub rgb_pixels: Var,
    pub event_pixels: Var,
    pub fused_re_len: Option<usize>,
    pub fused_rev_len: Option<usize>,
    pub re_pixels: Option<Var>,
    pub rev_pixels: Option<Var>,
    pub decoder_input_len: usize,
}

impl<T: Real> ModelState<T> {
    /// Records the full pre-training forward pass for a batch on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &[PreparedSample],
        plans: &[MaskPlan],
        flags: LossFlags,
    ) -> Result<(ForwardLosses, Vec<SampleTrace>)> {
        if batch.is_empty() || batch.len() != plans.len() {
            return Err(invalid_input(format!(
                "{} samples with {} mask plans",
                batch.len(),
                plans.len()
            )));
        }
        let l = &self.layout;
        let n = self.config.num_patches();
        let mode = self.config.representation;
        let mut recon_terms: Vec<(Var, &PatchSequence, Vec<usize>)> = Vec::new();
        let mut fusion_terms: Vec<(Var, &PatchSequence, Vec<usize>)> = Vec::new();
        let mut reps = (Vec::new(), Vec::new(), Vec::new());
        let mut traces = Vec::with_capacity(batch.len());

        for (sample, plan) in batch.iter().zip(plans) {
            if plan.n != n || sample.rgb.len() != n || sample.event.len() != n {
                return Err(invalid_input(format!(
                    "sample/plan patch counts disagree with the model's {n}"
                )));
            }
            let rgb = embed_visible_patches(tape, &l.rgb_encoder, &sample.rgb, &plan.rgb_visible)?;
            let rgb = encode_modality(tape, &l.rgb_encoder.stack, &rgb, None)?;
            let rgb = project_tokens(tape, &l.rgb_proj, &rgb)?;
            let event = embed_visible_patches(tape, &l.event_encoder, &sample.event, &plan.event_visible)?;
            let event = encode_modality(tape, &l.event_encoder.stack, &event, None)?;
            let event = project_tokens(tape, &l.event_proj, &event)?;

            let rgb_in = assemble_decoder_input(
                tape,
                &rgb,
                &plan.rgb_visible,
                n,
                l.rgb_decoder.mask_token,
                l.rgb_decoder.pos,
            )?;
            let rgb_out = decode_and_predict(tape, &l.rgb_decoder, &rgb_in)?;
            let event_in = assemble_decoder_input(
                tape,
                &event,
                &plan.event_visible,
                n,
                l.event_decoder.mask_token,
                l.event_decoder.pos,
            )?;
            let event_out = decode_and_predict(tape, &l.event_decoder, &event_in)?;
            recon_terms.push((rgb_out.pixels, &sample.rgb, plan.rgb_masked()));
            recon_terms.push((event_out.pixels, &sample.event, plan.event_masked()));

            let mut trace = SampleTrace {
                rgb_visible: rgb.clone(),
                event_visible: event.clone(),
                rgb_pixels: rgb_out.pixels,
                event_pixels: event_out.pixels,
                fused_re_len: None,
                fused_rev_len: None,
                re_pixels: None,
                rev_pixels: None,
                decoder_input_len: rgb_in.len(),
            };

            let voxel = if flags.mfrm || flags.mcl {
                let vox = sample.voxels.as_ref().ok_or_else(|| {
                    invalid_input("voxel branch enabled but sample has no voxels")
                })?;
                if vox.len() != self.config.voxel.count {
                    return Err(invalid_input(format!(
                        "{} voxels, model expects {}",
                        vox.len(),
                        self.config.voxel.count
                    )));
                }
                let tokens = tokenize_voxels(tape, &l.voxel_encoder, vox)?;
                let enc = encode_voxels(tape, &l.voxel_encoder, &tokens, None)?;
                Some(project_tokens(tape, &l.voxel_proj, &enc)?)
            } else {
                None
            };

            if flags.mfrm {
                let voxel = voxel.as_ref().expect("voxel tokens computed when mfrm is on");
                let shared = select_shared_event_tokens(tape, &event, plan)?;
                let decoder = self.fusion_decoder();
                let re = fuse_tokens(
                    tape,
                    &l.fusion.block,
                    &[(&rgb, Modality::Rgb), (&shared, Modality::Event)],
                )?;
                let re_out = reconstruct_from_fused(tape, &re, plan, decoder, l.fusion.mask_token)?;
                let rev = fuse_tokens(
                    tape,
                    &l.fusion.block,
                    &[
                        (&rgb, Modality::Rgb),
                        (&shared, Modality::Event),
                        (voxel, Modality::Voxel),
                    ],
                )?;
                let rev_out = reconstruct_from_fused(tape, &rev, plan, decoder, l.fusion.mask_token)?;
                let masked = plan.rgb_masked();
                fusion_terms.push((re_out.pixels, &sample.rgb, masked.clone()));
                fusion_terms.push((rev_out.pixels, &sample.rgb, masked));
                trace.fused_re_len = Some(re.slots.len());
                trace.fused_rev_len = Some(rev.slots.len());
                trace.re_pixels = Some(re_out.pixels);
                trace.rev_pixels = Some(rev_out.pixels);
            }

            if flags.mcl {
                let voxel = voxel.as_ref().expect("voxel tokens computed when mcl is on");
                reps.0.push(extract_representation(tape, &rgb_out.features, mode)?);
                reps.1.push(extract_representation(tape, &event_out.features, mode)?);
                reps.2.push(extract_representation(tape, voxel, mode)?);
            }
            traces.push(trace);
        }

        let mse = |tape: &mut Tape<'_, T>, terms: &[(Var, &PatchSequence, Vec<usize>)]| {
            let refs: Vec<ReconTerm<'_>> = terms
                .iter()
                .map(|(pred, target, masked)| ReconTerm {
                    pred: *pred,
                    target,
                    masked,
                })
                .collect();
            reconstruction_mse(tape, &refs)
        };
        let recon = mse(tape, &recon_terms)?;
        let mut parts = vec![recon];
        let fusion = if flags.mfrm {
            let f = mse(tape, &fusion_terms)?;
            parts.push(f);
            Some(f)
        } else {
            None
        };
        let (contrastive, scale) = if flags.mcl {
            if batch.len() < 2 {
                return Err(invalid_input("contrastive loss needs a batch of at least 2"));
            }
            let r = tape.concat_rows(&reps.0)?;
            let e = tape.concat_rows(&reps.1)?;
            let v = tape.concat_rows(&reps.2)?;
            let s = l.scale.effective(tape);
            let terms = total_contrastive_loss(tape, r, e, v, s)?;
            parts.push(terms.total);
            (Some(terms.total), Some(s))
        } else {
            (None, None)
        };
        let total = crate::mcl::total_loss(tape, &parts)?;
        Ok((
            ForwardLosses {
                recon,
                fusion,
                contrastive,
                scale,
                total,
            },
            traces,
        ))
    }
}
