//! Pre-training loop: batching, mask sampling, AdamW updates, metrics, and
//! checkpoint/resume.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_seed, SamplePair};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::graph::Tape;
use crate::harness::checkpoint::{Checkpoint, LoadMode};
use crate::harness::optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};
use crate::masking::{patchify, sample_mask_plan, DEFAULT_MASK_RATIO};
use crate::mcl::MAX_SCALE;
use crate::model::{LossFlags, ModelConfig, ModelState, Preset, PreparedSample};

pub const CHECKPOINT_FILE: &str = "checkpoint.cmck";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mask_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub seed: u64,
    pub flags: LossFlags,
    pub warmup_fraction: f64,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    pub fn new(preset: Preset) -> Self {
        Self {
            model: ModelConfig::preset(preset),
            mask_ratio: DEFAULT_MASK_RATIO,
            lr: 2e-4,
            weight_decay: 0.04,
            batch: 8,
            epochs: 1,
            steps: None,
            seed: 0,
            flags: LossFlags::ALL,
            warmup_fraction: 0.05,
            grad_clip: None,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        AdamWConfig::new(self.lr, self.weight_decay).validate()?;
        crate::masking::visible_count(self.model.num_patches(), self.mask_ratio)?;
        if self.batch == 0 {
            return Err(invalid_config("batch size must be positive"));
        }
        if self.flags.mcl && self.batch < 2 {
            return Err(invalid_config("contrastive learning needs a batch of at least 2"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid_config("warmup fraction outside [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) || self.checkpoint_every == Some(0) {
            return Err(invalid_config("gradient clip and checkpoint interval must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        (samples / self.batch) as u64
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(samples))
    }
}

/// One line of the metrics log. Disabled terms are logged as 0 and left out
/// of `terms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_m: f64,
    pub l_f: f64,
    pub l_cl: f64,
    pub loss: f64,
    pub ls: f64,
    pub lr: f64,
    pub terms: Vec<String>,
}

/// Patchifies images and drops voxels the enabled terms do not read.
pub fn prepare_sample(sample: &SamplePair, config: &ModelConfig, flags: LossFlags) -> Result<PreparedSample> {
    Ok(PreparedSample {
        rgb: patchify(&sample.rgb, config.patch_size)?,
        event: patchify(&sample.event, config.patch_size)?,
        voxels: if flags.mfrm || flags.mcl {
            sample.voxels.clone()
        } else {
            None
        },
    })
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelState<f32>,
    pub optim: AdamW,
    /// Completed updates.
    pub step: u64,
    rng: ChaCha8Rng,
    data: Vec<PreparedSample>,
    schedule: Schedule,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: &[SamplePair]) -> Result<Self> {
        config.validate()?;
        if samples.len() < config.batch {
            return Err(invalid_input(format!(
                "{} samples cannot fill a batch of {}",
                samples.len(),
                config.batch
            )));
        }
        let data = samples
            .iter()
            .map(|s| prepare_sample(s, &config.model, config.flags))
            .collect::<Result<Vec<_>>>()?;
        let model = ModelState::new(config.model.clone(), config.seed)?;
        let optim = AdamW::new(AdamWConfig::new(config.lr, config.weight_decay), &model.params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep mask sampling independent of the initialization stream
        rng.set_stream(1);
        let schedule = Schedule::new(config.lr, config.total_steps(data.len()), config.warmup_fraction);
        Ok(Self {
            config,
            model,
            optim,
            step: 0,
            rng,
            data,
            schedule,
        })
    }

    /// Restores parameters, optimizer moments, step, and generator state.
    pub fn resume(config: TrainConfig, samples: &[SamplePair], ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, samples)?;
        if ckpt.config_hash != t.model.config.hash() {
            return Err(invalid_config("checkpoint was written for a different model configuration"));
        }
        ckpt.load_into(&mut t.model.params, LoadMode::Full)?;
        ckpt.load_optimizer(&t.model.params, &mut t.optim)?;
        t.rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| invalid_input("checkpoint has no generator state"))?
            .restore();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.optim), self.step, Some(&self.rng))
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn data(&self) -> &[PreparedSample] {
        &self.data
    }

    /// Sample indices for 0-based `step`: each epoch walks a fresh
    /// permutation derived from the seed, dropping the ragged tail.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let per_epoch = self.config.steps_per_epoch(self.data.len());
        let (epoch, within) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed, epoch));
        order.shuffle(&mut rng);
        let b = self.config.batch;
        order[within * b..(within + 1) * b].to_vec()
    }

    /// Current `min(exp(log_scale), 100)`.
    pub fn logit_scale(&self) -> f64 {
        let p = self.model.params.get(self.model.layout.scale.log_scale);
        f64::from(p[[0, 0]]).exp().min(MAX_SCALE)
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let idx = self.batch_indices(self.step);
        let n = self.model.config.num_patches();
        let plans = idx
            .iter()
            .map(|_| sample_mask_plan(n, self.config.mask_ratio, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<PreparedSample> = idx.iter().map(|&i| self.data[i].clone()).collect();
        let flags = self.config.flags;
        let step = self.step + 1;

        let (values, mut grads) = {
            let mut tape = Tape::new(&self.model.params);
            let (losses, _) = self.model.forward(&mut tape, &batch, &plans, flags)?;
            let get = |v: Option<_>| v.map_or(0.0, |v| f64::from(tape.scalar(v)));
            let values = [
                ("l_m", get(Some(losses.recon))),
                ("l_f", get(losses.fusion)),
                ("l_cl", get(losses.contrastive)),
                ("loss", get(Some(losses.total))),
            ];
            if let Some((term, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { term, step });
            }
            (values, tape.backward(losses.total)?.into_params())
        };
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { term: "gradient", step });
        }
        let lr = self.schedule.lr_at(self.step);
        self.optim.step(&mut self.model.params, &grads, lr);
        self.step = step;

        let mut terms = vec!["l_m".to_string()];
        if flags.mfrm {
            terms.push("l_f".into());
        }
        if flags.mcl {
            terms.push("l_cl".into());
        }
        Ok(StepMetrics {
            step,
            l_m: values[0].1,
            l_f: values[1].1,
            l_cl: values[2].1,
            loss: values[3].1,
            ls: self.logit_scale(),
            lr,
            terms,
        })
    }

    /// Runs until `until` completed steps (capped at the schedule length),
    /// calling `after` after each update.
    pub fn run_until(
        &mut self,
        until: u64,
        mut after: impl FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let until = until.min(self.total_steps());
        let mut out = Vec::new();
        while self.step < until {
            let m = self.train_step()?;
            after(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Full pre-training run writing `metrics.jsonl` and `checkpoint.cmck` into
/// `out_dir`. With `resume`, continues from the checkpoint there and drops
/// any metrics lines logged after it.
pub fn pretrain(config: TrainConfig, samples: &[SamplePair], out_dir: &Path, resume: bool) -> Result<Trainer> {
    fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        let t = Trainer::resume(config, samples, &ck)?;
        truncate_metrics(&metrics_path, t.step)?;
        t
    } else {
        fs::write(&metrics_path, "")?;
        Trainer::new(config, samples)?
    };
    let mut log = fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?;
    let every = trainer.config.checkpoint_every;
    let total = trainer.total_steps();
    trainer.run_until(total, |t, m| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        if every.is_some_and(|k| t.step % k == 0) {
            log.flush()?;
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    log.flush()?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(trainer)
}

fn truncate_metrics(path: &Path, keep_through: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.step <= keep_through {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Parameter-group checksums, in [`crate::model::GROUPS`] order.
pub fn group_checksums(params: &crate::graph::ParamStore<f32>) -> Vec<(&'static str, u64)> {
    crate::model::GROUPS.iter().map(|g| (*g, params.checksum(g))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};

    fn tiny(flags: LossFlags, steps: u64) -> (TrainConfig, Vec<SamplePair>) {
        let mut cfg = TrainConfig::new(Preset::Toy);
        cfg.model.encoder.depth = 1;
        cfg.model.voxel_encoder.depth = 1;
        cfg.batch = 4;
        cfg.steps = Some(steps);
        cfg.flags = flags;
        cfg.lr = 1e-3;
        let data = generate_dataset(5, 4, &SyntheticConfig::for_model(&cfg.model), false).unwrap();
        (cfg, data)
    }

    #[test]
    fn disabled_branches_keep_their_parameters() {
        let (cfg, data) = tiny(LossFlags::DMA_ONLY, 3);
        let mut t = Trainer::new(cfg, &data).unwrap();
        let before = group_checksums(&t.model.params);
        let ms = t.run_until(3, |_, _| Ok(())).unwrap();
        let after = group_checksums(&t.model.params);
        for ((g, a), (_, b)) in before.iter().zip(&after) {
            let frozen = ["voxel_encoder.", "voxel_proj.", "fusion.", "contrastive."].contains(g);
            assert_eq!(a == b, frozen, "{g}");
        }
        assert!(ms.iter().all(|m| m.l_f == 0.0 && m.l_cl == 0.0 && m.terms == ["l_m"]));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (cfg, data) = tiny(LossFlags::ALL, 4);
        let mut full = Trainer::new(cfg.clone(), &data).unwrap();
        let a = full.run_until(4, |_, _| Ok(())).unwrap();
        let mut first = Trainer::new(cfg.clone(), &data).unwrap();
        first.run_until(2, |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().encode();
        let mut second = Trainer::resume(cfg, &data, &Checkpoint::decode(&bytes).unwrap()).unwrap();
        let b = second.run_until(4, |_, _| Ok(())).unwrap();
        assert_eq!(a[2..], b[..]);
    }

    #[test]
    fn nan_loss_aborts_with_term() {
        let (cfg, data) = tiny(LossFlags::DMA_ONLY, 1);
        let mut t = Trainer::new(cfg, &data).unwrap();
        let id = t.model.layout.rgb_decoder.head.bias.unwrap();
        t.model.params.get_mut(id).fill(f32::NAN);
        match t.train_step() {
            Err(Error::NonFinite { term, step }) => assert_eq!((term, step), ("l_m", 1)),
            other => panic!("{other:?}"),
        }
    }
}
