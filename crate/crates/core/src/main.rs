use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use cm3ae::data::{generate_dataset, load_dataset, save_sample, SamplePair, SampleSpec, SyntheticConfig};
use cm3ae::harness::attention::export_attention;
use cm3ae::harness::checkpoint::{Checkpoint, LoadMode};
use cm3ae::harness::probe::{run_probe, ProbeConfig, ProbeMode};
use cm3ae::harness::train::{prepare_sample, pretrain, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use cm3ae::harness::verify::{run_verify, VerifyOptions};
use cm3ae::model::{LossFlags, ModelConfig, ModelState, Preset};
use cm3ae::{Error, Result};

#[derive(Parser)]
#[command(name = "cm3ae", version, about = "Masked RGB/Event pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on synthetic pairs or a sample directory.
    Pretrain(PretrainArgs),
    /// Write synthetic sample directories.
    GenData(GenDataArgs),
    /// Linear probe of frozen encoders against a random-init baseline.
    Probe(ProbeArgs),
    /// Run the property suite; exits non-zero on any failure.
    Verify(VerifyArgs),
    /// Write CLS attention maps as grayscale PNGs.
    ExportAttn(ExportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Sample directories (rgb.png, event.png, events.vox, label.txt).
    /// Synthetic samples are generated when omitted.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Seed for synthetic data.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.04)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    /// Total steps; overrides --epochs.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    enable_mfrm: bool,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    enable_mcl: bool,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from the checkpoint in --out-dir.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value = "runs/pretrain")]
    out_dir: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cycle the dominant shape class through all four classes.
    #[arg(long)]
    balanced: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "rgb")]
    mode: ProbeMode,
    /// In rgb+event mode, pool the fusion block's output.
    #[arg(long)]
    fusion: bool,
    /// Seed of the randomly initialized baseline.
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    plans: usize,
    #[arg(long, default_value_t = 0.01)]
    grad_fraction: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A sample directory; a synthetic sample is used when omitted.
    #[arg(long)]
    sample_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    /// Encoder block, counted from 1.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    #[arg(long, default_value = "runs/attention")]
    out_dir: PathBuf,
}

fn load_data(args: &DataArgs, model: &ModelConfig, voxels: bool, balanced: bool) -> Result<Vec<SamplePair>> {
    match &args.data_dir {
        Some(dir) => load_dataset(
            dir,
            &SampleSpec {
                image_size: model.image_size,
                voxel: voxels.then(|| model.voxel.clone()),
            },
        ),
        None => generate_dataset(args.data_seed, args.samples, &SyntheticConfig::for_model(model), balanced),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::new(a.preset);
    cfg.mask_ratio = a.mask_ratio;
    cfg.lr = a.lr;
    cfg.weight_decay = a.weight_decay;
    cfg.batch = a.batch;
    cfg.epochs = a.epochs;
    cfg.steps = a.steps;
    cfg.seed = a.seed;
    cfg.flags = LossFlags {
        mfrm: a.enable_mfrm,
        mcl: a.enable_mcl,
    };
    cfg.grad_clip = a.grad_clip;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.validate()?;
    let samples = load_data(&a.data, &cfg.model, cfg.flags.mfrm || cfg.flags.mcl, false)?;
    let t = pretrain(cfg, &samples, &a.out_dir, a.resume)?;
    println!(
        "trained {} steps; metrics in {}, checkpoint in {}",
        t.step,
        a.out_dir.join(METRICS_FILE).display(),
        a.out_dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let model = ModelConfig::preset(a.preset);
    let samples = generate_dataset(a.seed, a.count, &SyntheticConfig::for_model(&model), a.balanced)?;
    for (i, s) in samples.iter().enumerate() {
        save_sample(s, &a.out_dir.join(format!("{i:06}")))?;
    }
    println!("wrote {} samples to {}", samples.len(), a.out_dir.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelState<f32>> {
    let ck = Checkpoint::load(path)?;
    let mut model = ModelState::new(ck.model_config()?, 0)?;
    ck.load_into(&mut model.params, LoadMode::Full)?;
    Ok(model)
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let trained = load_model(&a.checkpoint)?;
    let samples = load_data(&a.data, &trained.config, false, true)?;
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| cm3ae::Error::InvalidInput("sample without label".into())))
        .collect::<Result<Vec<_>>>()?;
    let prepared = samples
        .iter()
        .map(|s| prepare_sample(s, &trained.config, LossFlags::DMA_ONLY))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = ProbeConfig::new(a.mode);
    cfg.through_fusion = a.fusion;
    let baseline = ModelState::new(trained.config.clone(), a.seed)?;
    let pre = run_probe(&trained, &prepared, &labels, &cfg)?;
    let base = run_probe(&baseline, &prepared, &labels, &cfg)?;
    println!("mode {:?}, {} classes, {} train / {} test", a.mode, pre.classes, pre.train_samples, pre.test_samples);
    println!("pre-trained top-1: {:.2}%", 100.0 * pre.test_accuracy);
    println!("random-init top-1: {:.2}%", 100.0 * base.test_accuracy);
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    let checks = run_verify(&VerifyOptions {
        seed: a.seed,
        plans: a.plans,
        grad_fraction: a.grad_fraction,
        ..VerifyOptions::default()
    });
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    Ok(failed == 0)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let sample = match &a.sample_dir {
        Some(dir) => cm3ae::data::load_sample(
            dir,
            &SampleSpec {
                image_size: model.config.image_size,
                voxel: None,
            },
        )?,
        None => generate_dataset(a.sample_seed, 1, &SyntheticConfig::for_model(&model.config), false)?.remove(0),
    };
    let prepared = prepare_sample(&sample, &model.config, LossFlags::DMA_ONLY)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (rgb, name) in [(true, "rgb"), (false, "event")] {
        let map = export_attention(&model, &prepared, rgb, a.layer)?;
        let path = a.out_dir.join(format!("attn_{name}_layer{}.png", a.layer));
        map.save_png(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a).map(|_| true),
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::Probe(a) => cmd_probe(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
        Command::ExportAttn(a) => cmd_export(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::CheckpointMismatch(list) = &e {
                for m in list {
                    eprintln!("  {m}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
