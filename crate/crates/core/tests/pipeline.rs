use std::process::Command;

use cm3ae::data::{generate_dataset, generate_synthetic_pair, load_sample, save_sample, SampleSpec, SyntheticConfig};
use cm3ae::harness::attention::export_attention;
use cm3ae::harness::checkpoint::{Checkpoint, LoadMode};
use cm3ae::harness::train::{pretrain, read_metrics, prepare_sample, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use cm3ae::model::{LossFlags, ModelConfig, ModelState, Preset};
use cm3ae::Error;

#[test]
fn sample_directory_round_trip() {
    let cfg = ModelConfig::toy();
    let pair = generate_synthetic_pair(3, &SyntheticConfig::for_model(&cfg), Some(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sample(&pair, dir.path()).unwrap();
    let spec = SampleSpec {
        image_size: cfg.image_size,
        voxel: Some(cfg.voxel.clone()),
    };
    let back = load_sample(dir.path(), &spec).unwrap();
    let worst = back
        .rgb
        .data()
        .iter()
        .zip(pair.rgb.data())
        .chain(back.event.data().iter().zip(pair.event.data()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 0.5 / 255.0 + 1e-6, "png quantization error {worst}");
    assert_eq!(back.voxels.unwrap().records, pair.voxels.unwrap().records);
    assert_eq!(back.label, Some(2));

    std::fs::remove_file(dir.path().join("events.vox")).unwrap();
    assert!(matches!(load_sample(dir.path(), &spec), Err(Error::NotFound(_))));
    let rgb_only = SampleSpec {
        image_size: cfg.image_size,
        voxel: None,
    };
    assert!(load_sample(dir.path(), &rgb_only).unwrap().voxels.is_none());
}

#[test]
fn partial_load_touches_only_the_prefix() {
    let cfg = ModelConfig::toy();
    let source = ModelState::<f32>::new(cfg.clone(), 1).unwrap();
    let ck = Checkpoint::capture(&source, None, 0, None);
    let mut target = ModelState::<f32>::new(cfg, 2).unwrap();
    let before = target.params.checksum("rgb_encoder.");
    ck.load_into(&mut target.params, LoadMode::Prefix("fusion.")).unwrap();
    assert_eq!(target.params.checksum("fusion."), source.params.checksum("fusion."));
    assert_eq!(target.params.checksum("rgb_encoder."), before);
}

#[test]
fn attention_maps() {
    let cfg = ModelConfig::toy();
    let model = ModelState::<f32>::new(cfg.clone(), 4).unwrap();
    let pair = generate_synthetic_pair(5, &SyntheticConfig::for_model(&cfg), None).unwrap();
    let sample = prepare_sample(&pair, &cfg, LossFlags::DMA_ONLY).unwrap();
    let map = export_attention(&model, &sample, true, 1).unwrap();
    assert_eq!(map.raw.dim(), (cfg.grid(), cfg.grid()));
    let lo = map.normalized.fold(f32::INFINITY, |a, &b| a.min(b));
    let hi = map.normalized.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    assert_eq!((lo, hi), (0.0, 1.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    map.save_png(&path).unwrap();
    let png = image::open(&path).unwrap().to_luma8();
    for (y, x, v) in map.normalized.indexed_iter().map(|((y, x), v)| (y, x, *v)) {
        let stored = f32::from(png.get_pixel(x as u32, y as u32)[0]) / 255.0;
        assert!((stored - v).abs() <= 1.0 / 255.0);
    }
    assert!(export_attention(&model, &sample, false, 0).is_err());
    assert!(export_attention(&model, &sample, false, cfg.encoder.depth + 1).is_err());
}

#[test]
fn identical_runs_log_identical_metrics() {
    let data = generate_dataset(9, 8, &SyntheticConfig::for_model(&ModelConfig::toy()), false).unwrap();
    let run = || {
        let mut cfg = TrainConfig::new(Preset::Toy);
        cfg.steps = Some(3);
        cfg.batch = 4;
        let dir = tempfile::tempdir().unwrap();
        pretrain(cfg, &data, dir.path(), false).unwrap();
        std::fs::read(dir.path().join(METRICS_FILE)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_cm3ae");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let ok = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("CM3AE_NUM_WORKERS", "0").output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let d = data.to_str().unwrap();
    let r = run.to_str().unwrap();
    ok(&["gen-data", "--count", "8", "--balanced", "--out-dir", d]);
    ok(&["pretrain", "--data-dir", d, "--steps", "2", "--batch", "4", "--out-dir", r]);
    assert_eq!(read_metrics(&run.join(METRICS_FILE)).unwrap().len(), 2);
    ok(&["pretrain", "--data-dir", d, "--steps", "3", "--batch", "4", "--out-dir", r, "--resume"]);
    assert_eq!(read_metrics(&run.join(METRICS_FILE)).unwrap().len(), 3);

    let ck = run.join(CHECKPOINT_FILE);
    let ck = ck.to_str().unwrap();
    let probe = ok(&["probe", "--checkpoint", ck, "--data-dir", d, "--mode", "rgb+event"]);
    assert!(probe.contains("pre-trained top-1") && probe.contains("random-init top-1"));
    let attn = dir.path().join("attn");
    ok(&["export-attn", "--checkpoint", ck, "--layer", "2", "--out-dir", attn.to_str().unwrap()]);
    assert!(attn.join("attn_rgb_layer2.png").exists() && attn.join("attn_event_layer2.png").exists());

    let bad = Command::new(bin).args(["pretrain", "--mask-ratio", "0.25", "--out-dir", r]).output().unwrap();
    assert!(!bad.status.success());
}
