//! Synthetic aligned RGB / Event / Voxel samples and their on-disk formats.
//!
//! A scene is a static textured background with a few geometric shapes that
//! translate between two frames. The RGB image is the second frame. Events
//! fire wherever grayscale intensity changes by more than the contrast
//! threshold; a change of `d` emits `floor(|d| / threshold)` events at
//! `t_k = k * threshold / |d|`, the times a linear ramp between the frames
//! crosses each threshold level.
//!
//! # Voxel file (`.vox`)
//!
//! Little-endian throughout:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `CMVX`                            |
//! | 4      | 4    | version, `u32` = 1                      |
//! | 8      | 4    | voxel count, `u32`                      |
//! | 12     | 4    | record width, `u32` (= events × attrs)  |
//! | 16     | 4·n  | `count × width` `f32` values, row-major |

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{resample_voxels, VoxelSet};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::masking::ImageArray;
use crate::model::{ModelConfig, VoxelConfig, CHANNELS};

pub const VOXEL_MAGIC: &[u8; 4] = b"CMVX";
pub const VOXEL_VERSION: u32 = 1;
const VOXEL_HEADER: usize = 16;

/// Environment variable selecting loader threads; 0 keeps everything on the
/// calling thread.
pub const NUM_WORKERS_ENV: &str = "CM3AE_NUM_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Square, Self::Circle, Self::Triangle, Self::Cross];

    pub fn class_id(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-size `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Self::Square => dx.abs() <= r && dy.abs() <= r,
            Self::Circle => dx * dx + dy * dy <= r * r,
            // apex up, base at dy = r
            Self::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
            Self::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center in pixels at the first frame.
    pub center: [f32; 2],
    pub half_size: f32,
    pub color: [f32; 3],
    /// Displacement in pixels between the two frames.
    pub velocity: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    pub amplitude: f32,
    pub frequency: [f32; 2],
    pub phase: f32,
}

impl Background {
    pub fn black() -> Self {
        Self {
            base: [0.0; 3],
            amplitude: 0.0,
            frequency: [0.0; 2],
            phase: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: Background,
    /// Painted in order; later shapes cover earlier ones.
    pub shapes: Vec<ShapeSpec>,
}

impl Scene {
    /// Renders the scene with every shape displaced by `time × velocity`.
    pub fn render(&self, time: f32) -> ImageArray {
        let s = self.size;
        let bg = &self.background;
        let mut data = Array3::zeros((s, s, CHANNELS));
        for y in 0..s {
            for x in 0..s {
                let tex = bg.amplitude
                    * (bg.frequency[0] * x as f32 + bg.frequency[1] * y as f32 + bg.phase).sin();
                let mut px = [0.0f32; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = bg.base[c] + tex;
                }
                for shape in &self.shapes {
                    let cx = shape.center[0] + time * shape.velocity[0];
                    let cy = shape.center[1] + time * shape.velocity[1];
                    if shape.kind.contains(x as f32 - cx, y as f32 - cy, shape.half_size) {
                        px = shape.color;
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    data[[y, x, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
        ImageArray::new(data).expect("clamped values")
    }

    /// Class of the largest shape (ties go to the later one).
    pub fn dominant_class(&self) -> Option<usize> {
        self.shapes
            .iter()
            .rev()
            .max_by(|a, b| a.half_size.total_cmp(&b.half_size))
            .map(|s| s.kind.class_id())
    }
}

/// One brightness-change event; `x`, `y` in pixels, `t` in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: usize,
    pub y: usize,
    pub t: f32,
    pub positive: bool,
}

fn gray(img: &ImageArray, y: usize, x: usize) -> f32 {
    let d = img.data();
    (d[[y, x, 0]] + d[[y, x, 1]] + d[[y, x, 2]]) / 3.0
}

/// Events between two frames, ordered by `(t, y, x)`.
pub fn simulate_events(first: &ImageArray, second: &ImageArray, threshold: f32) -> Result<Vec<Event>> {
    if first.data().dim() != second.data().dim() {
        return Err(invalid_input("frames differ in size"));
    }
    if threshold <= 0.0 {
        return Err(invalid_config("event threshold must be positive"));
    }
    let mut events = Vec::new();
    for y in 0..first.height() {
        for x in 0..first.width() {
            let d = gray(second, y, x) - gray(first, y, x);
            if d.abs() <= threshold {
                continue;
            }
            let k = (d.abs() / threshold).floor() as usize;
            for i in 1..=k {
                events.push(Event {
                    x,
                    y,
                    t: (i as f32 * threshold / d.abs()).min(1.0),
                    positive: d > 0.0,
                });
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    Ok(events)
}

/// Polarity frame: channel 0 marks positive events, channel 2 negative.
pub fn render_event_frame(events: &[Event], size: usize) -> ImageArray {
    let mut data = Array3::zeros((size, size, CHANNELS));
    for e in events {
        data[[e.y, e.x, if e.positive { 0 } else { 2 }]] = 1.0;
    }
    ImageArray::new(data).expect("binary frame")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub shapes: usize,
    /// Displacement magnitude in pixels.
    pub motion: f32,
    pub threshold: f32,
    pub texture_amplitude: f32,
    /// Voxel binning grid `(x, y, t)`.
    pub voxel_grid: [usize; 3],
    pub voxel: VoxelConfig,
    /// Attempts with doubled motion when a scene yields no events.
    pub max_retries: usize,
}

impl SyntheticConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            image_size: cfg.image_size,
            shapes: 2,
            motion: (cfg.image_size as f32 / 16.0).max(2.0),
            threshold: 0.1,
            texture_amplitude: 0.05,
            voxel_grid: [cfg.grid() * 2, cfg.grid() * 2, 2],
            voxel: cfg.voxel.clone(),
            max_retries: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.shapes == 0 {
            return Err(invalid_config("synthetic scenes need a size and at least one shape"));
        }
        if self.threshold <= 0.0 || self.motion < 0.0 {
            return Err(invalid_config("threshold must be positive and motion non-negative"));
        }
        if self.voxel_grid.contains(&0) {
            return Err(invalid_config("voxel grid dimensions must be positive"));
        }
        if self.voxel.attrs_per_event != 4 {
            return Err(invalid_config("synthetic voxels carry exactly 4 attributes (x, y, t, p)"));
        }
        Ok(())
    }
}

/// Aligned training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub rgb: ImageArray,
    pub event: ImageArray,
    pub voxels: Option<VoxelSet>,
    pub label: Option<usize>,
}

/// Random scene for a seed. Shape classes are drawn uniformly unless
/// `class` pins the dominant shape.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SyntheticConfig, class: Option<usize>) -> Scene {
    let s = cfg.image_size as f32;
    let base = rng.random_range(0.25..0.45f32);
    let tint: [f32; 3] = std::array::from_fn(|_| base + rng.random_range(-0.03..0.03f32));
    let background = Background {
        base: tint,
        amplitude: cfg.texture_amplitude,
        frequency: [rng.random_range(0.1..0.6), rng.random_range(0.1..0.6)],
        phase: rng.random_range(0.0..std::f32::consts::TAU),
    };
    let mut shapes: Vec<ShapeSpec> = (0..cfg.shapes)
        .map(|i| {
            let kind = ShapeKind::ALL[rng.random_range(0..4)];
            // the first shape is the large one
            let half_size = if i == 0 {
                rng.random_range(0.16..0.24) * s
            } else {
                rng.random_range(0.06..0.11) * s
            };
            let margin = half_size + cfg.motion;
            let lo = margin.min(s / 2.0);
            let hi = (s - margin).max(lo + 1.0);
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            ShapeSpec {
                kind,
                center: [rng.random_range(lo..hi), rng.random_range(lo..hi)],
                half_size,
                color: std::array::from_fn(|_| rng.random_range(0.65..1.0)),
                velocity: [cfg.motion * angle.cos(), cfg.motion * angle.sin()],
            }
        })
        .collect();
    if let Some(c) = class {
        shapes[0].kind = ShapeKind::ALL[c % 4];
    }
    // paint the large shape last so it stays fully visible
    shapes.rotate_left(1);
    Scene {
        size: cfg.image_size,
        background,
        shapes,
    }
}

/// Bins events into the `(x, y, t)` grid; each occupied cell becomes one
/// record of up to `events_per_voxel` events (padded by cycling through the
/// cell's events). Cells are emitted in `(t, y, x)` cell order.
pub fn voxelize(events: &[Event], size: usize, grid: [usize; 3], events_per_voxel: usize) -> Result<VoxelSet> {
    let [gx, gy, gt] = grid;
    let mut cells: Vec<Vec<Event>> = vec![Vec::new(); gx * gy * gt];
    for e in events {
        let cx = e.x * gx / size;
        let cy = e.y * gy / size;
        let ct = ((e.t * gt as f32) as usize).min(gt - 1);
        cells[(ct * gy + cy) * gx + cx].push(*e);
    }
    let norm = (size.max(2) - 1) as f32;
    let mut records = Vec::new();
    let mut count = 0;
    for cell in cells.iter().filter(|c| !c.is_empty()) {
        for k in 0..events_per_voxel {
            let e = cell[k % cell.len().min(events_per_voxel)];
            records.extend_from_slice(&[
                e.x as f32 / norm,
                e.y as f32 / norm,
                e.t,
                if e.positive { 1.0 } else { 0.0 },
            ]);
        }
        count += 1;
    }
    let records = Array2::from_shape_vec((count, events_per_voxel * 4), records).expect("record layout");
    VoxelSet::new(records, events_per_voxel, 4)
}

/// Renders a scene pair, simulates events, and builds all three modalities.
/// Returns `None` when the scene produces no events.
pub fn simulate_scene<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<Option<SamplePair>> {
    let first = scene.render(0.0);
    let second = scene.render(1.0);
    let events = simulate_events(&first, &second, cfg.threshold)?;
    if events.is_empty() {
        return Ok(None);
    }
    let event = render_event_frame(&events, scene.size);
    let raw = voxelize(&events, scene.size, cfg.voxel_grid, cfg.voxel.events_per_voxel)?;
    let voxels = resample_voxels(&raw, cfg.voxel.count, rng)?;
    Ok(Some(SamplePair {
        rgb: second,
        event,
        voxels: Some(voxels),
        label: scene.dominant_class(),
    }))
}

/// Deterministic synthetic sample for `seed`.
pub fn generate_synthetic_pair(seed: u64, cfg: &SyntheticConfig, class: Option<usize>) -> Result<SamplePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt_cfg = cfg.clone();
    for _ in 0..=cfg.max_retries {
        let scene = random_scene(&mut rng, &attempt_cfg, class);
        if let Some(pair) = simulate_scene(&scene, &attempt_cfg, &mut rng)? {
            return Ok(pair);
        }
        attempt_cfg.motion *= 2.0;
    }
    Err(invalid_input(format!(
        "scene for seed {seed} produced no events after {} retries",
        cfg.max_retries
    )))
}

/// Per-index seed derived with SplitMix64.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Worker count from the environment; unset or unparsable means 0.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Maps `f` over `0..count`, optionally across `workers` threads. Output
/// order always follows the index, so results do not depend on scheduling.
pub fn ordered_map<T, F>(count: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| scope.spawn(move || (start..(start + chunk).min(count)).map(f).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// `count` synthetic samples; labels follow `index % 4` when `balanced`.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SyntheticConfig, balanced: bool) -> Result<Vec<SamplePair>> {
    ordered_map(count, num_workers(), |i| {
        generate_synthetic_pair(sample_seed(seed, i as u64), cfg, balanced.then_some(i % 4))
    })
}

pub fn encode_voxels(voxels: &VoxelSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOXEL_HEADER + voxels.records.len() * 4);
    out.extend_from_slice(VOXEL_MAGIC);
    out.extend_from_slice(&VOXEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(voxels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(voxels.record_width() as u32).to_le_bytes());
    for v in voxels.records.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(bytes.len(), format!("file ends inside header field at byte {at}")))
}

/// Parses a voxel file, checking magic, version, record width, and the exact
/// byte length.
pub fn decode_voxels(bytes: &[u8], events_per_voxel: usize, attrs_per_event: usize) -> Result<VoxelSet> {
    if bytes.len() < 4 || &bytes[..4] != VOXEL_MAGIC {
        return Err(format_err(0, "bad magic, expected `CMVX`"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VOXEL_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, 8)? as usize;
    let width = read_u32(bytes, 12)? as usize;
    if width != events_per_voxel * attrs_per_event {
        return Err(format_err(
            12,
            format!(
                "record width {width} does not match configured {events_per_voxel} x {attrs_per_event}"
            ),
        ));
    }
    let expected = count
        .checked_mul(width)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(VOXEL_HEADER))
        .ok_or_else(|| format_err(8, "voxel count overflows"))?;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes[VOXEL_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let records = Array2::from_shape_vec((count, width), values).expect("length checked");
    VoxelSet::new(records, events_per_voxel, attrs_per_event)
}

pub fn write_voxel_file(voxels: &VoxelSet, path: &Path) -> Result<()> {
    fs::write(path, encode_voxels(voxels))?;
    Ok(())
}

pub fn read_voxel_file(path: &Path, events_per_voxel: usize, attrs_per_event: usize) -> Result<VoxelSet> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_voxels(&bytes, events_per_voxel, attrs_per_event)
}

/// What [`load_sample`] expects to find.
#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub image_size: usize,
    /// `None` when the voxel branch is disabled; `events.vox` is then optional.
    pub voxel: Option<VoxelConfig>,
}

fn write_png(img: &ImageArray, path: &Path) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let buf: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let out = image::RgbImage::from_raw(w, h, buf).expect("buffer matches dimensions");
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png(path: &Path, size: usize) -> Result<ImageArray> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(invalid_input(format!(
            "{} is {}x{}, expected {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let data = Array3::from_shape_vec((size, size, CHANNELS), img.into_raw())
        .expect("rgb buffer")
        .mapv(|v| f32::from(v) / 255.0);
    ImageArray::new(data)
}

/// Writes `rgb.png`, `event.png`, `events.vox` (when present), and
/// `label.txt` (when labeled).
pub fn save_sample(sample: &SamplePair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_png(&sample.rgb, &dir.join("rgb.png"))?;
    write_png(&sample.event, &dir.join("event.png"))?;
    if let Some(v) = &sample.voxels {
        write_voxel_file(v, &dir.join("events.vox"))?;
    }
    if let Some(label) = sample.label {
        fs::write(dir.join("label.txt"), format!("{label}\n"))?;
    }
    Ok(())
}

pub fn load_sample(dir: &Path, spec: &SampleSpec) -> Result<SamplePair> {
    let rgb = read_png(&dir.join("rgb.png"), spec.image_size)?;
    let event = read_png(&dir.join("event.png"), spec.image_size)?;
    let vox_path = dir.join("events.vox");
    let voxels = match &spec.voxel {
        Some(v) => {
            let set = read_voxel_file(&vox_path, v.events_per_voxel, v.attrs_per_event)?;
            if set.len() != v.count {
                return Err(invalid_input(format!(
                    "{} holds {} voxels, expected {}",
                    vox_path.display(),
                    set.len(),
                    v.count
                )));
            }
            Some(set)
        }
        None => None,
    };
    let label_path = dir.join("label.txt");
    let label = if label_path.exists() {
        let text = fs::read_to_string(&label_path)?;
        Some(text.trim().parse().map_err(|_| {
            invalid_input(format!("{}: expected a single integer", label_path.display()))
        })?)
    } else {
        None
    };
    Ok(SamplePair {
        rgb,
        event,
        voxels,
        label,
    })
}

/// Sample directories under `root`, sorted by name.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("rgb.png").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path, spec: &SampleSpec) -> Result<Vec<SamplePair>> {
    let dirs = sample_dirs(root)?;
    if dirs.is_empty() {
        return Err(invalid_input(format!("no sample directories under {}", root.display())));
    }
    ordered_map(dirs.len(), num_workers(), |i| load_sample(&dirs[i], spec))
}
