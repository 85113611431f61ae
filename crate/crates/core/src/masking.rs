//! Patch decomposition and position-aligned random masking.
//!
//! Patches are flattened rows first, then columns, then channels: value
//! `(py, px, c)` of a patch lands at `(py * patch_size + px) * channels + c`.
//! Patch `i` is grid cell `(i / grid_w, i % grid_w)`.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{invalid_config, invalid_input, Result};

pub const DEFAULT_MASK_RATIO: f64 = 0.75;

/// `height × width × channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    data: Array3<f32>,
}

impl ImageArray {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Flattened non-overlapping patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub patches: Array2<f32>,
}

impl PatchSequence {
    pub fn new(
        patches: Array2<f32>,
        patch_size: usize,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
    ) -> Result<Self> {
        if patches.nrows() != grid_h * grid_w {
            return Err(invalid_input(format!(
                "{} patches do not fill a {grid_h}x{grid_w} grid",
                patches.nrows()
            )));
        }
        if patches.ncols() != patch_size * patch_size * channels {
            return Err(invalid_input(format!(
                "patch width {} != {patch_size}^2 x {channels}",
                patches.ncols()
            )));
        }
        Ok(Self {
            patch_size,
            grid_h,
            grid_w,
            channels,
            patches,
        })
    }

    /// Infers a square grid from the patch count.
    pub fn square(patches: Array2<f32>, patch_size: usize, channels: usize) -> Result<Self> {
        let n = patches.nrows();
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(invalid_input(format!("{n} patches do not form a square grid")));
        }
        Self::new(patches, patch_size, side, side, channels)
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.ncols()
    }
}

pub fn patchify(image: &ImageArray, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, c) = image.data.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(invalid_input(format!(
            "{h}x{w} image is not divisible into {patch_size}px patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut patches = Array2::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = patches.row_mut(gy * gw + gx);
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for ch in 0..c {
                        row[(py * patch_size + px) * c + ch] =
                            image.data[[gy * patch_size + py, gx * patch_size + px, ch]];
                    }
                }
            }
        }
    }
    PatchSequence::new(patches, patch_size, gh, gw, c)
}

pub fn unpatchify(patches: &PatchSequence) -> Result<ImageArray> {
    let PatchSequence {
        patch_size: p,
        grid_h,
        grid_w,
        channels: c,
        ..
    } = *patches;
    if patches.len() != grid_h * grid_w || patches.patch_dim() != p * p * c {
        return Err(invalid_input("patch sequence inconsistent with its grid"));
    }
    let mut data = Array3::zeros((grid_h * p, grid_w * p, c));
    for (i, row) in patches.patches.rows().into_iter().enumerate() {
        let (gy, gx) = (i / grid_w, i % grid_w);
        for py in 0..p {
            for px in 0..p {
                for ch in 0..c {
                    data[[gy * p + py, gx * p + px, ch]] = row[(py * p + px) * c + ch];
                }
            }
        }
    }
    Ok(ImageArray { data })
}

/// Visible patch count `round(n * (1 - mask_ratio))`, half away from zero.
pub fn visible_count(n: usize, mask_ratio: f64) -> Result<usize> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(invalid_config(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    Ok((n as f64 * (1.0 - mask_ratio)).round() as usize)
}

/// Positions visible in both modalities: `ceil(v / 2)`. With `v = 49` this
/// gives 25, which is what makes the fused sequence 50 + 25 = 75 tokens.
pub fn shared_count(visible: usize) -> usize {
    visible.div_ceil(2)
}

/// Visible and shared positions for one RGB/Event pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub rgb_visible: Vec<usize>,
    pub event_visible: Vec<usize>,
    pub shared: Vec<usize>,
}

impl MaskPlan {
    pub fn visible_count(&self) -> usize {
        self.rgb_visible.len()
    }

    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }

    pub fn rgb_masked(&self) -> Vec<usize> {
        complement(self.n, &self.rgb_visible)
    }

    pub fn event_masked(&self) -> Vec<usize> {
        complement(self.n, &self.event_visible)
    }

    /// Plan with every position visible in both modalities.
    pub fn fully_visible(n: usize) -> Self {
        let all: Vec<usize> = (0..n).collect();
        Self {
            n,
            rgb_visible: all.clone(),
            event_visible: all.clone(),
            shared: all,
        }
    }

    /// Checks every structural invariant of an aligned plan.
    pub fn validate(&self) -> Result<()> {
        let sorted_distinct = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        for (name, set) in [
            ("rgb_visible", &self.rgb_visible),
            ("event_visible", &self.event_visible),
            ("shared", &self.shared),
        ] {
            if !sorted_distinct(set) {
                return Err(invalid_input(format!("{name} is not sorted and distinct")));
            }
            if set.last().is_some_and(|&x| x >= self.n) {
                return Err(invalid_input(format!("{name} has an index >= {}", self.n)));
            }
        }
        let v = self.rgb_visible.len();
        if self.event_visible.len() != v {
            return Err(invalid_input("modalities have different visible counts"));
        }
        if self.shared.len() != shared_count(v) {
            return Err(invalid_input(format!(
                "shared count {} != ceil({v}/2)",
                self.shared.len()
            )));
        }
        let rgb: BTreeSet<_> = self.rgb_visible.iter().collect();
        let event: BTreeSet<_> = self.event_visible.iter().collect();
        let inter: Vec<usize> = rgb.intersection(&event).map(|&&x| x).collect();
        if inter != self.shared {
            return Err(invalid_input("shared set is not the visible-set intersection"));
        }
        Ok(())
    }
}

fn complement(n: usize, visible: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - visible.len().min(n));
    let mut it = visible.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Samples an aligned mask plan.
///
/// `s = ceil(v/2)` shared positions are drawn uniformly without replacement,
/// then `v - s` RGB-only positions from the remainder, then `v - s`
/// Event-only positions from what is left. The two extra sets are disjoint so
/// the visible-set intersection is exactly the shared set. That needs
/// `2v - s <= n`; low mask ratios that violate it are rejected.
pub fn sample_mask_plan<R: Rng + ?Sized>(n: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    sample_mask_plan_with(n, mask_ratio, rng, shared_count)
}

/// [`sample_mask_plan`] with the shared-count rule supplied by the caller.
pub fn sample_mask_plan_with<R: Rng + ?Sized>(
    n: usize,
    mask_ratio: f64,
    rng: &mut R,
    shared_rule: fn(usize) -> usize,
) -> Result<MaskPlan> {
    let v = visible_count(n, mask_ratio)?;
    if v < 2 {
        return Err(invalid_config(format!(
            "mask ratio {mask_ratio} leaves {v} visible of {n} patches; need at least 2"
        )));
    }
    let s = shared_rule(v).min(v);
    let needed = 2 * v - s;
    if needed > n {
        return Err(invalid_config(format!(
            "mask ratio {mask_ratio} needs {needed} distinct positions for {v} visible \
             ({s} shared) but only {n} patches exist"
        )));
    }
    let order = rand::seq::index::sample(rng, n, needed).into_vec();
    let (shared, rest) = order.split_at(s);
    let (rgb_only, event_only) = rest.split_at(v - s);
    let sorted = |parts: &[&[usize]]| {
        let mut out: Vec<usize> = parts.concat();
        out.sort_unstable();
        out
    };
    Ok(MaskPlan {
        n,
        rgb_visible: sorted(&[shared, rgb_only]),
        event_visible: sorted(&[shared, event_only]),
        shared: sorted(&[shared]),
    })
}
