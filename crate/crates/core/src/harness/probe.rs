//! Linear-probe transfer evaluation on frozen encoders.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoders::{embed_visible_patches, encode_modality, project_tokens, TokenSequence};
use crate::error::{invalid_input, Result};
use crate::graph::Tape;
use crate::masking::MaskPlan;
use crate::mfrm::{fuse_tokens, Modality};
use crate::model::{ModelState, PreparedSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ProbeMode {
    Rgb,
    Event,
    #[value(name = "rgb+event")]
    #[serde(rename = "rgb+event")]
    RgbEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    /// In `rgb+event` mode, feed both token sets through the fusion block
    /// and pool its output instead of concatenating pooled encoder features.
    pub through_fusion: bool,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Leading share of the samples used for training; the rest is held out.
    pub train_fraction: f64,
}

impl ProbeConfig {
    pub fn new(mode: ProbeMode) -> Self {
        Self {
            mode,
            through_fusion: false,
            iterations: 1000,
            lr: 0.5,
            l2: 1e-3,
            train_fraction: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn encode_full(
    tape: &mut Tape<'_, f32>,
    model: &ModelState<f32>,
    sample: &PreparedSample,
    rgb: bool,
    plan: &MaskPlan,
) -> Result<TokenSequence> {
    let (enc, patches) = if rgb {
        (&model.layout.rgb_encoder, &sample.rgb)
    } else {
        (&model.layout.event_encoder, &sample.event)
    };
    let t = embed_visible_patches(tape, enc, patches, &plan.rgb_visible)?;
    encode_modality(tape, &enc.stack, &t, None)
}

fn mean_row(tape: &Tape<'_, f32>, seq: &TokenSequence) -> Array1<f64> {
    tape.value(seq.var).mean_axis(Axis(0)).expect("non-empty").mapv(f64::from)
}

/// Mean-pooled features of every sample with all patches visible.
pub fn probe_features(
    model: &ModelState<f32>,
    samples: &[PreparedSample],
    mode: ProbeMode,
    through_fusion: bool,
) -> Result<Array2<f64>> {
    let plan = MaskPlan::fully_visible(model.config.num_patches());
    let rows = samples
        .iter()
        .map(|sample| {
            let mut tape = Tape::new(&model.params);
            Ok(match mode {
                ProbeMode::Rgb | ProbeMode::Event => {
                    let seq = encode_full(&mut tape, model, sample, mode == ProbeMode::Rgb, &plan)?;
                    mean_row(&tape, &seq)
                }
                ProbeMode::RgbEvent => {
                    let r = encode_full(&mut tape, model, sample, true, &plan)?;
                    let e = encode_full(&mut tape, model, sample, false, &plan)?;
                    if through_fusion {
                        let l = &model.layout;
                        let r = project_tokens(&mut tape, &l.rgb_proj, &r)?;
                        let e = project_tokens(&mut tape, &l.event_proj, &e)?;
                        let fused =
                            fuse_tokens(&mut tape, &l.fusion.block, &[(&r, Modality::Rgb), (&e, Modality::Event)])?;
                        tape.value(fused.var).mean_axis(Axis(0)).expect("non-empty").mapv(f64::from)
                    } else {
                        let mut v = mean_row(&tape, &r).to_vec();
                        v.extend(mean_row(&tape, &e));
                        Array1::from(v)
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((samples.len(), dim), flat).expect("equal widths"))
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

fn accuracy(x: &Array2<f64>, labels: &[usize], w: &Array2<f64>, b: &Array1<f64>) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let z = x.dot(w) + b;
    let hits = z
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains softmax regression on standardized `features[..split]` by full-
/// batch gradient descent and scores top-1 on both splits.
pub fn linear_probe(features: &Array2<f64>, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(invalid_input(format!("{n} feature rows, {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(invalid_input("probe needs at least 2 classes"));
    }
    let split = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n);
    let (train, test) = (features.slice(s![..split, ..]), features.slice(s![split.., ..]));
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let std = train.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-8));
    let xtr = (&train - &mean) / &std;
    let xte = (&test - &mean) / &std;
    let (ytr, yte) = labels.split_at(split);

    let d = features.ncols();
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let mut onehot = Array2::<f64>::zeros((split, classes));
    for (i, &y) in ytr.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..cfg.iterations {
        let mut p = xtr.dot(&w) + &b;
        softmax_rows(&mut p);
        let g = (p - &onehot) / split as f64;
        let gw = xtr.t().dot(&g) + &w * cfg.l2;
        let gb = g.sum_axis(Axis(0));
        w.scaled_add(-cfg.lr, &gw);
        b.scaled_add(-cfg.lr, &gb);
    }
    Ok(ProbeReport {
        classes,
        train_samples: split,
        test_samples: n - split,
        train_accuracy: accuracy(&xtr, ytr, &w, &b),
        test_accuracy: accuracy(&xte, yte, &w, &b),
    })
}

/// Features from `model`, then [`linear_probe`].
pub fn run_probe(
    model: &ModelState<f32>,
    samples: &[PreparedSample],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let x = probe_features(model, samples, cfg.mode, cfg.through_fusion)?;
    linear_probe(&x, labels, cfg)
}
