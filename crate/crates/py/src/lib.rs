//! Python bindings: patching, mask plans, losses, synthetic data, voxel
//! files, the model forward pass, training and the property suite.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cm3ae::data::{generate_synthetic_pair, read_voxel_file, write_voxel_file, SyntheticConfig};
use cm3ae::encoders::VoxelSet;
use cm3ae::graph::{ParamStore, Tape};
use cm3ae::harness::checkpoint::{Checkpoint, LoadMode};
use cm3ae::harness::train::{prepare_sample, Trainer, TrainConfig};
use cm3ae::harness::verify::{run_verify, VerifyOptions};
use cm3ae::masking::{self, ImageArray, PatchSequence};
use cm3ae::model::{LossFlags, ModelConfig, ModelState, Preset};
use cm3ae::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn preset(name: &str) -> PyResult<Preset> {
    match name {
        "toy" => Ok(Preset::Toy),
        "base" => Ok(Preset::Base),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}; expected toy or base"))),
    }
}

/// Splits an `(H, W, C)` image into `(N, P*P*C)` row-major patches.
#[pyfunction]
fn patchify<'py>(py: Python<'py>, image: PyReadonlyArray3<'py, f32>, patch_size: usize) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let img = ImageArray::new(image.as_array().to_owned()).map_err(err)?;
    Ok(masking::patchify(&img, patch_size).map_err(err)?.patches.into_pyarray(py))
}

/// Inverse of `patchify` for a square grid.
#[pyfunction]
fn unpatchify<'py>(
    py: Python<'py>,
    patches: PyReadonlyArray2<'py, f32>,
    patch_size: usize,
    channels: usize,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let seq = PatchSequence::square(patches.as_array().to_owned(), patch_size, channels).map_err(err)?;
    Ok(masking::unpatchify(&seq).map_err(err)?.into_data().into_pyarray(py))
}

#[pyfunction]
fn visible_count(n: usize, mask_ratio: f64) -> PyResult<usize> {
    masking::visible_count(n, mask_ratio).map_err(err)
}

#[pyclass(frozen, get_all)]
struct MaskPlan {
    n: usize,
    rgb_visible: Vec<usize>,
    event_visible: Vec<usize>,
    shared: Vec<usize>,
}

#[pymethods]
impl MaskPlan {
    fn rgb_masked(&self) -> Vec<usize> {
        self.inner().rgb_masked()
    }

    fn event_masked(&self) -> Vec<usize> {
        self.inner().event_masked()
    }

    fn __repr__(&self) -> String {
        format!(
            "MaskPlan(n={}, visible={}, shared={})",
            self.n,
            self.rgb_visible.len(),
            self.shared.len()
        )
    }
}

impl MaskPlan {
    fn inner(&self) -> masking::MaskPlan {
        masking::MaskPlan {
            n: self.n,
            rgb_visible: self.rgb_visible.clone(),
            event_visible: self.event_visible.clone(),
            shared: self.shared.clone(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (n, mask_ratio, seed=0))]
fn sample_mask_plan(n: usize, mask_ratio: f64, seed: u64) -> PyResult<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = masking::sample_mask_plan(n, mask_ratio, &mut rng).map_err(err)?;
    Ok(MaskPlan {
        n: p.n,
        rgb_visible: p.rgb_visible,
        event_visible: p.event_visible,
        shared: p.shared,
    })
}

/// Mean cross-entropy of each row of `logits` against its diagonal entry.
#[pyfunction]
fn info_nce(logits: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let l = tape.input(logits.as_array().to_owned());
    let loss = cm3ae::mcl::info_nce_loss(&mut tape, l).map_err(err)?;
    Ok(tape.scalar(loss))
}

type LogitPair<'py> = (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>);

/// Scaled cosine-similarity logits `(lg_re, lg_er)` between two batches.
#[pyfunction]
fn contrastive_logits<'py>(
    py: Python<'py>,
    a: PyReadonlyArray2<'py, f64>,
    b: PyReadonlyArray2<'py, f64>,
    scale: f64,
) -> PyResult<LogitPair<'py>> {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let a = tape.input(a.as_array().to_owned());
    let b = tape.input(b.as_array().to_owned());
    let s = tape.input(ndarray::Array2::from_elem((1, 1), scale));
    let (re, er) = cm3ae::mcl::contrastive_logits(&mut tape, a, b, s).map_err(err)?;
    Ok((
        tape.value(re).clone().into_pyarray(py),
        tape.value(er).clone().into_pyarray(py),
    ))
}

/// One synthetic RGB/Event pair as a dict of arrays.
#[pyfunction]
#[pyo3(signature = (seed, preset="toy", class_id=None))]
fn generate_pair<'py>(py: Python<'py>, seed: u64, preset: &str, class_id: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ModelConfig::preset(self::preset(preset)?);
    let p = generate_synthetic_pair(seed, &SyntheticConfig::for_model(&cfg), class_id).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rgb", p.rgb.into_data().into_pyarray(py))?;
    d.set_item("event", p.event.into_data().into_pyarray(py))?;
    d.set_item("voxels", p.voxels.map(|v| v.records.into_pyarray(py)))?;
    d.set_item("label", p.label)?;
    Ok(d)
}

#[pyfunction]
fn write_voxels(path: PathBuf, records: PyReadonlyArray2<'_, f32>, events_per_voxel: usize, attrs_per_event: usize) -> PyResult<()> {
    let v = VoxelSet::new(records.as_array().to_owned(), events_per_voxel, attrs_per_event).map_err(err)?;
    write_voxel_file(&v, &path).map_err(err)
}

#[pyfunction]
fn read_voxels<'py>(
    py: Python<'py>,
    path: PathBuf,
    events_per_voxel: usize,
    attrs_per_event: usize,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    Ok(read_voxel_file(&path, events_per_voxel, attrs_per_event)
        .map_err(err)?
        .records
        .into_pyarray(py))
}

/// Runs the property suite; returns `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (seed=0, plans=1000, grad_fraction=0.01))]
fn verify(py: Python<'_>, seed: u64, plans: usize, grad_fraction: f64) -> Vec<(String, bool, String)> {
    let opts = VerifyOptions {
        seed,
        plans,
        grad_fraction,
        ..VerifyOptions::default()
    };
    py.detach(|| run_verify(&opts))
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pyclass(unsendable)]
struct Model {
    state: ModelState<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset="toy", seed=0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let state = ModelState::new(ModelConfig::preset(self::preset(preset)?), seed).map_err(err)?;
        Ok(Self { state })
    }

    /// Restores a model from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        let mut state = ModelState::new(ck.model_config().map_err(err)?, 0).map_err(err)?;
        ck.load_into(&mut state.params, LoadMode::Full).map_err(err)?;
        Ok(Self { state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::capture(&self.state, None, 0, None).save(&path).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.state.params.numel()
    }

    /// Order-sensitive hash of every parameter whose name starts with `prefix`.
    fn checksum(&self, prefix: &str) -> u64 {
        self.state.params.checksum(prefix)
    }

    /// Losses of one forward pass over synthetic pairs `data_seed..data_seed+batch`.
    #[pyo3(signature = (data_seed=0, batch=2, mask_ratio=0.75, mask_seed=0, mfrm=true, mcl=true))]
    #[allow(clippy::too_many_arguments)]
    fn losses<'py>(
        &self,
        py: Python<'py>,
        data_seed: u64,
        batch: usize,
        mask_ratio: f64,
        mask_seed: u64,
        mfrm: bool,
        mcl: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = &self.state.config;
        let flags = LossFlags { mfrm, mcl };
        let syn = SyntheticConfig::for_model(cfg);
        let samples = (data_seed..data_seed + batch as u64)
            .map(|s| {
                let p = generate_synthetic_pair(s, &syn, None)?;
                prepare_sample(&p, cfg, flags)
            })
            .collect::<cm3ae::Result<Vec<_>>>()
            .map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let plans = samples
            .iter()
            .map(|_| masking::sample_mask_plan(cfg.num_patches(), mask_ratio, &mut rng))
            .collect::<cm3ae::Result<Vec<_>>>()
            .map_err(err)?;
        let mut tape = Tape::new(&self.state.params);
        let (l, _) = self.state.forward(&mut tape, &samples, &plans, flags).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("l_m", tape.scalar(l.recon))?;
        d.set_item("l_f", l.fusion.map(|v| tape.scalar(v)))?;
        d.set_item("l_cl", l.contrastive.map(|v| tape.scalar(v)))?;
        d.set_item("total", tape.scalar(l.total))?;
        Ok(d)
    }

    /// Pre-trains in place on `samples` synthetic pairs and returns the
    /// per-step metrics as dicts.
    #[pyo3(signature = (steps, samples=8, batch=8, lr=2e-4, data_seed=0, seed=0, mfrm=true, mcl=true))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        steps: u64,
        samples: usize,
        batch: usize,
        lr: f64,
        data_seed: u64,
        seed: u64,
        mfrm: bool,
        mcl: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut cfg = TrainConfig::new(Preset::Toy);
        cfg.model = self.state.config.clone();
        cfg.steps = Some(steps);
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.flags = LossFlags { mfrm, mcl };
        let data = cm3ae::data::generate_dataset(data_seed, samples, &SyntheticConfig::for_model(&cfg.model), false)
            .map_err(err)?;
        let mut trainer = Trainer::new(cfg, &data).map_err(err)?;
        for id in self.state.params.ids() {
            trainer.model.params.get_mut(id).assign(self.state.params.get(id));
        }
        let metrics = trainer.run_until(steps, |_, _| Ok(())).map_err(err)?;
        self.state = trainer.model;
        metrics
            .into_iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("step", m.step)?;
                d.set_item("l_m", m.l_m)?;
                d.set_item("l_f", m.l_f)?;
                d.set_item("l_cl", m.l_cl)?;
                d.set_item("loss", m.loss)?;
                d.set_item("lr", m.lr)?;
                d.set_item("terms", m.terms)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn cm3ae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(patchify, m)?)?;
    m.add_function(wrap_pyfunction!(unpatchify, m)?)?;
    m.add_function(wrap_pyfunction!(visible_count, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask_plan, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_logits, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(write_voxels, m)?)?;
    m.add_function(wrap_pyfunction!(read_voxels, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<MaskPlan>()?;
    m.add_class::<Model>()?;
    Ok(())
}
