//! Named-tensor checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "CMCK"  u32 version  u32 entry_count
//! entry*: u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank], f32 data[prod(dims)]
//! trailer: u64 step, u64 config_hash, u32 json_len, model config JSON,
//!          u8 has_rng, [32-byte seed, u64 stream, u128 word_pos]
//! ```
//!
//! Parameters are stored under their own names. Optimizer moments use
//! `optim.m.<name>` / `optim.v.<name>` and the per-parameter update counts
//! live in `optim.steps`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_input, Error, Result};
use crate::graph::ParamStore;
use crate::harness::optim::AdamW;
use crate::model::{ModelConfig, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";
const STEPS_ENTRY: &str = "optim.steps";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_array(name: impl Into<String>, a: &Array2<f32>) -> Self {
        Self {
            name: name.into(),
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f32>> {
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("length checked on decode")),
            _ => Err(invalid_input(format!("{} has rank {}, expected 2", self.name, self.shape.len()))),
        }
    }
}

/// Exact position of a `ChaCha8Rng` stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub step: u64,
    pub config_hash: u64,
    pub config_json: String,
    pub rng: Option<RngState>,
}

/// Which parameters [`Checkpoint::load_into`] restores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode<'a> {
    /// Every model parameter must be present with a matching shape, and
    /// the checkpoint may hold no unknown parameters.
    Full,
    /// Only parameters under this name prefix (e.g. `fusion.`).
    Prefix(&'a str),
}

impl Checkpoint {
    pub fn capture(model: &ModelState<f32>, optim: Option<&AdamW>, step: u64, rng: Option<&ChaCha8Rng>) -> Self {
        let mut tensors: Vec<Tensor> = model
            .params
            .iter()
            .map(|(_, name, v)| Tensor::from_array(name, v))
            .collect();
        if let Some(opt) = optim {
            for ((_, name, _), (m, v)) in model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                tensors.push(Tensor::from_array(format!("{M_PREFIX}{name}"), m));
                tensors.push(Tensor::from_array(format!("{V_PREFIX}{name}"), v));
            }
            tensors.push(Tensor {
                name: STEPS_ENTRY.into(),
                shape: vec![opt.steps.len()],
                // exact below 2^24 updates
                data: opt.steps.iter().map(|&s| s as f32).collect(),
            });
        }
        Self {
            tensors,
            step,
            config_hash: model.config.hash(),
            config_json: serde_json::to_string(&model.config).expect("config serializes"),
            rng: rng.map(RngState::capture),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn is_param(name: &str) -> bool {
        !name.starts_with("optim.")
    }

    /// Copies parameters into `params`. All problems are collected and
    /// reported together; nothing is written unless every check passes.
    pub fn load_into(&self, params: &mut ParamStore<f32>, mode: LoadMode<'_>) -> Result<()> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        let wanted = |name: &str| match mode {
            LoadMode::Full => true,
            LoadMode::Prefix(p) => name.starts_with(p),
        };
        for (id, name, value) in params.iter() {
            if !wanted(name) {
                continue;
            }
            match self.tensor(name) {
                None => problems.push(format!("{name}: missing from checkpoint")),
                Some(t) if t.shape != [value.nrows(), value.ncols()] => problems.push(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape,
                    [value.nrows(), value.ncols()]
                )),
                Some(t) => updates.push((id, t.to_array()?)),
            }
        }
        for t in &self.tensors {
            if Self::is_param(&t.name) && wanted(&t.name) && params.id(&t.name).is_none() {
                problems.push(format!("{}: not a parameter of this model", t.name));
            }
        }
        if updates.is_empty() && problems.is_empty() {
            problems.push("no parameters matched".into());
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        for (id, value) in updates {
            *params.get_mut(id) = value;
        }
        Ok(())
    }

    /// Restores optimizer moments and step counts saved by [`capture`].
    ///
    /// [`capture`]: Checkpoint::capture
    pub fn load_optimizer(&self, params: &ParamStore<f32>, optim: &mut AdamW) -> Result<()> {
        let mut problems = Vec::new();
        for (i, (_, name, value)) in params.iter().enumerate() {
            for (prefix, slot) in [(M_PREFIX, &mut optim.m[i]), (V_PREFIX, &mut optim.v[i])] {
                match self.tensor(&format!("{prefix}{name}")) {
                    Some(t) if t.shape == [value.nrows(), value.ncols()] => *slot = t.to_array()?,
                    Some(t) => problems.push(format!("{prefix}{name}: shape {:?}", t.shape)),
                    None => problems.push(format!("{prefix}{name}: missing from checkpoint")),
                }
            }
        }
        match self.tensor(STEPS_ENTRY) {
            Some(t) if t.shape == [params.len()] => {
                optim.steps = t.data.iter().map(|&s| s as u64).collect();
            }
            _ => problems.push(format!("{STEPS_ENTRY}: missing or wrong length")),
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err_at(0, "bad magic, expected `CMCK`"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let start = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err_at(start + 4, "entry name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.err_at(start, format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.err_at(start, "size overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, data });
        }
        let step = r.u64()?;
        let config_hash = r.u64()?;
        let json_len = r.u32()? as usize;
        let json_at = r.pos;
        let config_json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|_| r.err_at(json_at, "config is not UTF-8"))?
            .to_owned();
        let rng = match r.take(1)?[0] {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(r.err_at(r.pos - 1, format!("bad generator flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            tensors,
            step,
            config_hash,
            config_json,
            rng,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("cmck.tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.err_at(
                self.pos,
                format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
