//! Transformer building blocks shared by the encoders, decoders, and the
//! fusion module.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, shape, Result};
use crate::graph::{trunc_normal, ParamId, ParamStore, Real, Tape, Var};

pub(crate) const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), trunc_normal(input, output, INIT_STD, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Array2::zeros((1, output)))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn dims<T: Real>(&self, store: &ParamStore<T>) -> (usize, usize) {
        store.get(self.weight).dim()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Array2::ones((1, dim)))?,
            beta: store.add(format!("{name}.bias"), Array2::zeros((1, dim)))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    /// Returns the block output and the attention node (for map export).
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let attn = tape.attention(q, k, v, self.heads)?;
        Ok((self.proj.forward(tape, attn)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Pre-norm residual block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid_config(format!("width {dim} not divisible by {heads} heads")));
        }
        let hidden = dim * mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention {
                query: Linear::new(store, rng, &format!("{name}.attn.query"), dim, dim, true)?,
                key: Linear::new(store, rng, &format!("{name}.attn.key"), dim, dim, true)?,
                value: Linear::new(store, rng, &format!("{name}.attn.value"), dim, dim, true)?,
                proj: Linear::new(store, rng, &format!("{name}.attn.proj"), dim, dim, true)?,
                heads,
            },
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp {
                fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, hidden, true)?,
                fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim, true)?,
            },
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, Var)> {
        let h = self.norm1.forward(tape, x)?;
        let (a, attn) = self.attn.forward(tape, h)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.mlp.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.mlp.fc2.forward(tape, h)?;
        Ok((tape.add(x, h)?, attn))
    }
}

/// Width, depth, and head layout of a transformer stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Apply a closing layer norm after the last block.
    pub final_norm: bool,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid_config(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid_config("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub dim: usize,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
}

impl TransformerStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &StackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    store,
                    rng,
                    &format!("{name}.blocks.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        let norm = if cfg.final_norm {
            Some(LayerNorm::new(store, &format!("{name}.norm"), cfg.dim)?)
        } else {
            None
        };
        Ok(Self {
            dim: cfg.dim,
            blocks,
            norm,
        })
    }

    /// Runs every block; attention nodes are appended to `trace` when given.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        mut x: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let width = tape.value(x).ncols();
        if width != self.dim {
            return Err(shape(format!(
                "token width {width} does not match stack width {}",
                self.dim
            )));
        }
        for block in &self.blocks {
            let (y, attn) = block.forward(tape, x)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(attn);
            }
            x = y;
        }
        match &self.norm {
            Some(norm) => norm.forward(tape, x),
            None => Ok(x),
        }
    }
}
