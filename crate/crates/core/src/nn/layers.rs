use rand_chacha::ChaCha8Rng;

use super::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Token embedding table of shape `vocab_size × dim`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // One-hot inputs have fan-in 1.
        let table = store.add_uniform(format!("{name}.weight"), vec![vocab_size, dim], 1, rng);
        Self { table, vocab_size, dim }
    }

    /// Rows of the table for `ids`; output is `len(ids) × dim`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, ids: &[usize]) -> Result<Var> {
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.vocab_size) {
            return Err(Error::Data(format!(
                "token id {id} at position {pos} is outside the vocabulary of {}",
                self.vocab_size
            )));
        }
        tape.gather(params.get(self.table), ids.to_vec())
    }
}

/// Affine map `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), vec![in_dim, out_dim], in_dim, rng);
        let bias = Some(store.add_uniform(format!("{name}.bias"), vec![out_dim], in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W` only.
    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), vec![in_dim, out_dim], in_dim, rng);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params.get(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(h, params.get(b)),
            None => Ok(h),
        }
    }
}

/// Layer normalisation with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), vec![dim], 1.0),
            offset: store.add_const(format!("{name}.offset"), vec![dim], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let n = tape.mul_row(n, params.get(self.gain))?;
        tape.add_row(n, params.get(self.offset))
    }
}
