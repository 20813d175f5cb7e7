use rand_chacha::ChaCha8Rng;

use super::{Bound, LayerNorm, Linear, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Pre-norm Transformer encoder block: multi-head self-attention and a ReLU
/// feed-forward network, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub model_dim: usize,
    pub num_heads: usize,
    pub norm_attn: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        num_heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model dimension {model_dim} is not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            model_dim,
            num_heads,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), model_dim),
            // A key bias shifts every score of a query equally and is
            // cancelled by the softmax, so the projection has none.
            qkv: Linear::without_bias(store, &format!("{name}.qkv"), model_dim, 3 * model_dim, rng),
            out: Linear::new(store, &format!("{name}.out"), model_dim, model_dim, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), model_dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), model_dim, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, model_dim, rng),
        })
    }

    /// `x` holds `masks.len()` sequences of `masks[0].len()` rows each,
    /// batch-major. `masks[b][j]` is false for padding keys of sequence `b`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var, masks: &[Vec<bool>]) -> Result<Var> {
        let d = self.model_dim;
        let dh = d / self.num_heads;
        let steps = masks.first().map_or(0, Vec::len);
        let scale = 1.0 / (dh as f64).sqrt();

        let normed = self.norm_attn.forward(tape, params, x)?;
        let qkv = self.qkv.forward(tape, params, normed)?;
        let mut per_seq = Vec::with_capacity(masks.len());
        for (b, keep) in masks.iter().enumerate() {
            let rows = tape.slice_rows(qkv, b * steps, (b + 1) * steps)?;
            let mut heads = Vec::with_capacity(self.num_heads);
            for h in 0..self.num_heads {
                let q = tape.slice_cols(rows, h * dh, (h + 1) * dh)?;
                let k = tape.slice_cols(rows, d + h * dh, d + (h + 1) * dh)?;
                let v = tape.slice_cols(rows, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
                let scores = tape.matmul_t(q, k)?;
                let scores = tape.scale(scores, scale)?;
                let weights = tape.masked_softmax(scores, keep.clone())?;
                heads.push(tape.matmul(weights, v)?);
            }
            per_seq.push(tape.concat_cols(&heads)?);
        }
        let attended = tape.concat_rows(&per_seq)?;
        let attended = self.out.forward(tape, params, attended)?;
        let x = tape.add(x, attended)?;

        let normed = self.norm_ff.forward(tape, params, x)?;
        let hidden = self.ff_in.forward(tape, params, normed)?;
        let hidden = tape.relu(hidden)?;
        let ff = self.ff_out.forward(tape, params, hidden)?;
        tape.add(x, ff)
    }
}

/// Stack of [`AttentionLayer`]s followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    pub layers: Vec<AttentionLayer>,
    pub final_norm: LayerNorm,
}

impl AttentionEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_layers: usize,
        model_dim: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| AttentionLayer::new(store, &format!("{name}.{i}"), model_dim, num_heads, model_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), model_dim),
        })
    }

    /// Encodes batch-major sequences; see [`AttentionLayer::forward`].
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var, masks: &[Vec<bool>]) -> Result<Var> {
        let steps = masks.first().map_or(0, Vec::len);
        if masks.is_empty() || masks.iter().any(|m| m.len() != steps) {
            return Err(Error::shape("self_attention", "masks must be non-empty and of equal length"));
        }
        if tape.value(x).rows() != masks.len() * steps {
            return Err(Error::shape(
                "self_attention",
                format!("{} rows for {} sequences of length {steps}", tape.value(x).rows(), masks.len()),
            ));
        }
        if let Some(b) = masks.iter().position(|m| !m.iter().any(|&k| k)) {
            return Err(Error::Data(format!("sequence {b} is entirely masked")));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, params, h, masks)?;
        }
        self.final_norm.forward(tape, params, h)
    }
}

/// Sinusoidal position table of shape `steps × dim`.
pub fn sinusoidal_positions(steps: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * rate;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![steps, dim], data)
}
