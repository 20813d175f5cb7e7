//! The three labeler families and their per-token posteriors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, AttentionEncoder, BiLstm, Bound, Embedding, Linear, ParamStore};
use crate::synth::AUX_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blstm,
    Mlp,
    Transformer,
}

/// One of the four per-token decoder scores, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxFeature {
    Ctc,
    Att,
    Lm,
    Wsum,
}

impl AuxFeature {
    pub const ALL: [AuxFeature; AUX_DIM] = [AuxFeature::Ctc, AuxFeature::Att, AuxFeature::Lm, AuxFeature::Wsum];

    /// Column of this score in a 4-wide auxiliary row.
    pub fn column(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    pub family: Family,
    /// Taken from the dataset vocabulary when zero.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub aux_features: Vec<AuxFeature>,
    pub lstm_layers: usize,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub transformer_layers: usize,
    pub heads: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            family: Family::Blstm,
            vocab_size: 0,
            embed_dim: 16,
            aux_features: AuxFeature::ALL.to_vec(),
            lstm_layers: 2,
            mlp_layers: 6,
            mlp_width: 36,
            transformer_layers: 2,
            heads: 2,
        }
    }
}

impl LabelerConfig {
    pub fn aux_dim(&self) -> usize {
        self.aux_features.len()
    }

    /// Width of the per-token input and of each recurrent/attention layer.
    pub fn hidden_dim(&self) -> usize {
        self.embed_dim + self.aux_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let mut violated = Vec::new();
        if self.vocab_size == 0 {
            violated.push("vocab_size must be positive".to_string());
        }
        if self.embed_dim == 0 {
            violated.push("embed_dim must be positive".to_string());
        }
        for (i, f) in self.aux_features.iter().enumerate() {
            if self.aux_features[..i].contains(f) {
                violated.push(format!("aux feature {f:?} listed twice"));
            }
        }
        match self.family {
            Family::Blstm if self.lstm_layers == 0 => violated.push("lstm_layers must be positive".into()),
            Family::Mlp if self.mlp_layers == 0 || self.mlp_width == 0 => {
                violated.push("mlp_layers and mlp_width must be positive".into())
            }
            Family::Transformer => {
                if self.transformer_layers == 0 {
                    violated.push("transformer_layers must be positive".into());
                }
                if self.heads == 0 || !self.hidden_dim().is_multiple_of(self.heads) {
                    violated.push(format!(
                        "model dimension {} (embed_dim + aux features) must be divisible by heads = {}",
                        self.hidden_dim(),
                        self.heads
                    ));
                }
            }
            _ => {}
        }
        if violated.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid labeler config: {}", violated.join("; "))))
        }
    }
}

/// Two-class posteriors for one sequence; column 1 is P(incorrect).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSequence {
    probs: Tensor,
}

impl PosteriorSequence {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(Error::shape("posterior", format!("expected a matrix, got shape {:?}", probs.shape())));
        }
        let (rows, cols) = probs.dims2();
        if cols != 2 {
            return Err(Error::shape("posterior", format!("expected 2 columns, got {cols}")));
        }
        for r in 0..rows {
            let row = probs.row_slice(r);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("posterior row {r} is not a distribution: {row:?}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prob(&self, t: usize, label: u8) -> f64 {
        self.probs.get(t, label as usize)
    }

    /// P(incorrect) per position.
    pub fn incorrect(&self) -> Vec<f64> {
        (0..self.len()).map(|t| self.prob(t, 1)).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }
}

/// Flags position `t` iff P(incorrect) ≥ `threshold`; the threshold is
/// clamped to [0, 1].
pub fn detect(posteriors: &PosteriorSequence, threshold: f64) -> Vec<bool> {
    let t = if threshold.is_nan() { 1.0 } else { threshold.clamp(0.0, 1.0) };
    (0..posteriors.len()).map(|i| posteriors.prob(i, 1) >= t).collect()
}

/// Token ids and 4-wide auxiliary scores of one hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct SequenceView<'a> {
    pub ids: &'a [usize],
    pub aux: &'a [[f64; AUX_DIM]],
}

/// Posterior rows produced by [`Labeler::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N × 2` posteriors.
    pub probs: Var,
    /// `rows[b][t]` is the row of `probs` for position `t` of sequence `b`.
    pub rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
enum Body {
    Blstm(Vec<BiLstm>),
    Mlp(Vec<Linear>),
    Transformer(AttentionEncoder),
}

/// Row layout of a padded batch.
#[derive(Clone, Copy, PartialEq)]
enum Layout {
    /// `row = t * batch + b`, padded to the longest sequence.
    TimeMajor,
    /// `row = b * steps + t`, padded to the longest sequence.
    BatchMajor,
    /// Sequences concatenated without padding.
    Packed,
}

#[derive(Debug, Clone)]
pub struct Labeler {
    config: LabelerConfig,
    params: ParamStore,
    embedding: Embedding,
    body: Body,
    head: Linear,
}

/// Sequences per tape when predicting.
const PREDICT_BATCH: usize = 32;

impl Labeler {
    pub fn build(config: &LabelerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedding = Embedding::new(&mut params, "embed", config.vocab_size, config.embed_dim, &mut rng);
        let width = config.hidden_dim();
        let (body, out_dim) = match config.family {
            Family::Blstm => {
                let mut layers = Vec::with_capacity(config.lstm_layers);
                let mut input = width;
                for i in 0..config.lstm_layers {
                    let l = BiLstm::new(&mut params, &format!("blstm.{i}"), input, width, &mut rng);
                    input = l.output_dim();
                    layers.push(l);
                }
                (Body::Blstm(layers), input)
            }
            Family::Mlp => {
                let mut layers = Vec::with_capacity(config.mlp_layers);
                let mut input = width;
                for i in 0..config.mlp_layers {
                    layers.push(Linear::new(&mut params, &format!("mlp.{i}"), input, config.mlp_width, &mut rng));
                    input = config.mlp_width;
                }
                (Body::Mlp(layers), input)
            }
            Family::Transformer => {
                let enc = AttentionEncoder::new(
                    &mut params,
                    "encoder",
                    config.transformer_layers,
                    width,
                    config.heads,
                    &mut rng,
                )?;
                (Body::Transformer(enc), width)
            }
        };
        let head = Linear::new(&mut params, "head", out_dim, 2, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            embedding,
            body,
            head,
        })
    }

    pub fn config(&self) -> &LabelerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn layout(&self) -> Layout {
        match self.body {
            Body::Blstm(_) => Layout::TimeMajor,
            Body::Mlp(_) => Layout::Packed,
            Body::Transformer(_) => Layout::BatchMajor,
        }
    }

    /// Records the forward pass of a batch on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, batch: &[SequenceView<'_>]) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for (b, s) in batch.iter().enumerate() {
            if s.ids.is_empty() {
                return Err(Error::Data(format!("sequence {b} has no tokens")));
            }
            if s.ids.len() != s.aux.len() {
                return Err(Error::Data(format!(
                    "sequence {b} has {} tokens but {} auxiliary rows",
                    s.ids.len(),
                    s.aux.len()
                )));
            }
        }
        let n = batch.len();
        let steps = batch.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let layout = self.layout();
        let rows: Vec<Vec<usize>> = match layout {
            Layout::TimeMajor => batch.iter().enumerate().map(|(b, s)| (0..s.ids.len()).map(|t| t * n + b).collect()).collect(),
            Layout::BatchMajor => batch.iter().enumerate().map(|(b, s)| (0..s.ids.len()).map(|t| b * steps + t).collect()).collect(),
            Layout::Packed => {
                let mut next = 0;
                batch
                    .iter()
                    .map(|s| {
                        let r = (next..next + s.ids.len()).collect();
                        next += s.ids.len();
                        r
                    })
                    .collect()
            }
        };
        let total = match layout {
            Layout::Packed => batch.iter().map(|s| s.ids.len()).sum(),
            _ => n * steps,
        };

        // Padding rows keep id 0 and zero scores.
        let aux_dim = self.config.aux_dim();
        let mut ids = vec![0usize; total];
        let mut aux = vec![0.0; total * aux_dim];
        for (s, r) in batch.iter().zip(&rows) {
            for (t, &row) in r.iter().enumerate() {
                ids[row] = s.ids[t];
                for (k, f) in self.config.aux_features.iter().enumerate() {
                    aux[row * aux_dim + k] = s.aux[t][f.column()];
                }
            }
        }
        let emb = self.embedding.forward(tape, params, &ids)?;
        let mut x = if aux_dim == 0 {
            emb
        } else {
            let a = tape.constant(Tensor::matrix(total, aux_dim, aux)?);
            tape.concat_cols(&[emb, a])?
        };

        let hidden = match &self.body {
            Body::Blstm(layers) => {
                let lengths: Vec<usize> = batch.iter().map(|s| s.ids.len()).collect();
                for l in layers {
                    x = l.forward_batch(tape, params, x, n, &lengths)?;
                }
                x
            }
            Body::Mlp(layers) => {
                for l in layers {
                    let h = l.forward(tape, params, x)?;
                    x = tape.relu(h)?;
                }
                x
            }
            Body::Transformer(enc) => {
                let width = self.config.hidden_dim();
                let table = sinusoidal_positions(steps, width);
                let mut pos = Vec::with_capacity(total * width);
                for _ in 0..n {
                    pos.extend_from_slice(table.values());
                }
                let pos = tape.constant(Tensor::matrix(total, width, pos)?);
                let x = tape.add(x, pos)?;
                let masks: Vec<Vec<bool>> = batch.iter().map(|s| (0..steps).map(|t| t < s.ids.len()).collect()).collect();
                enc.forward(tape, params, x, &masks)?
            }
        };
        let logits = self.head.forward(tape, params, hidden)?;
        let probs = tape.softmax(logits)?;
        Ok(ForwardOutput { probs, rows })
    }

    /// Posteriors for each sequence, without recording gradients.
    pub fn predict(&self, seqs: &[SequenceView<'_>]) -> Result<Vec<PosteriorSequence>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(PREDICT_BATCH) {
            let mut tape = Tape::new();
            let bound = self.params.bind_frozen(&mut tape);
            let fwd = self.forward(&mut tape, &bound, chunk)?;
            let probs = tape.value(fwd.probs);
            for rows in &fwd.rows {
                let data = rows.iter().flat_map(|&r| probs.row_slice(r).iter().copied()).collect();
                out.push(PosteriorSequence::new(Tensor::matrix(rows.len(), 2, data)?)?);
            }
        }
        Ok(out)
    }

    pub fn predict_one(&self, ids: &[usize], aux: &[[f64; AUX_DIM]]) -> Result<PosteriorSequence> {
        let mut p = self.predict(&[SequenceView { ids, aux }])?;
        Ok(p.pop().expect("one sequence in, one out"))
    }
}
