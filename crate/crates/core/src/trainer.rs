//! Mini-batch training with class-balanced loss and epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::{class_counts, Sequence, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::{cb_cross_entropy_on_tape, cb_weights, ClassWeights};
use crate::metrics::ScoredLabelSet;
use crate::model::Labeler;
use crate::nn::Bound;
use crate::optim::{AdamConfig, AdamState, NoamSchedule};
use crate::synth::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sequences per batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Class-balancing strength; 0 gives plain cross-entropy.
    pub beta: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 20,
            beta: 0.9999,
            seed: 0,
            warmup_steps: 4000,
            lr_scale: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "batch_size and epochs must be at least 1 (got {}, {})",
                self.batch_size, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.adam.clip_norm >= 0.0) || !self.adam.clip_norm.is_finite() {
            return Err(Error::Config(format!("clip_norm must be finite and non-negative, got {}", self.adam.clip_norm)));
        }
        NoamSchedule::new(1, self.warmup_steps, self.lr_scale)?;
        Ok(())
    }
}

/// Index batches for one epoch: a seeded permutation cut into
/// `batch_size` pieces (the last may be shorter).
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    /// Weighted negative log-likelihood summed over tokens.
    pub total: crate::autodiff::Var,
    pub tokens: usize,
    pub clamped: usize,
}

/// Records the summed class-balanced loss of `batch` on `tape`. Padding
/// positions have no target and so contribute nothing.
pub fn batch_loss(model: &Labeler, tape: &mut Tape, bound: &Bound, batch: &[&Sequence], weights: ClassWeights) -> Result<BatchLoss> {
    let views: Vec<_> = batch.iter().map(|s| s.view()).collect();
    let out = model.forward(tape, bound, &views)?;
    let mut targets = Vec::new();
    for (s, rows) in batch.iter().zip(&out.rows) {
        if s.labels.len() != rows.len() {
            return Err(Error::Data(format!("{}: {} labels for {} tokens", s.utt_id, s.labels.len(), rows.len())));
        }
        targets.extend(rows.iter().zip(&s.labels).map(|(&r, &l)| (r, l)));
    }
    let (total, clamped) = cb_cross_entropy_on_tape(tape, out.probs, &targets, weights)?;
    Ok(BatchLoss {
        total,
        tokens: targets.len(),
        clamped,
    })
}

/// Mean weighted loss per token, without gradients.
pub fn mean_loss(model: &Labeler, seqs: &[Sequence], weights: ClassWeights) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0;
    for chunk in seqs.chunks(32) {
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape);
        let refs: Vec<_> = chunk.iter().collect();
        let b = batch_loss(model, &mut tape, &bound, &refs, weights)?;
        sum += tape.value(b.total).values()[0];
        tokens += b.tokens;
    }
    if tokens == 0 {
        return Err(Error::Data("no tokens to score".into()));
    }
    Ok(sum / tokens as f64)
}

/// P(incorrect) of every token with its label.
pub fn score_tokens(model: &Labeler, seqs: &[Sequence]) -> Result<ScoredLabelSet> {
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let posts = model.predict(&views)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, s) in posts.iter().zip(seqs) {
        if s.labels.len() != p.len() {
            return Err(Error::Data(format!("{}: missing labels", s.utt_id)));
        }
        scores.extend(p.incorrect());
        labels.extend_from_slice(&s.labels);
    }
    ScoredLabelSet::new(scores, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub learning_rate: f64,
    pub steps: u64,
    /// Target probabilities that hit the log floor.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub weights: ClassWeights,
}

#[derive(Debug, thiserror::Error)]
#[error("training stopped in epoch {epoch}: {source}")]
pub struct TrainFailure {
    pub epoch: usize,
    #[source]
    pub source: Error,
    /// Parameters after the last completed epoch, if any.
    pub last_good: Option<Box<Checkpoint>>,
    pub log: Vec<EpochRecord>,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.source
    }
}

/// Trains `model` for `cfg.epochs` epochs and returns the epoch with the
/// lowest validation loss (earliest on ties). Class weights come from the
/// training labels.
pub fn train(
    mut model: Labeler,
    vocab: &Vocabulary,
    train_set: &[Sequence],
    valid_set: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainFailure> {
    let fail = |epoch, source, last_good, log| TrainFailure {
        epoch,
        source,
        last_good,
        log,
    };
    let setup = || -> Result<(ClassWeights, NoamSchedule)> {
        cfg.validate()?;
        if train_set.is_empty() || valid_set.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        let weights = cb_weights(cfg.beta, class_counts(train_set)?)?;
        let schedule = NoamSchedule::new(model.config().hidden_dim(), cfg.warmup_steps, cfg.lr_scale)?;
        Ok((weights, schedule))
    };
    let (weights, schedule) = setup().map_err(|e| fail(0, e, None, Vec::new()))?;

    let mut adam = AdamState::new(model.params().tensors(), cfg.adam);
    let mut log: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut last_good: Option<Box<Checkpoint>> = None;

    for epoch in 1..=cfg.epochs {
        let mut run_epoch = || -> Result<EpochRecord> {
            let mut sum = 0.0;
            let mut tokens = 0;
            let mut clamped = 0;
            let mut lr = 0.0;
            for idx in make_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch) {
                let batch: Vec<&Sequence> = idx.iter().map(|&i| &train_set[i]).collect();
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let b = batch_loss(&model, &mut tape, &bound, &batch, weights)?;
                let value = tape.value(b.total).values()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at step {}", adam.step + 1)));
                }
                sum += value;
                tokens += b.tokens;
                clamped += b.clamped;
                let mean = tape.scale(b.total, 1.0 / b.tokens.max(1) as f64)?;
                let grads = tape.backward(mean)?;
                let grads = model.params().collect_grads(&bound, grads);
                lr = schedule.lr(adam.step + 1)?;
                adam.step(model.params_mut().tensors_mut(), &grads, lr)?;
            }
            let valid_loss = mean_loss(&model, valid_set, weights)?;
            if !valid_loss.is_finite() {
                return Err(Error::NonFinite("validation loss".into()));
            }
            Ok(EpochRecord {
                epoch,
                train_loss: sum / tokens.max(1) as f64,
                valid_loss,
                learning_rate: lr,
                steps: adam.step,
                clamped,
            })
        };
        let record = match run_epoch() {
            Ok(r) => r,
            Err(e) => return Err(fail(epoch, e, last_good, log)),
        };
        on_epoch(&record);
        let ckpt = Checkpoint::new(
            &model,
            vocab,
            TrainingMeta {
                epoch,
                train_loss: record.train_loss,
                valid_loss: record.valid_loss,
                seed: cfg.seed,
            },
        );
        if best.as_ref().is_none_or(|b| record.valid_loss < b.meta.valid_loss) {
            best = Some(ckpt.clone());
        }
        last_good = Some(Box::new(ckpt));
        log.push(record);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
        weights,
    })
}
