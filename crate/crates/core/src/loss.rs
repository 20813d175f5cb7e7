//! Cross-entropy and class-balanced cross-entropy.
//!
//! Class weights follow the effective-number rule
//! `raw_c = (1 - beta) / (1 - beta^N_c)` and are rescaled so the two weights
//! sum to the number of classes (2).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::PosteriorSequence;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_correct: u64,
    pub n_incorrect: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w0: 1.0, w1: 1.0 };

    pub fn for_label(&self, label: u8) -> f64 {
        if label == 0 {
            self.w0
        } else {
            self.w1
        }
    }
}

/// Class-balanced weights for `counts`, normalised to sum to 2.
pub fn cb_weights(beta: f64, counts: ClassCounts) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    if counts.n_correct == 0 || counts.n_incorrect == 0 {
        return Err(Error::Data(format!(
            "class-balanced weights need both classes present (correct {}, incorrect {})",
            counts.n_correct, counts.n_incorrect
        )));
    }
    let raw = |n: u64| {
        // beta^n as exp(n ln beta): stays accurate for n in the millions.
        let pow = if beta == 0.0 { 0.0 } else { (n as f64 * beta.ln()).exp() };
        (1.0 - beta) / (1.0 - pow)
    };
    let (r0, r1) = (raw(counts.n_correct), raw(counts.n_incorrect));
    let scale = 2.0 / (r0 + r1);
    Ok(ClassWeights {
        w0: r0 * scale,
        w1: r1 * scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Summed (not averaged) weighted negative log-likelihood.
    pub total: f64,
    /// Number of unmasked samples.
    pub count: usize,
    /// Number of target probabilities that hit [`PROB_FLOOR`].
    pub clamped: usize,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }
}

/// `-Σ w_{y} log p_{y}` over unmasked positions of every sequence.
pub fn cb_cross_entropy(
    posteriors: &[PosteriorSequence],
    labels: &[Vec<u8>],
    weights: ClassWeights,
    mask: &[Vec<bool>],
) -> Result<LossValue> {
    if posteriors.len() != labels.len() || labels.len() != mask.len() {
        return Err(Error::shape(
            "cb_cross_entropy",
            format!("{} posteriors, {} label rows, {} mask rows", posteriors.len(), labels.len(), mask.len()),
        ));
    }
    let mut out = LossValue {
        total: 0.0,
        count: 0,
        clamped: 0,
    };
    for ((p, y), m) in posteriors.iter().zip(labels).zip(mask) {
        if p.len() != y.len() || y.len() != m.len() {
            return Err(Error::shape(
                "cb_cross_entropy",
                format!("sequence of {} posteriors, {} labels, {} mask entries", p.len(), y.len(), m.len()),
            ));
        }
        for (t, (&label, &keep)) in y.iter().zip(m).enumerate() {
            if !keep {
                continue;
            }
            let prob = p.prob(t, label);
            if prob < PROB_FLOOR {
                out.clamped += 1;
            }
            out.total -= weights.for_label(label) * prob.max(PROB_FLOOR).ln();
            out.count += 1;
        }
    }
    Ok(out)
}

/// Unweighted cross-entropy; identical to [`cb_cross_entropy`] with unit weights.
pub fn cross_entropy(posteriors: &[PosteriorSequence], labels: &[Vec<u8>], mask: &[Vec<bool>]) -> Result<LossValue> {
    cb_cross_entropy(posteriors, labels, ClassWeights::UNIT, mask)
}

/// Differentiable class-balanced loss over rows of the `N × 2` posterior
/// matrix `probs`. `targets` lists `(row, label)` for every unmasked position.
pub fn cb_cross_entropy_on_tape(
    tape: &mut Tape,
    probs: Var,
    targets: &[(usize, u8)],
    weights: ClassWeights,
) -> Result<(Var, usize)> {
    let clamped = targets
        .iter()
        .filter(|&&(r, c)| tape.value(probs).get(r, c as usize) < PROB_FLOOR)
        .count();
    let safe = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(safe)?;
    let picks = targets
        .iter()
        .map(|&(r, c)| (r, c as usize, -weights.for_label(c)))
        .collect();
    Ok((tape.weighted_pick(logp, picks)?, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};
    use proptest::prelude::*;

    const TABLE_COUNTS: ClassCounts = ClassCounts {
        n_correct: 5_503_696,
        n_incorrect: 297_298,
    };

    fn post(rows: &[[f64; 2]]) -> PosteriorSequence {
        PosteriorSequence::new(Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap())
            .unwrap()
    }

    #[test]
    fn beta_zero_gives_unit_weights() {
        let w = cb_weights(0.0, ClassCounts { n_correct: 10, n_incorrect: 3 }).unwrap();
        assert_eq!(w, ClassWeights::UNIT);
        let w = cb_weights(0.0, TABLE_COUNTS).unwrap();
        assert_eq!(w, ClassWeights::UNIT);
    }

    #[test]
    fn five_nines_reproduces_reported_weights() {
        let w = cb_weights(0.99999, TABLE_COUNTS).unwrap();
        assert!((w.w0 - 0.97).abs() <= 0.01, "{w:?}");
        assert!((w.w1 - 1.03).abs() <= 0.01, "{w:?}");
        assert!((w.w0 + w.w1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn four_nines_is_nearly_unweighted_by_direct_evaluation() {
        // Oracle: evaluate the weights with powi, independently of exp/ln.
        let beta: f64 = 0.9999;
        let r0 = (1.0 - beta) / (1.0 - beta.powi(5_503_696));
        let r1 = (1.0 - beta) / (1.0 - beta.powi(297_298));
        let want = (2.0 * r0 / (r0 + r1), 2.0 * r1 / (r0 + r1));
        let w = cb_weights(beta, TABLE_COUNTS).unwrap();
        assert!((w.w0 - want.0).abs() < 1e-9 && (w.w1 - want.1).abs() < 1e-9);
        assert!((w.w0 - 1.0).abs() < 1e-3 && (w.w1 - 1.0).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn zero_count_or_bad_beta_is_an_error() {
        assert!(matches!(
            cb_weights(0.9, ClassCounts { n_correct: 0, n_incorrect: 3 }),
            Err(Error::Data(_))
        ));
        assert!(matches!(cb_weights(1.0, TABLE_COUNTS), Err(Error::Config(_))));
        assert!(matches!(cb_weights(-0.1, TABLE_COUNTS), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = cross_entropy(&[post(&[[1.0, 0.0], [0.0, 1.0]])], &[vec![0, 1]], &[vec![true, true]]).unwrap();
        assert_eq!(perfect.total, 0.0);

        let half = cross_entropy(&[post(&[[0.5, 0.5]])], &[vec![0]], &[vec![true]]).unwrap();
        assert!((half.total - 2f64.ln()).abs() < 1e-15);

        let weighted = cb_cross_entropy(
            &[post(&[[0.5, 0.5], [0.5, 0.5]])],
            &[vec![0, 1]],
            ClassWeights { w0: 0.9, w1: 1.1 },
            &[vec![true, true]],
        )
        .unwrap();
        assert!((weighted.total - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_positions_are_skipped_and_zeros_are_clamped() {
        let l = cross_entropy(&[post(&[[0.5, 0.5], [1.0, 0.0]])], &[vec![0, 1]], &[vec![true, false]]).unwrap();
        assert_eq!(l.count, 1);
        assert_eq!(l.clamped, 0);

        let l = cross_entropy(&[post(&[[1.0, 0.0]])], &[vec![1]], &[vec![true]]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!(l.total.is_finite());
        assert!((l.total + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_direct_loss_and_gradient_checks() {
        let rows = [[0.3, 0.7], [0.9, 0.1], [0.6, 0.4]];
        let labels = [1u8, 0, 1];
        let w = ClassWeights { w0: 0.7, w1: 1.3 };
        let direct = cb_cross_entropy(&[post(&rows)], &[labels.to_vec()], w, &[vec![true; 3]]).unwrap();

        let logits = Tensor::matrix(3, 2, vec![0.2, -0.4, 1.1, 0.3, -0.7, 0.5]).unwrap();
        let targets: Vec<(usize, u8)> = labels.iter().enumerate().map(|(r, &c)| (r, c)).collect();
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::matrix(3, 2, rows.iter().flatten().copied().collect()).unwrap());
        let (loss, _) = cb_cross_entropy_on_tape(&mut tape, probs, &targets, w).unwrap();
        assert!((tape.value(loss).item().unwrap() - direct.total).abs() < 1e-14);

        let err = finite_diff_check(
            |tape, p| {
                let probs = tape.softmax(p[0])?;
                Ok(cb_cross_entropy_on_tape(tape, probs, &targets, w)?.0)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn weights_sum_to_two_and_favour_the_minority(
            beta in 0.0f64..0.99999,
            n_minor in 1u64..100_000,
            extra in 0u64..10_000_000,
        ) {
            let counts = ClassCounts { n_correct: n_minor + extra, n_incorrect: n_minor };
            let w = cb_weights(beta, counts).unwrap();
            prop_assert!((w.w0 + w.w1 - 2.0).abs() < 1e-9);
            prop_assert!(w.w1 >= w.w0 - 1e-12);
        }

        #[test]
        fn larger_beta_never_shrinks_the_ratio(
            b1 in 0.0f64..0.9999,
            db in 0.0f64..0.0001,
            n1 in 1u64..50_000,
            extra in 0u64..5_000_000,
        ) {
            let counts = ClassCounts { n_correct: n1 + extra, n_incorrect: n1 };
            let lo = cb_weights(b1, counts).unwrap();
            let hi = cb_weights(b1 + db, counts).unwrap();
            prop_assert!(hi.w1 / hi.w0 >= lo.w1 / lo.w0 * (1.0 - 1e-12));
        }

        #[test]
        fn unit_weights_are_bit_identical_to_plain_cross_entropy(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..20),
            seed in any::<u64>(),
        ) {
            let rows: Vec<[f64; 2]> = probs.iter().map(|&p| [1.0 - p, p]).collect();
            let labels: Vec<u8> = (0..rows.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            let mask = vec![true; rows.len()];
            let got = cb_cross_entropy(&[post(&rows)], std::slice::from_ref(&labels), ClassWeights::UNIT, &[mask]).unwrap();
            // Independent plain sum in the same order.
            let mut plain = 0.0;
            for (r, &y) in rows.iter().zip(&labels) {
                plain -= r[y as usize].max(PROB_FLOOR).ln();
            }
            prop_assert_eq!(got.total.to_bits(), plain.to_bits());
        }
    }
}
