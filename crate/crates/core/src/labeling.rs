//! Teacher labels from hypothesis/reference alignment.
//!
//! Each hypothesis token is labelled 0 when it aligns to an equal reference
//! token and 1 when it is a substitution or an insertion. Deletions have no
//! hypothesis token and therefore no label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ClassCounts;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub matches: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentResult {
    pub labels: Vec<u8>,
    pub counts: EditCounts,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Match,
    Sub,
    Del,
    Ins,
}

/// Levenshtein alignment with unit costs.
///
/// When several alignments are optimal, the backtrace from the end prefers
/// match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentResult {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut labels = vec![0u8; m];
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        let mv = if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && d[(i - 1) * w + j - 1] == here {
            Move::Match
        } else if i > 0 && j > 0 && d[(i - 1) * w + j - 1] + 1 == here {
            Move::Sub
        } else if i > 0 && d[(i - 1) * w + j] + 1 == here {
            Move::Del
        } else {
            Move::Ins
        };
        match mv {
            Move::Match => {
                counts.matches += 1;
                i -= 1;
                j -= 1;
            }
            Move::Sub => {
                counts.substitutions += 1;
                labels[j - 1] = 1;
                i -= 1;
                j -= 1;
            }
            Move::Del => {
                counts.deletions += 1;
                i -= 1;
            }
            Move::Ins => {
                counts.insertions += 1;
                labels[j - 1] = 1;
                j -= 1;
            }
        }
    }
    AlignmentResult {
        labels,
        counts,
        edit_distance: d[n * w + m],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub utterances: usize,
    pub tokens: usize,
    pub incorrect_token_rate: f64,
    pub class_counts: ClassCounts,
}

/// Label statistics over a labelled dataset.
pub fn dataset_stats<'a, I>(label_seqs: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut utterances = 0;
    let mut ones = 0u64;
    let mut total = 0u64;
    for seq in label_seqs {
        utterances += 1;
        total += seq.len() as u64;
        ones += seq.iter().filter(|&&l| l == 1).count() as u64;
    }
    if utterances == 0 || total == 0 {
        return Err(Error::Data("dataset has no labelled tokens".into()));
    }
    Ok(DatasetStats {
        utterances,
        tokens: total as usize,
        incorrect_token_rate: ones as f64 / total as f64,
        class_counts: ClassCounts {
            n_correct: total - ones,
            n_incorrect: ones,
        },
    })
}

/// Token error rate with deletions counted: `(S + D + I) / N_ref`.
pub fn token_error_rate<'a, I>(alignments: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a AlignmentResult, usize)>,
{
    let mut errors = 0usize;
    let mut ref_tokens = 0usize;
    for (a, n_ref) in alignments {
        errors += a.counts.errors();
        ref_tokens += n_ref;
    }
    if ref_tokens == 0 {
        return Err(Error::Data("no reference tokens".into()));
    }
    Ok(errors as f64 / ref_tokens as f64)
}
