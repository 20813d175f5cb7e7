//! Detection metrics for incorrect-token detection: ROC, EER, AUC and NCE.
//!
//! The detector score is the posterior of the *incorrect* class and the
//! positive class is label 1 (incorrect token). A token is flagged when its
//! score is at or above the threshold, so
//! `FAR(t)` is the fraction of correct tokens flagged and
//! `FRR(t)` the fraction of incorrect tokens missed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound used to keep confidences away from 0 and 1 in NCE.
pub const CONFIDENCE_CLAMP: f64 = 1e-12;

/// Detector scores paired with binary labels (1 = incorrect).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabelSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredLabelSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("detector score {i}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {l} is not binary")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// (correct, incorrect) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (neg, pos) = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::Data(format!(
                "metric needs both classes (correct {neg}, incorrect {pos})"
            )));
        }
        Ok((neg, pos))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
}

/// Operating points for thresholds at every distinct score (ascending), plus
/// a final sentinel above the largest score where nothing is flagged.
pub fn roc_curve(data: &ScoredLabelSet) -> Result<Vec<RocPoint>> {
    let (neg, pos) = data.require_both_classes()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    // Start with everything flagged, then unflag one score group at a time.
    let mut flagged_neg = neg;
    let mut missed_pos = 0usize;
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = data.scores[order[i]];
        points.push(RocPoint {
            far: flagged_neg as f64 / neg as f64,
            frr: missed_pos as f64 / pos as f64,
            threshold: t,
        });
        while i < order.len() && data.scores[order[i]] == t {
            if data.labels[order[i]] == 1 {
                missed_pos += 1;
            } else {
                flagged_neg -= 1;
            }
            i += 1;
        }
    }
    let top = data.scores[order[order.len() - 1]];
    points.push(RocPoint {
        far: 0.0,
        frr: 1.0,
        threshold: top + 1.0,
    });
    Ok(points)
}

/// Equal error rate and the threshold where it is reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
    /// `|(FAR-FRR)_i - (FAR-FRR)_{i+1}|` across the bracketing operating
    /// points; zero when an operating point hits FAR = FRR exactly.
    pub gap: f64,
}

/// EER by linear interpolation between the adjacent operating points where
/// `FAR - FRR` changes sign.
pub fn eer(data: &ScoredLabelSet) -> Result<EerPoint> {
    let roc = roc_curve(data)?;
    Ok(eer_from_roc(&roc))
}

pub fn eer_from_roc(roc: &[RocPoint]) -> EerPoint {
    // FAR - FRR runs from +1 down to -1 along ascending thresholds.
    for w in roc.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return EerPoint {
                eer: a.far,
                threshold: a.threshold,
                gap: 0.0,
            };
        }
        if da > 0.0 && db <= 0.0 {
            let alpha = da / (da - db);
            return EerPoint {
                eer: a.far + alpha * (b.far - a.far),
                threshold: a.threshold + alpha * (b.threshold - a.threshold),
                gap: da - db,
            };
        }
    }
    let last = roc[roc.len() - 1];
    EerPoint {
        eer: last.far,
        threshold: last.threshold,
        gap: 0.0,
    }
}

/// Trapezoidal area under TPR (= 1 - FRR) versus FPR (= FAR).
pub fn auc(data: &ScoredLabelSet) -> Result<f64> {
    Ok(auc_from_roc(&roc_curve(data)?))
}

pub fn auc_from_roc(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            (a.far - b.far) * ((1.0 - a.frr) + (1.0 - b.frr)) / 2.0
        })
        .sum()
}

/// Normalised cross-entropy of the confidences `1 - score` against the
/// class prior.
pub fn nce(data: &ScoredLabelSet) -> Result<f64> {
    let (neg, _) = data.require_both_classes()?;
    let n = data.len() as f64;
    let p = neg as f64 / n;
    let h_base = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    let mut h_conf = 0.0;
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        let c = (1.0 - s).clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP);
        h_conf -= if l == 0 { c.ln() } else { (1.0 - c).ln() };
    }
    h_conf /= n;
    Ok((h_base - h_conf) / h_base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub eer_gap: f64,
    pub auc: f64,
    pub nce: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roc: Vec<RocPoint>,
}

/// All metrics at once; `with_roc` keeps the full curve in the report.
pub fn evaluate(data: &ScoredLabelSet, with_roc: bool) -> Result<MetricsReport> {
    let roc = roc_curve(data)?;
    let e = eer_from_roc(&roc);
    let (n_correct, n_incorrect) = data.class_counts();
    Ok(MetricsReport {
        eer: e.eer,
        eer_threshold: e.threshold,
        eer_gap: e.gap,
        auc: auc_from_roc(&roc),
        nce: nce(data)?,
        n_correct,
        n_incorrect,
        roc: if with_roc { roc } else { Vec::new() },
    })
}

/// FAR and FRR of flagging every score `>= threshold`.
pub fn rates_at(data: &ScoredLabelSet, threshold: f64) -> Result<(f64, f64)> {
    let (neg, pos) = data.require_both_classes()?;
    let mut fa = 0usize;
    let mut miss = 0usize;
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        let flagged = s >= threshold;
        if l == 0 && flagged {
            fa += 1;
        }
        if l == 1 && !flagged {
            miss += 1;
        }
    }
    Ok((fa as f64 / neg as f64, miss as f64 / pos as f64))
}
