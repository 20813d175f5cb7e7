//! Seeded synthetic corpus: Markov-chain references, a
//! substitution/deletion/insertion channel, and class-conditional Gaussian
//! decoder scores for every hypothesis token.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::{self, ScoredLabelSet};

/// Number of per-token auxiliary scores: ctc, att, lm and their weighted sum.
pub const AUX_DIM: usize = 4;

/// `lambda * ctc + (1 - lambda) * att + gamma * lm`.
pub fn combine_scores(ctc: f64, att: f64, lm: f64, lambda: f64, gamma: f64) -> f64 {
    lambda * ctc + (1.0 - lambda) * att + gamma * lm
}

/// Class-conditional Gaussians over the three base scores (ctc, att, lm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreModel {
    pub correct_mean: [f64; 3],
    pub incorrect_mean: [f64; 3],
    pub correct_cov: [[f64; 3]; 3],
    pub incorrect_cov: [[f64; 3]; 3],
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for ScoreModel {
    /// Unit covariance with the incorrect mean offset along (2, 2, 1) to a
    /// Mahalanobis separation of 2.
    fn default() -> Self {
        let correct = [-0.5, -0.5, -1.0];
        let shift = [4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0];
        Self {
            correct_mean: correct,
            incorrect_mean: [correct[0] - shift[0], correct[1] - shift[1], correct[2] - shift[2]],
            correct_cov: IDENTITY3,
            incorrect_cov: IDENTITY3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    /// Inclusive reference length range.
    pub seq_len_range: (usize, usize),
    pub n_utterances: usize,
    pub sub_rate: f64,
    pub ins_rate: f64,
    pub del_rate: f64,
    /// Symmetric Dirichlet concentration of each transition row.
    pub transition_concentration: f64,
    pub score_model: ScoreModel,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            seq_len_range: (8, 32),
            n_utterances: 5000,
            sub_rate: 0.04,
            ins_rate: 0.01,
            del_rate: 0.01,
            transition_concentration: 0.3,
            score_model: ScoreModel::default(),
            lambda: 0.3,
            gamma: 0.3,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.seq_len_range;
        if lo == 0 || hi < lo {
            return bad(format!("seq_len_range must satisfy 1 <= min <= max, got ({lo}, {hi})"));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.n_utterances == 0 {
            return bad("n_utterances must be positive".into());
        }
        for (name, r) in [("sub_rate", self.sub_rate), ("ins_rate", self.ins_rate), ("del_rate", self.del_rate)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1), got {r}"));
            }
        }
        if self.sub_rate + self.ins_rate + self.del_rate >= 1.0 {
            return bad("sub_rate + ins_rate + del_rate must be below 1".into());
        }
        if !(self.transition_concentration > 0.0) {
            return bad("transition_concentration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(self.gamma >= 0.0) {
            return bad(format!(
                "need 0 <= lambda <= 1 and gamma >= 0, got ({}, {})",
                self.lambda, self.gamma
            ));
        }
        cholesky3(&self.score_model.correct_cov)?;
        cholesky3(&self.score_model.incorrect_cov)?;
        Ok(())
    }
}

/// Seed of the `k`-th derived stream of `seed` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Synthetic token name for id `i`.
pub fn token_name(i: usize) -> String {
    format!("t{i}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHypothesis {
    pub utt_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    /// Cumulative scores of each hypothesis prefix.
    pub cumulative: Vec<[f64; AUX_DIM]>,
    /// Per-token scores: adjacent differences of `cumulative`.
    pub aux: Vec<[f64; AUX_DIM]>,
    /// Channel truth: 1 for substituted or inserted tokens.
    pub labels: Vec<u8>,
}

/// Lower Cholesky factor of a symmetric positive-definite 3×3 matrix.
fn cholesky3(a: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    for i in 0..3 {
        for j in 0..3 {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return Err(Error::Config("score covariance is not symmetric".into()));
            }
        }
    }
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 1e-12) {
                    return Err(Error::Config("score covariance is singular or not positive definite".into()));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b`.
fn cholesky_solve(l: &[[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let mut y = [0.0; 3];
    for i in 0..3 {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        x[i] = (y[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Corpus generator: holds the reference language model and channel.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    start: WeightedIndex<f64>,
    transitions: Vec<WeightedIndex<f64>>,
    chol: [[[f64; 3]; 3]; 2],
}

fn dirichlet_row(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, n: usize) -> Result<WeightedIndex<f64>> {
    let mut row: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    if row.iter().all(|&w| w == 0.0) {
        row = vec![1.0; n];
    }
    WeightedIndex::new(row).map_err(|e| Error::Config(format!("transition row: {e}")))
}

impl Generator {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gamma = Gamma::new(config.transition_concentration, 1.0)
            .map_err(|e| Error::Config(format!("transition_concentration: {e}")))?;
        let v = config.vocab_size;
        let start = dirichlet_row(&mut rng, &gamma, v)?;
        let transitions = (0..v).map(|_| dirichlet_row(&mut rng, &gamma, v)).collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            start,
            transitions,
            chol: [
                cholesky3(&config.score_model.correct_cov)?,
                cholesky3(&config.score_model.incorrect_cov)?,
            ],
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `count` utterances from the stream `stream_seed`. Utterance `i` only
    /// depends on `(config, stream_seed, i)`, so ranges can be generated
    /// independently and concatenated.
    pub fn utterances(&self, stream_seed: u64, range: std::ops::Range<usize>, id_prefix: &str) -> Vec<ScoredHypothesis> {
        range.map(|i| self.utterance(stream_seed, i, id_prefix)).collect()
    }

    fn utterance(&self, stream_seed: u64, index: usize, id_prefix: &str) -> ScoredHypothesis {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        rng.set_stream(index as u64);

        let (lo, hi) = cfg.seq_len_range;
        let len = rng.random_range(lo..=hi);
        let mut reference = Vec::with_capacity(len);
        let mut prev = self.start.sample(&mut rng);
        reference.push(prev);
        for _ in 1..len {
            prev = self.transitions[prev].sample(&mut rng);
            reference.push(prev);
        }

        let (hypothesis, labels) = loop {
            let (h, l) = self.corrupt(&mut rng, &reference);
            if !h.is_empty() {
                break (h, l);
            }
        };

        let mut cumulative = Vec::with_capacity(hypothesis.len());
        let mut running = [0.0; AUX_DIM];
        for &label in &labels {
            let base = self.draw_scores(&mut rng, label);
            let wsum = combine_scores(base[0], base[1], base[2], cfg.lambda, cfg.gamma);
            for (r, s) in running.iter_mut().zip([base[0], base[1], base[2], wsum]) {
                *r += s;
            }
            cumulative.push(running);
        }
        let mut aux = Vec::with_capacity(cumulative.len());
        let mut prev = [0.0; AUX_DIM];
        for c in &cumulative {
            let (ctc, att, lm) = (c[0] - prev[0], c[1] - prev[1], c[2] - prev[2]);
            aux.push([ctc, att, lm, combine_scores(ctc, att, lm, cfg.lambda, cfg.gamma)]);
            prev = *c;
        }

        ScoredHypothesis {
            utt_id: format!("{id_prefix}{index:06}"),
            reference,
            hypothesis,
            cumulative,
            aux,
            labels,
        }
    }

    fn corrupt(&self, rng: &mut ChaCha8Rng, reference: &[usize]) -> (Vec<usize>, Vec<u8>) {
        let cfg = &self.config;
        let v = cfg.vocab_size;
        let mut hyp = Vec::with_capacity(reference.len() + 2);
        let mut labels = Vec::with_capacity(reference.len() + 2);
        for &r in reference {
            let u: f64 = rng.random();
            if u < cfg.sub_rate {
                // Uniform over the other v - 1 tokens.
                let s = rng.random_range(0..v - 1);
                hyp.push(if s >= r { s + 1 } else { s });
                labels.push(1);
            } else if u < cfg.sub_rate + cfg.del_rate {
                // deleted: no hypothesis token
            } else {
                hyp.push(r);
                labels.push(0);
            }
            if rng.random::<f64>() < cfg.ins_rate {
                hyp.push(rng.random_range(0..v));
                labels.push(1);
            }
        }
        (hyp, labels)
    }

    fn draw_scores(&self, rng: &mut ChaCha8Rng, label: u8) -> [f64; 3] {
        let m = &self.config.score_model;
        let (mean, l) = if label == 0 {
            (m.correct_mean, &self.chol[0])
        } else {
            (m.incorrect_mean, &self.chol[1])
        };
        let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let mut out = mean;
        for i in 0..3 {
            for k in 0..=i {
                out[i] += l[i][k] * z[k];
            }
        }
        out
    }
}

/// `config.n_utterances` utterances from the config seed.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<ScoredHypothesis>> {
    let g = Generator::new(config)?;
    Ok(g.utterances(config.seed, 0..config.n_utterances, "utt"))
}

/// Performance of the optimal likelihood-ratio detector on the base scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesBound {
    pub bayes_eer: f64,
    pub bayes_auc: f64,
}

/// Number of samples per class for the unequal-covariance sweep.
const ORACLE_SAMPLES_PER_CLASS: usize = 500_000;

/// Bayes-optimal EER/AUC for the configured score distributions.
///
/// Equal covariances give the closed form `EER = Φ(-d'/2)`,
/// `AUC = Φ(d'/√2)` with `d'` the Mahalanobis distance between the means;
/// otherwise the log-likelihood ratio is swept over 10⁶ seeded samples.
pub fn bayes_oracle(config: &GeneratorConfig) -> Result<BayesBound> {
    let m = &config.score_model;
    let l0 = cholesky3(&m.correct_cov)?;
    let l1 = cholesky3(&m.incorrect_cov)?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    if m.correct_cov == m.incorrect_cov {
        let delta = [
            m.incorrect_mean[0] - m.correct_mean[0],
            m.incorrect_mean[1] - m.correct_mean[1],
            m.incorrect_mean[2] - m.correct_mean[2],
        ];
        let w = cholesky_solve(&l0, delta);
        let d2: f64 = delta.iter().zip(&w).map(|(a, b)| a * b).sum();
        let d = d2.max(0.0).sqrt();
        return Ok(BayesBound {
            bayes_eer: std_normal.cdf(-d / 2.0),
            bayes_auc: std_normal.cdf(d / std::f64::consts::SQRT_2),
        });
    }

    let log_det = |l: &[[f64; 3]; 3]| 2.0 * (0..3).map(|i| l[i][i].ln()).sum::<f64>();
    let (ld0, ld1) = (log_det(&l0), log_det(&l1));
    let quad = |l: &[[f64; 3]; 3], mean: [f64; 3], x: [f64; 3]| {
        let d = [x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]];
        let s = cholesky_solve(l, d);
        d.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
    };
    let llr = |x: [f64; 3]| {
        -0.5 * (quad(&l1, m.incorrect_mean, x) + ld1) + 0.5 * (quad(&l0, m.correct_mean, x) + ld0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0bac_1e);
    let mut scores = Vec::with_capacity(2 * ORACLE_SAMPLES_PER_CLASS);
    let mut labels = Vec::with_capacity(2 * ORACLE_SAMPLES_PER_CLASS);
    for (label, l, mean) in [(0u8, &l0, m.correct_mean), (1u8, &l1, m.incorrect_mean)] {
        for _ in 0..ORACLE_SAMPLES_PER_CLASS {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let mut x = mean;
            for i in 0..3 {
                for k in 0..=i {
                    x[i] += l[i][k] * z[k];
                }
            }
            scores.push(llr(x));
            labels.push(label);
        }
    }
    let data = ScoredLabelSet::new(scores, labels)?;
    let roc = metrics::roc_curve(&data)?;
    Ok(BayesBound {
        bayes_eer: metrics::eer_from_roc(&roc).eer,
        bayes_auc: metrics::auc_from_roc(&roc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{align, dataset_stats};

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_utterances: n,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn combine_examples() {
        assert!((combine_scores(-1.0, -2.0, -0.5, 0.3, 0.3) - (-1.85)).abs() < 1e-12);
        assert_eq!(combine_scores(-1.0, -2.0, -0.5, 1.0, 0.0), -1.0);
        assert_eq!(combine_scores(-1.0, -2.0, -0.5, 0.0, 0.0), -2.0);
    }

    #[test]
    fn noiseless_channel_copies_references() {
        let cfg = GeneratorConfig {
            sub_rate: 0.0,
            ins_rate: 0.0,
            del_rate: 0.0,
            ..small(50)
        };
        for u in generate(&cfg).unwrap() {
            assert_eq!(u.reference, u.hypothesis);
            assert!(u.labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn substitution_rate_is_recovered() {
        let cfg = GeneratorConfig {
            sub_rate: 0.05,
            ins_rate: 0.0,
            del_rate: 0.0,
            ..small(5200)
        };
        let data = generate(&cfg).unwrap();
        let stats = dataset_stats(data.iter().map(|u| u.labels.as_slice())).unwrap();
        assert!(stats.tokens >= 100_000, "{}", stats.tokens);
        assert!((stats.incorrect_token_rate - 0.05).abs() <= 0.005, "{stats:?}");
    }

    #[test]
    fn seeds_determine_the_corpus() {
        let a = generate(&small(30)).unwrap();
        let b = generate(&small(30)).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 2, ..small(30) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn utterances_are_shardable() {
        let g = Generator::new(&small(10)).unwrap();
        let all = g.utterances(7, 0..10, "u");
        let mut parts = g.utterances(7, 0..4, "u");
        parts.extend(g.utterances(7, 4..10, "u"));
        assert_eq!(all, parts);
    }

    #[test]
    fn score_bookkeeping_is_consistent() {
        let cfg = small(40);
        for u in generate(&cfg).unwrap() {
            let mut run = [0.0; AUX_DIM];
            for (a, c) in u.aux.iter().zip(&u.cumulative) {
                for k in 0..AUX_DIM {
                    run[k] += a[k];
                    assert!((run[k] - c[k]).abs() < 1e-12);
                }
                let w = combine_scores(a[0], a[1], a[2], cfg.lambda, cfg.gamma);
                assert!((a[3] - w).abs() < 1e-12);
            }
            assert_eq!(u.aux.len(), u.hypothesis.len());
            assert_eq!(u.labels.len(), u.hypothesis.len());
            assert!(!u.hypothesis.is_empty());
        }
    }

    #[test]
    fn channel_truth_agrees_with_alignment_counts() {
        for u in generate(&small(200)).unwrap() {
            let a = align(&u.reference, &u.hypothesis);
            let truth_errors = u.labels.iter().filter(|&&l| l == 1).count();
            let kept = u.labels.len() - truth_errors;
            // The channel's own edit script costs S + I + D <= errors + (n_ref - kept).
            assert!(a.edit_distance <= truth_errors + u.reference.len() - kept);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GeneratorConfig { seq_len_range: (0, 0), ..small(1) },
            GeneratorConfig { seq_len_range: (5, 3), ..small(1) },
            GeneratorConfig { n_utterances: 0, ..small(1) },
            GeneratorConfig { sub_rate: 0.6, del_rate: 0.5, ..small(1) },
            GeneratorConfig { vocab_size: 1, ..small(1) },
            GeneratorConfig { lambda: 1.5, ..small(1) },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
        let mut singular = small(1);
        singular.score_model.correct_cov = [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        singular.score_model.incorrect_cov = singular.score_model.correct_cov;
        assert!(bayes_oracle(&singular).is_err());
    }

    #[test]
    fn oracle_limits() {
        let mut cfg = small(1);
        cfg.score_model.incorrect_mean = cfg.score_model.correct_mean;
        let b = bayes_oracle(&cfg).unwrap();
        assert!((b.bayes_eer - 0.5).abs() < 1e-12 && (b.bayes_auc - 0.5).abs() < 1e-12);

        cfg.score_model.incorrect_mean = [1e3, 1e3, 1e3];
        let b = bayes_oracle(&cfg).unwrap();
        assert!(b.bayes_eer < 1e-12 && (b.bayes_auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_oracle_is_phi_of_minus_one() {
        // Oracle: Φ(-1) by trapezoidal quadrature of the normal density.
        let n = 200_000;
        let (a, b) = (-12.0f64, -1.0f64);
        let h = (b - a) / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let phi: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * pdf(a + i as f64 * h)
            })
            .sum::<f64>()
            * h;
        assert!((phi - 0.158_655).abs() < 1e-6);
        let bound = bayes_oracle(&GeneratorConfig::default()).unwrap();
        assert!((bound.bayes_eer - phi).abs() < 1e-9, "{bound:?}");
    }

    #[test]
    fn unequal_covariance_sweep_agrees_with_closed_form_limit() {
        // Nearly equal covariances: the sampled sweep must land close to the
        // closed form of the equal case.
        let mut cfg = GeneratorConfig::default();
        cfg.score_model.incorrect_cov[2][2] = 1.0 + 1e-9;
        let sampled = bayes_oracle(&cfg).unwrap();
        let exact = bayes_oracle(&GeneratorConfig::default()).unwrap();
        assert!((sampled.bayes_eer - exact.bayes_eer).abs() < 3e-3, "{sampled:?} {exact:?}");
        assert!((sampled.bayes_auc - exact.bayes_auc).abs() < 3e-3);
    }
}
