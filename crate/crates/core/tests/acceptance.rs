//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Run with `cargo test -p tokconf-core --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokconf_core::checkpoint::Checkpoint;
use tokconf_core::data::{encode, generate_corpus, to_record, write_corpus, Corpus, Sequence, SplitSizes, Vocabulary};
use tokconf_core::labeling::align;
use tokconf_core::loss::{cb_weights, ClassCounts, ClassWeights};
use tokconf_core::metrics::{auc, eer, evaluate, nce, MetricsReport, ScoredLabelSet};
use tokconf_core::model::{AuxFeature, Family, Labeler, LabelerConfig};
use tokconf_core::nn::{AttentionEncoder, BiLstm, Bound, Embedding, Linear, LstmCell, ParamStore};
use tokconf_core::synth::{bayes_oracle, GeneratorConfig};
use tokconf_core::trainer::{batch_loss, score_tokens, train, TrainConfig};
use tokconf_core::{finite_diff_check, Tape, Tensor, Var};

type Verdict = Result<String, String>;

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: &str, title: &str, v: Verdict| {
        match v {
            Ok(detail) => println!("PASS {id} {title}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {title}: {detail}");
            }
        }
    };
    report("C1", "gradient integrity", gradients());
    report("C2", "class-balanced weights", class_weights());
    report("C3", "metric oracles", metric_oracles());
    report("C4", "alignment oracle", alignment_oracle());
    let (bayes_gap, trend) = training();
    report("C5", "Bayes-gap training", bayes_gap);
    report("C6", "trend reproduction", trend);
    report("C7", "determinism", determinism());
    report("C8", "parameter counts", parameter_counts());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

fn weighted_sum(tape: &mut Tape, v: Var) -> tokconf_core::Result<Var> {
    let (m, n) = tape.value(v).dims2();
    let picks = (0..m)
        .flat_map(|r| (0..n).map(move |c| (r, c, 0.3 + ((r * 7 + c * 3) % 5) as f64 * 0.15)))
        .collect();
    tape.weighted_pick(v, picks)
}

/// Max relative error of a layer over its parameters and input `x`.
fn check_layer(
    store: &ParamStore,
    x: Tensor,
    build: impl Fn(&mut Tape, &Bound, Var) -> tokconf_core::Result<Var>,
) -> tokconf_core::Result<f64> {
    let mut params = store.tensors().to_vec();
    params.push(x);
    let n = store.len();
    finite_diff_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars[..n].to_vec());
            let out = build(tape, &bound, vars[n])?;
            weighted_sum(tape, out)
        },
        &params,
        1e-5,
    )
}

fn tiny_sequences(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Sequence> {
    [3usize, 5, 2]
        .iter()
        .enumerate()
        .map(|(i, &len)| Sequence {
            utt_id: format!("u{i}"),
            ids: (0..len).map(|_| rng.random_range(0..vocab)).collect(),
            aux: (0..len)
                .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..0.0)))
                .collect(),
            labels: (0..len).map(|t| u8::from((t + i) % 3 == 0)).collect(),
        })
        .collect()
}

fn model_error(family: Family, seed: u64, rng: &mut ChaCha8Rng) -> tokconf_core::Result<f64> {
    let cfg = LabelerConfig {
        family,
        vocab_size: 5,
        embed_dim: 4,
        lstm_layers: 2,
        mlp_layers: 3,
        mlp_width: 6,
        transformer_layers: 1,
        heads: 2,
        ..LabelerConfig::default()
    };
    let mut model = Labeler::build(&cfg, seed)?;
    // Move norm gains and offsets off their 1/0 start.
    let names = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if name.ends_with("gain") || name.ends_with("offset") {
            let v = (0..t.len()).map(|_| rng.random_range(0.5..1.5)).collect();
            *t = Tensor::new(t.shape().to_vec(), v)?;
        }
    }
    let seqs = tiny_sequences(rng, 5);
    let batch: Vec<&Sequence> = seqs.iter().collect();
    let weights = ClassWeights { w0: 0.8, w1: 1.2 };
    finite_diff_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            Ok(batch_loss(&model, tape, &bound, &batch, weights)?.total)
        },
        model.params().tensors(),
        1e-5,
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(entry) => entry.1 = entry.1.max(err),
        None => worst.push((name, err)),
    };
    let run = |note: &mut dyn FnMut(&'static str, f64)| -> tokconf_core::Result<()> {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);

            let mut store = ParamStore::new();
            let emb = Embedding::new(&mut store, "e", 4, 3, &mut rng);
            note("embedding", check_layer(&store, Tensor::zeros(vec![1, 1]), |t, p, _| emb.forward(t, p, &[3, 0, 3]))?);

            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
            note("linear", check_layer(&store, random(&mut rng, 4, 3), |t, p, x| lin.forward(t, p, x))?);

            let mut store = ParamStore::new();
            let cell = LstmCell::new(&mut store, "c", 3, 2, &mut rng);
            let (h0, c0) = (random(&mut rng, 2, 2), random(&mut rng, 2, 2));
            note(
                "lstm cell",
                check_layer(&store, random(&mut rng, 2, 3), |t, p, x| {
                    let h = t.constant(h0.clone());
                    let c = t.constant(c0.clone());
                    let (h, c) = cell.step(t, p, x, h, c)?;
                    t.concat_cols(&[h, c])
                })?,
            );

            let mut store = ParamStore::new();
            let bi = BiLstm::new(&mut store, "b", 3, 2, &mut rng);
            note("blstm", check_layer(&store, random(&mut rng, 6, 3), |t, p, x| bi.forward_batch(t, p, x, 2, &[3, 2]))?);

            let mut store = ParamStore::new();
            let enc = AttentionEncoder::new(&mut store, "a", 1, 4, 2, &mut rng)?;
            let names = store.names().to_vec();
            for (name, t) in names.iter().zip(store.tensors_mut()) {
                if name.ends_with("gain") || name.ends_with("offset") {
                    let v = (0..t.len()).map(|_| rng.random_range(0.5..1.5)).collect();
                    *t = Tensor::new(t.shape().to_vec(), v)?;
                }
            }
            let masks = vec![vec![true, true, false], vec![true, true, true]];
            note("attention", check_layer(&store, random(&mut rng, 6, 4), |t, p, x| enc.forward(t, p, x, &masks))?);

            note("blstm + loss", model_error(Family::Blstm, seed, &mut rng)?);
            note("mlp + loss", model_error(Family::Mlp, seed, &mut rng)?);
            note("transformer + loss", model_error(Family::Transformer, seed, &mut rng)?);
        }
        Ok(())
    };
    run(&mut note).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = format!(
        "20 seeds, max rel err {max:.2e} ({}), {secs:.1}s",
        worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ")
    );
    if max < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn class_weights() -> Verdict {
    let counts = ClassCounts {
        n_correct: 5_503_696,
        n_incorrect: 297_298,
    };
    let w = cb_weights(0.99999, counts).map_err(|e| e.to_string())?;
    let unit = cb_weights(0.0, counts).map_err(|e| e.to_string())?;
    let detail = format!("beta 0.99999 -> ({:.4}, {:.4}); beta 0 -> ({}, {})", w.w0, w.w1, unit.w0, unit.w1);
    if (w.w0 - 0.97).abs() <= 0.01 && (w.w1 - 1.03).abs() <= 0.01 && unit == ClassWeights::UNIT {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Probability that an incorrect token outscores a correct one, ties counted half.
fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Evaluates FAR and FRR at every candidate threshold by direct counting and
/// interpolates across the first sign change of FAR - FRR.
fn sweep_eer(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(thresholds[thresholds.len() - 1] + 1.0);
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rates = |t: f64| {
        let far = scores.iter().zip(labels).filter(|(&s, &l)| l == 0 && s >= t).count() as f64 / neg;
        let frr = scores.iter().zip(labels).filter(|(&s, &l)| l == 1 && s < t).count() as f64 / pos;
        (far, frr)
    };
    let pts: Vec<(f64, f64)> = thresholds.iter().map(|&t| rates(t)).collect();
    for w in pts.windows(2) {
        let (da, db) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if da == 0.0 {
            return w[0].0;
        }
        if da > 0.0 && db <= 0.0 {
            return w[0].0 + da / (da - db) * (w[1].0 - w[0].0);
        }
    }
    pts[pts.len() - 1].0
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut auc_err, mut eer_err) = (0.0f64, 0.0f64);
    let mut sets = 0;
    while sets < 1000 {
        let coarse = sets % 2 == 0;
        let labels: Vec<u8> = (0..50).map(|_| u8::from(rng.random_bool(0.3))).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s: f64 = (rng.random::<f64>() + 0.3 * f64::from(l)).min(1.0);
                // Every other set is rounded so that ties are common.
                if coarse {
                    (s * 10.0).round() / 10.0
                } else {
                    s
                }
            })
            .collect();
        let data = ScoredLabelSet::new(scores.clone(), labels.clone()).map_err(|e| e.to_string())?;
        auc_err = auc_err.max((auc(&data).unwrap() - pair_auc(&scores, &labels)).abs());
        eer_err = eer_err.max((eer(&data).unwrap().eer - sweep_eer(&scores, &labels)).abs());
        sets += 1;
    }
    let mut nce_err = 0.0f64;
    for (neg, pos) in [(95usize, 5usize), (50, 50), (7, 993), (1, 1)] {
        let prior = neg as f64 / (neg + pos) as f64;
        let labels: Vec<u8> = std::iter::repeat_n(0, neg).chain(std::iter::repeat_n(1, pos)).collect();
        let data = ScoredLabelSet::new(vec![1.0 - prior; neg + pos], labels).map_err(|e| e.to_string())?;
        nce_err = nce_err.max(nce(&data).unwrap().abs());
    }
    let detail = format!("1000 sets: AUC err {auc_err:.1e}, EER err {eer_err:.1e}; |NCE at prior| {nce_err:.1e}");
    if auc_err <= 1e-12 && eer_err <= 1e-9 && nce_err <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Op {
    Match,
    Sub,
    Del,
    Ins,
}

/// Searches every alignment path backwards from the end. Moves are tried in
/// the order match, substitution, deletion, insertion, and an incumbent is
/// replaced only by a strictly cheaper path, so among optimal paths the one
/// that prefers earlier moves closest to the end wins.
fn enumerate_best(r: &[u8], h: &[u8]) -> (usize, Vec<Op>) {
    fn go(r: &[u8], h: &[u8], i: usize, j: usize, cost: usize, path: &mut Vec<Op>, best: &mut (usize, Vec<Op>)) {
        if cost + i.abs_diff(j) >= best.0 {
            return;
        }
        if i == 0 && j == 0 {
            *best = (cost, path.clone());
            return;
        }
        let mut step = |op: Op, ni: usize, nj: usize, c: usize, path: &mut Vec<Op>| {
            path.push(op);
            go(r, h, ni, nj, cost + c, path, best);
            path.pop();
        };
        if i > 0 && j > 0 {
            if r[i - 1] == h[j - 1] {
                step(Op::Match, i - 1, j - 1, 0, path);
            } else {
                step(Op::Sub, i - 1, j - 1, 1, path);
            }
        }
        if i > 0 {
            step(Op::Del, i - 1, j, 1, path);
        }
        if j > 0 {
            step(Op::Ins, i, j - 1, 1, path);
        }
    }
    let mut best = (usize::MAX, Vec::new());
    go(r, h, r.len(), h.len(), 0, &mut Vec::new(), &mut best);
    best
}

fn all_strings(max_len: usize, symbols: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..symbols).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn alignment_oracle() -> Verdict {
    let strings = all_strings(6, 3);
    let mut pairs = 0usize;
    for r in &strings {
        for h in &strings {
            let (cost, path) = enumerate_best(r, h);
            let mut labels = Vec::new();
            let mut counts = [0usize; 4];
            for op in path.iter().rev() {
                counts[*op as usize] += 1;
                match op {
                    Op::Match => labels.push(0),
                    Op::Sub | Op::Ins => labels.push(1),
                    Op::Del => {}
                }
            }
            let got = align(r, h);
            let want = [got.counts.matches, got.counts.substitutions, got.counts.deletions, got.counts.insertions];
            if got.edit_distance != cost || got.labels != labels || want != counts {
                return Err(format!("mismatch for ref {r:?} hyp {h:?}: got {got:?}, enumeration cost {cost} path {path:?}"));
            }
            pairs += 1;
        }
    }

    let mut worst = String::new();
    let mut checked = 0;
    for seed in 1..=4u64 {
        let cfg = GeneratorConfig {
            seed,
            sub_rate: 0.02 * seed as f64,
            ins_rate: 0.005 * seed as f64,
            del_rate: 0.01 * seed as f64,
            ..GeneratorConfig::default()
        };
        let corpus = generate_corpus(&cfg, SplitSizes { train: 400, valid: 100, eval: 200 }).map_err(|e| e.to_string())?;
        for (name, s) in &corpus.manifest.splits {
            let rate = s.stats.incorrect_token_rate;
            if rate > s.token_error_rate {
                return Err(format!("seed {seed} split {name}: incorrect rate {rate} above TER {}", s.token_error_rate));
            }
            worst = format!("last split incorrect {rate:.4} <= TER {:.4}", s.token_error_rate);
            checked += 1;
        }
    }
    Ok(format!("{pairs} pairs agree with enumeration; {checked} generated splits satisfy incorrect rate <= TER ({worst})"))
}

struct Run {
    name: &'static str,
    report: MetricsReport,
    epoch: usize,
    secs: f64,
}

fn train_one(
    name: &'static str,
    family: Family,
    aux_features: Vec<AuxFeature>,
    vocab: &Vocabulary,
    splits: &[Vec<Sequence>; 3],
) -> tokconf_core::Result<Run> {
    let start = Instant::now();
    let cfg = LabelerConfig {
        family,
        vocab_size: vocab.len(),
        embed_dim: 16,
        aux_features,
        ..LabelerConfig::default()
    };
    let model = Labeler::build(&cfg, 0)?;
    let out = train(model, vocab, &splits[0], &splits[1], &TrainConfig::default(), |_| {})?;
    let report = evaluate(&score_tokens(&out.best.labeler()?, &splits[2])?, false)?;
    Ok(Run {
        name,
        report,
        epoch: out.best.meta.epoch,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn encode_splits(corpus: &Corpus) -> tokconf_core::Result<[Vec<Sequence>; 3]> {
    let enc = |name: &str| {
        let records: Vec<_> = corpus.splits[name].iter().map(to_record).collect();
        encode(&records, &corpus.manifest.vocab, true, true)
    };
    Ok([enc("train")?, enc("valid")?, enc("eval")?])
}

fn training() -> (Verdict, Verdict) {
    match training_runs() {
        Ok(v) => v,
        Err(e) => (Err(e.to_string()), Err("not run".into())),
    }
}

fn training_runs() -> tokconf_core::Result<(Verdict, Verdict)> {
    use AuxFeature::*;
    let gen = GeneratorConfig::default();
    let bayes = bayes_oracle(&gen)?.bayes_eer;
    let corpus = generate_corpus(&gen, SplitSizes::default())?;
    let splits = encode_splits(&corpus)?;
    let vocab = &corpus.manifest.vocab;
    let train_tokens: usize = splits[0].iter().map(|s| s.ids.len()).sum();

    let all = train_one("all", Family::Blstm, AuxFeature::ALL.to_vec(), vocab, &splits)?;
    let detail = format!(
        "{train_tokens} train tokens, eval EER {:.4} (best epoch {}) vs Bayes {bayes:.4} + 0.03, {:.0}s",
        all.report.eer, all.epoch, all.secs
    );
    let c5 = if all.report.eer <= bayes + 0.03 && all.secs < 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    };

    let mut runs = vec![all];
    for (name, feats) in [
        ("embeds", vec![]),
        ("ctc", vec![Ctc]),
        ("att", vec![Att]),
        ("lm", vec![Lm]),
        ("wsum", vec![Wsum]),
    ] {
        runs.push(train_one(name, Family::Blstm, feats, vocab, &splits)?);
    }
    runs.push(train_one("mlp", Family::Mlp, AuxFeature::ALL.to_vec(), vocab, &splits)?);
    runs.push(train_one("transformer", Family::Transformer, AuxFeature::ALL.to_vec(), vocab, &splits)?);
    for r in &runs {
        println!(
            "     {:<12} EER {:.4}  AUC {:.4}  NCE {:+.4}  best epoch {:>2}  {:.0}s",
            r.name, r.report.eer, r.report.auc, r.report.nce, r.epoch, r.secs
        );
    }
    let eer = |name: &str| runs.iter().find(|r| r.name == name).map(|r| r.report.eer).unwrap();
    let singles = ["ctc", "att", "lm", "wsum"];
    let mut broken = Vec::new();
    for s in singles {
        if eer("embeds") <= eer(s) {
            broken.push(format!("embeds-only {:.4} <= {s} {:.4}", eer("embeds"), eer(s)));
        }
        if eer(s) < eer("all") {
            broken.push(format!("{s} {:.4} < all {:.4}", eer(s), eer("all")));
        }
    }
    if eer("all") >= eer("mlp") {
        broken.push(format!("BLSTM {:.4} >= MLP {:.4}", eer("all"), eer("mlp")));
    }
    let c6 = if broken.is_empty() {
        Ok(format!(
            "embeds {:.4} > singles [{}] >= all {:.4}; BLSTM {:.4} < MLP {:.4}; transformer {:.4} (reported only)",
            eer("embeds"),
            singles.map(|s| format!("{:.4}", eer(s))).join(", "),
            eer("all"),
            eer("all"),
            eer("mlp"),
            eer("transformer")
        ))
    } else {
        Err(broken.join("; "))
    };
    Ok((c5, c6))
}

/// Generates, trains and evaluates a small configuration; returns every
/// artifact's bytes.
fn pipeline_bytes(dir: &std::path::Path) -> tokconf_core::Result<Vec<(String, Vec<u8>)>> {
    let gen = GeneratorConfig {
        seed: 5,
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus(&gen, SplitSizes { train: 120, valid: 30, eval: 60 })?;
    write_corpus(&corpus, dir)?;
    let splits = encode_splits(&corpus)?;
    let cfg = LabelerConfig {
        vocab_size: corpus.manifest.vocab.len(),
        embed_dim: 8,
        ..LabelerConfig::default()
    };
    let tc = TrainConfig {
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(Labeler::build(&cfg, 3)?, &corpus.manifest.vocab, &splits[0], &splits[1], &tc, |_| {})?;
    out.best.save(&dir.join("model.ckpt"))?;
    let reloaded = Checkpoint::load(&dir.join("model.ckpt"))?;
    let report = evaluate(&score_tokens(&reloaded.labeler()?, &splits[2])?, true)?;
    std::fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(&report)?).map_err(|e| tokconf_core::Error::io(dir, e))?;

    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| tokconf_core::Error::io(dir, e))?
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect())
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_bytes(a.path()).map_err(|e| e.to_string())?;
    let second = pipeline_bytes(b.path()).map_err(|e| e.to_string())?;
    let names: Vec<_> = first.iter().map(|f| f.0.as_str()).collect();
    if first.len() != second.len() {
        return Err(format!("runs wrote different file sets: {names:?}"));
    }
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs: {}", first.len(), names.join(" ")))
}

fn parameter_counts() -> Verdict {
    let targets = [(8, 0.03), (16, 0.06), (32, 0.14), (64, 0.36), (128, 1.05), (256, 3.42)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (dim, millions) in targets {
        let cfg = LabelerConfig {
            vocab_size: 3052,
            embed_dim: dim,
            ..LabelerConfig::default()
        };
        let n = Labeler::build(&cfg, 0).map_err(|e| e.to_string())?.num_params() as f64 / 1e6;
        let rel = (n - millions).abs() / millions;
        ok &= rel <= 0.10;
        parts.push(format!("{dim}: {n:.3}M vs {millions}M ({:+.1}%)", 100.0 * (n - millions) / millions));
    }
    if ok {
        Ok(parts.join(", "))
    } else {
        Err(parts.join(", "))
    }
}
