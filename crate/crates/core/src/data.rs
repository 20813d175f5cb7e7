//! Dataset files: JSON Lines records, plain-text transcripts, vocabulary and
//! the corpus manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labeling::{align, dataset_stats, DatasetStats};
use crate::loss::ClassCounts;
use crate::model::SequenceView;
use crate::synth::{self, Generator, GeneratorConfig, ScoredHypothesis, AUX_DIM};

/// One hypothesis per line of a `.jsonl` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub utt_id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<Vec<[f64; AUX_DIM]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if let Some(aux) = &self.aux {
            if aux.len() != n {
                return Err(Error::Data(format!("{}: {} tokens but {} aux rows", self.utt_id, n, aux.len())));
            }
            if aux.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("{}: non-finite aux score", self.utt_id)));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Data(format!("{}: {} tokens but {} labels", self.utt_id, n, labels.len())));
            }
            if let Some(l) = labels.iter().find(|&&l| l > 1) {
                return Err(Error::Data(format!("{}: label {l} is not 0 or 1", self.utt_id)));
            }
        }
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.validate()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `utt_id tok tok ...` lines.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        if !seen.insert(id.to_string()) {
            return Err(Error::Data(format!("{}:{}: duplicate utterance id {id}", path.display(), i + 1)));
        }
        out.push((id.to_string(), parts.map(str::to_string).collect()));
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, rows: &[(String, Vec<String>)]) -> Result<()> {
    let mut s = String::new();
    for (id, toks) in rows {
        s.push_str(id);
        for t in toks {
            s.push(' ');
            s.push_str(t);
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Labels hypotheses against references matched by utterance id. The output
/// follows the hypothesis order.
pub fn align_transcripts(
    references: &[(String, Vec<String>)],
    hypotheses: &[(String, Vec<String>)],
) -> Result<Vec<DatasetRecord>> {
    let refs: HashMap<&str, &Vec<String>> = references.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let hyp_ids: BTreeSet<&str> = hypotheses.iter().map(|(id, _)| id.as_str()).collect();
    let mut mismatches: Vec<String> = hypotheses
        .iter()
        .filter(|(id, _)| !refs.contains_key(id.as_str()))
        .map(|(id, _)| format!("{id} (no reference)"))
        .collect();
    mismatches.extend(
        references
            .iter()
            .filter(|(id, _)| !hyp_ids.contains(id.as_str()))
            .map(|(id, _)| format!("{id} (no hypothesis)")),
    );
    if !mismatches.is_empty() {
        let total = mismatches.len();
        mismatches.truncate(10);
        return Err(Error::Data(format!(
            "{total} utterance ids do not pair up: {}",
            mismatches.join(", ")
        )));
    }
    Ok(hypotheses
        .iter()
        .map(|(id, hyp)| {
            let a = align(refs[id.as_str()], hyp);
            DatasetRecord {
                utt_id: id.clone(),
                tokens: hyp.clone(),
                aux: None,
                labels: Some(a.labels),
            }
        })
        .collect())
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token strings to ids; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = vec![UNKNOWN_TOKEN.to_string()];
        let mut seen = BTreeSet::new();
        for t in tokens {
            if t != UNKNOWN_TOKEN && seen.insert(t.clone()) {
                v.push(t);
            }
        }
        Self { tokens: v }
    }

    /// Sorted distinct tokens of `records`.
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let set: BTreeSet<&String> = records.iter().flat_map(|r| &r.tokens).collect();
        Self::new(set.into_iter().cloned())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect()
    }
}

/// Encoded hypothesis ready for a labeler.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub utt_id: String,
    pub ids: Vec<usize>,
    pub aux: Vec<[f64; AUX_DIM]>,
    pub labels: Vec<u8>,
}

impl Sequence {
    pub fn view(&self) -> SequenceView<'_> {
        SequenceView {
            ids: &self.ids,
            aux: &self.aux,
        }
    }
}

/// Encodes records with `vocab`. Records without aux scores are rejected
/// when `need_aux` is set and get zero scores otherwise; records without
/// labels are rejected when `need_labels` is set.
pub fn encode(records: &[DatasetRecord], vocab: &Vocabulary, need_aux: bool, need_labels: bool) -> Result<Vec<Sequence>> {
    let index = vocab.index();
    records
        .iter()
        .map(|r| {
            if r.tokens.is_empty() {
                return Err(Error::Data(format!("{}: hypothesis has no tokens", r.utt_id)));
            }
            let aux = match &r.aux {
                Some(a) => a.clone(),
                None if need_aux => return Err(Error::Data(format!("{}: record has no aux scores", r.utt_id))),
                None => vec![[0.0; AUX_DIM]; r.tokens.len()],
            };
            let labels = match &r.labels {
                Some(l) => l.clone(),
                None if need_labels => return Err(Error::Data(format!("{}: record has no labels", r.utt_id))),
                None => Vec::new(),
            };
            Ok(Sequence {
                utt_id: r.utt_id.clone(),
                ids: r.tokens.iter().map(|t| index.get(t.as_str()).copied().unwrap_or(0)).collect(),
                aux,
                labels,
            })
        })
        .collect()
}

pub fn class_counts(seqs: &[Sequence]) -> Result<ClassCounts> {
    Ok(dataset_stats(seqs.iter().map(|s| s.labels.as_slice()))?.class_counts)
}

/// Utterance counts of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 5000,
            valid: 1000,
            eval: 10000,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    #[serde(flatten)]
    pub stats: DatasetStats,
    pub token_error_rate: f64,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// SHA-256 of the canonical JSON of `generator`.
    pub generator_hash: String,
    pub lambda: f64,
    pub gamma: f64,
    pub vocab: Vocabulary,
    pub generator: GeneratorConfig,
    pub splits: BTreeMap<String, SplitSummary>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Generated train/valid/eval splits with their manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub splits: BTreeMap<String, Vec<ScoredHypothesis>>,
}

pub fn to_record(h: &ScoredHypothesis) -> DatasetRecord {
    DatasetRecord {
        utt_id: h.utt_id.clone(),
        tokens: h.hypothesis.iter().map(|&t| synth::token_name(t)).collect(),
        aux: Some(h.aux.clone()),
        labels: Some(h.labels.clone()),
    }
}

/// Generates the three splits from one chain; each split has its own
/// derived utterance stream. `config.n_utterances` is ignored.
pub fn generate_corpus(config: &GeneratorConfig, sizes: SplitSizes) -> Result<Corpus> {
    if sizes.train == 0 || sizes.valid == 0 || sizes.eval == 0 {
        return Err(Error::Config(format!("every split needs at least one utterance, got {sizes:?}")));
    }
    let g = Generator::new(config)?;
    let mut splits = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for (k, (name, n)) in SPLITS.iter().zip([sizes.train, sizes.valid, sizes.eval]).enumerate() {
        let utts = g.utterances(synth::derive_seed(config.seed, k as u64 + 1), 0..n, &format!("{name}-"));
        let stats = dataset_stats(utts.iter().map(|u| u.labels.as_slice()))?;
        let alignments: Vec<_> = utts.iter().map(|u| align(&u.reference, &u.hypothesis)).collect();
        let ter = crate::labeling::token_error_rate(alignments.iter().zip(utts.iter().map(|u| u.reference.len())))?;
        summaries.insert(
            name.to_string(),
            SplitSummary {
                file: format!("{name}.jsonl"),
                stats,
                token_error_rate: ter,
            },
        );
        splits.insert(name.to_string(), utts);
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        generator_hash: sha256_hex(serde_json::to_string(config)?.as_bytes()),
        lambda: config.lambda,
        gamma: config.gamma,
        vocab: Vocabulary::new((0..config.vocab_size).map(synth::token_name)),
        generator: config.clone(),
        splits: summaries,
    };
    Ok(Corpus { manifest, splits })
}

/// Writes `{split}.jsonl`, `{split}.ref.txt`, `{split}.hyp.txt` and
/// `manifest.json` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, utts) in &corpus.splits {
        let records: Vec<_> = utts.iter().map(to_record).collect();
        write_jsonl(&dir.join(format!("{name}.jsonl")), &records)?;
        let names = |ids: &[usize]| ids.iter().map(|&t| synth::token_name(t)).collect::<Vec<_>>();
        let refs: Vec<_> = utts.iter().map(|u| (u.utt_id.clone(), names(&u.reference))).collect();
        let hyps: Vec<_> = utts.iter().map(|u| (u.utt_id.clone(), names(&u.hypothesis))).collect();
        write_transcripts(&dir.join(format!("{name}.ref.txt")), &refs)?;
        write_transcripts(&dir.join(format!("{name}.hyp.txt")), &hyps)?;
    }
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&corpus.manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: manifest version {} is not supported",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}
