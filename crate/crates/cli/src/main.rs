use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tokconf_core::checkpoint::Checkpoint;
use tokconf_core::config::RunConfig;
use tokconf_core::data::{self, DatasetRecord, Vocabulary};
use tokconf_core::labeling::dataset_stats;
use tokconf_core::metrics::{self, MetricsReport, ScoredLabelSet};
use tokconf_core::model::{detect, AuxFeature, Family, Labeler};
use tokconf_core::trainer::{self, TrainFailure};
use tokconf_core::Error;

#[derive(Parser)]
#[command(name = "tokconf", version, about = "Token-level confidence estimation for recognizer hypotheses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/valid/eval splits and manifest).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label hypothesis tokens by aligning them to references.
    Align {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a labeler on DIR/train.jsonl, selecting on DIR/valid.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print EER/AUC/NCE of a checkpoint on a labelled JSONL file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the ROC curve here.
        #[arg(long)]
        roc: Option<PathBuf>,
        /// Row label used by `report`; defaults to the checkpoint file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Flag tokens whose P(incorrect) reaches a threshold.
    Detect(DetectArgs),
    /// Compare evaluation outputs in one table, best EER first.
    Report {
        #[arg(required = true)]
        evals: Vec<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "at_eer", required_unless_present = "at_eer")]
    threshold: Option<f64>,
    /// Use the EER threshold measured on the (labelled) input.
    #[arg(long)]
    at_eer: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print every setting with its default value.
    DumpDefaults,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalOutput {
    name: String,
    family: Family,
    embed_dim: usize,
    aux_features: Vec<AuxFeature>,
    params: usize,
    tokens: usize,
    #[serde(flatten)]
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct DetectRecord<'a> {
    utt_id: &'a str,
    tokens: &'a [String],
    scores: Vec<f64>,
    flags: Vec<bool>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                e if e.is_numeric() => 4,
                _ => 3,
            };
        }
        if let Some(f) = cause.downcast_ref::<TrainFailure>() {
            return if f.source.is_numeric() { 4 } else if matches!(f.source, Error::Config(_)) { 2 } else { 3 };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Command::Align { reference, hyp, out } => cmd_align(&reference, &hyp, &out),
        Command::Train {
            config,
            data,
            out,
            log,
            seed,
        } => cmd_train(config.as_deref(), &data, &out, log.as_deref(), seed),
        Command::Eval {
            checkpoint,
            data,
            roc,
            name,
        } => cmd_eval(&checkpoint, &data, roc.as_deref(), name),
        Command::Detect(args) => cmd_detect(&args),
        Command::Report { evals } => cmd_report(&evals),
        Command::Config {
            action: ConfigAction::DumpDefaults,
        } => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.generator.seed = s;
    }
    let corpus = data::generate_corpus(&cfg.generator, cfg.splits)?;
    data::write_corpus(&corpus, out)?;
    for (name, s) in &corpus.manifest.splits {
        eprintln!(
            "{name}: {} utterances, {} tokens, incorrect rate {:.4}, token error rate {:.4}",
            s.stats.utterances, s.stats.tokens, s.stats.incorrect_token_rate, s.token_error_rate
        );
    }
    Ok(())
}

fn cmd_align(reference: &Path, hyp: &Path, out: &Path) -> anyhow::Result<()> {
    let refs = data::read_transcripts(reference)?;
    let hyps = data::read_transcripts(hyp)?;
    if hyps.is_empty() {
        eprintln!("warning: {} has no hypotheses; writing an empty file", hyp.display());
        data::write_jsonl(out, &[])?;
        return Ok(());
    }
    let records = data::align_transcripts(&refs, &hyps)?;
    data::write_jsonl(out, &records)?;
    match dataset_stats(records.iter().map(|r| r.labels.as_deref().unwrap_or_default())) {
        Ok(stats) => println!("{}", serde_json::to_string(&stats)?),
        Err(_) => eprintln!("warning: hypotheses contain no tokens"),
    }
    Ok(())
}

fn cmd_train(config: Option<&Path>, dir: &Path, out: &Path, log: Option<&Path>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let train_recs = data::read_jsonl(&dir.join("train.jsonl"))?;
    let valid_recs = data::read_jsonl(&dir.join("valid.jsonl"))?;
    let vocab = match data::read_manifest(dir) {
        Ok(m) => m.vocab,
        Err(_) => Vocabulary::from_records(&train_recs),
    };
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.len();
    } else if cfg.model.vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size = {} is smaller than the data vocabulary ({})",
            cfg.model.vocab_size,
            vocab.len()
        ))
        .into());
    }
    let need_aux = cfg.model.aux_dim() > 0;
    let train_set = data::encode(&train_recs, &vocab, need_aux, true)?;
    let valid_set = data::encode(&valid_recs, &vocab, need_aux, true)?;
    let model = Labeler::build(&cfg.model, cfg.train.seed)?;
    eprintln!(
        "training {:?} labeler with {} parameters on {} sequences",
        cfg.model.family,
        model.num_params(),
        train_set.len()
    );

    let mut log_file = match log {
        Some(p) => Some(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let mut log_err = None;
    let result = trainer::train(model, &vocab, &train_set, &valid_set, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  train {:.6}  valid {:.6}  lr {:.3e}",
            r.epoch, r.train_loss, r.valid_loss, r.learning_rate
        );
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(r).expect("epoch records serialize");
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    });
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    match result {
        Ok(outcome) => {
            outcome.best.save(out)?;
            eprintln!(
                "selected epoch {} (validation loss {:.6}); wrote {}",
                outcome.best.meta.epoch,
                outcome.best.meta.valid_loss,
                out.display()
            );
            Ok(())
        }
        Err(failure) => {
            if let Some(last) = &failure.last_good {
                let mut p = out.as_os_str().to_owned();
                p.push(".last-good");
                let p = PathBuf::from(p);
                last.save(&p)?;
                eprintln!("saved epoch {} parameters to {}", last.meta.epoch, p.display());
            }
            Err(failure.into())
        }
    }
}

fn scored(ckpt: &Checkpoint, records: &[DatasetRecord]) -> anyhow::Result<(Labeler, ScoredLabelSet)> {
    let model = ckpt.labeler()?;
    let seqs = data::encode(records, &ckpt.vocab, ckpt.config.aux_dim() > 0, true)?;
    let set = trainer::score_tokens(&model, &seqs)?;
    Ok((model, set))
}

fn cmd_eval(checkpoint: &Path, data_path: &Path, roc: Option<&Path>, name: Option<String>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let records = data::read_jsonl(data_path)?;
    let (model, set) = scored(&ckpt, &records)?;
    let mut report = metrics::evaluate(&set, roc.is_some())?;
    if let Some(p) = roc {
        let curve = std::mem::take(&mut report.roc);
        fs::write(p, serde_json::to_string_pretty(&curve)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    let out = EvalOutput {
        name: name.unwrap_or_else(|| {
            checkpoint
                .file_stem()
                .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
        }),
        family: ckpt.config.family,
        embed_dim: ckpt.config.embed_dim,
        aux_features: ckpt.config.aux_features.clone(),
        params: model.num_params(),
        tokens: set.len(),
        metrics: report,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_detect(args: &DetectArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let records = data::read_jsonl(&args.data)?;
    let model = ckpt.labeler()?;
    let seqs = data::encode(&records, &ckpt.vocab, ckpt.config.aux_dim() > 0, args.at_eer)?;
    let threshold = match args.threshold {
        Some(t) if !(0.0..=1.0).contains(&t) => {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {t}")).into());
        }
        Some(t) => t,
        None => {
            let set = trainer::score_tokens(&model, &seqs)?;
            let e = metrics::eer(&set)?;
            let (far, frr) = metrics::rates_at(&set, e.threshold)?;
            eprintln!(
                "EER {:.4} at threshold {:.6} (FAR {far:.4}, FRR {frr:.4}, gap {:.4})",
                e.eer, e.threshold, e.gap
            );
            e.threshold
        }
    };
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let posts = model.predict(&views)?;
    let mut w: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (rec, p) in records.iter().zip(&posts) {
        let line = DetectRecord {
            utt_id: &rec.utt_id,
            tokens: &rec.tokens,
            scores: p.incorrect(),
            flags: detect(p, threshold),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(paths: &[PathBuf]) -> anyhow::Result<()> {
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let e: EvalOutput = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        rows.push(e);
    }
    if rows.is_empty() {
        bail!(Error::Data("no evaluation outputs given".into()));
    }
    rows.sort_by(|a, b| a.metrics.eer.total_cmp(&b.metrics.eer));
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:<11}  {:>9}  {:>7}  {:>6}  {:>7}", "model", "family", "params", "EER %", "AUC", "NCE");
    for r in &rows {
        println!(
            "{:<width$}  {:<11}  {:>9}  {:>7.2}  {:>6.3}  {:>7.3}",
            r.name,
            format!("{:?}", r.family).to_lowercase(),
            r.params,
            100.0 * r.metrics.eer,
            r.metrics.auc,
            r.metrics.nce
        );
    }
    Ok(())
}
