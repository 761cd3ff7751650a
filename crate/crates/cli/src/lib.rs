//! Command-line driver: corpus generation, classifier and transfer-model
//! training, evaluation, single-sentence transfer and gradient self-checks.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stylerl::classifier::{labeled_accuracy, labeled_sentences, style_corpus, train_classifier, StyleClassifier};
use stylerl::data::{
    detokenize, synthetic_splits, tokenize, CorpusSplits, Direction, ParallelPair, Templates, Vocabulary,
};
use stylerl::evaluation::{compare, evaluate};
use stylerl::seed;
use stylerl::selfcheck;
use stylerl::seq2seq::Seq2Seq;
use stylerl::training::{best_checkpoint, Schedule, TrainContext};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "stylerl", version, about = "Reward-driven text style transfer at desk scale")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// CopyNMT, TS, CP, TS+CP, TS->CP or CP->TS.
    #[arg(long, global = true)]
    pub schedule: Option<String>,
    /// low2high or high2low.
    #[arg(long, global = true)]
    pub direction: Option<Direction>,
    /// Output directory for data, checkpoints and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the train/valid/test corpus and vocabulary under <out>/data.
    GenData,
    /// Trains the style classifier into <out>/classifier.ckpt.
    TrainClassifier,
    /// Trains one schedule into <out>/runs/<schedule>.
    Train,
    /// Scores trained schedules on the test split and writes <out>/eval/report.*.
    Eval {
        /// Comma-separated schedules; defaults to every trained one.
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<String>,
    },
    /// Transfers one sentence with the selected schedule's best checkpoint.
    Transfer { sentence: String },
    /// Compares analytic gradients with central differences; fails on any mismatch.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

impl Cli {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(schedule) = &self.schedule {
            cfg.schedule = schedule.clone();
        }
        if let Some(direction) = self.direction {
            cfg.direction = direction;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::TrainClassifier => train_classifier_cmd(&cfg, out),
        Command::Train => train(&cfg, out),
        Command::Eval { schedules } => eval(&cfg, schedules, out),
        Command::Transfer { sentence } => transfer(&cfg, sentence, out),
        Command::Gradcheck { instances } => gradcheck(&cfg, *instances, out),
    }
}

struct Workspace {
    splits: CorpusSplits,
    vocab: Vocabulary,
}

impl Workspace {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.data_dir();
        let vocab_path = cfg.vocab_path();
        if !vocab_path.exists() {
            bail!(
                "no corpus at {} (expected {}); run `stylerl gen-data` first",
                dir.display(),
                vocab_path.display()
            );
        }
        let vocab = Vocabulary::load(&vocab_path)?;
        let splits = CorpusSplits::load(&dir)?;
        Ok(Workspace { splits, vocab })
    }

    fn encoded(&self, split: &[stylerl::data::TextPair], direction: Direction) -> Vec<ParallelPair> {
        ParallelPair::encode_all(split, &self.vocab, direction)
    }
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {}; {hint}", path.display());
    }
    Ok(())
}

fn load_classifier(cfg: &RunConfig, ws: &Workspace) -> Result<StyleClassifier> {
    let path = cfg.classifier_path();
    require(&path, "classifier checkpoint", "run `stylerl train-classifier` first")?;
    StyleClassifier::load(&path, &ws.vocab.hash())
        .with_context(|| format!("loading classifier {}", path.display()))
}

fn load_model(cfg: &RunConfig, ws: &Workspace, schedule: Schedule) -> Result<Seq2Seq> {
    let dir = cfg.run_dir(schedule);
    let pointer = dir.join("best");
    require(
        &pointer,
        &format!("{} run", schedule.name()),
        &format!("run `stylerl train --schedule {}` first", schedule.slug()),
    )?;
    let path = best_checkpoint(&dir)?;
    require(&path, "best checkpoint", "the run directory is incomplete; retrain it")?;
    Seq2Seq::load(&path, &ws.vocab.hash()).with_context(|| format!("loading model {}", path.display()))
}

fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let d = &cfg.data;
    let splits = match &d.corpus_dir {
        Some(dir) => CorpusSplits::load(dir).with_context(|| format!("reading corpus {}", dir.display()))?,
        None => synthetic_splits(cfg.seed, d.n_train, d.n_valid, d.n_test, &Templates::default())?,
    };
    let vocab = splits.vocabulary(d.min_freq)?;
    let dir = cfg.data_dir();
    splits.save(&dir)?;
    vocab.save(&cfg.vocab_path())?;
    writeln!(
        out,
        "wrote {} train / {} valid / {} test pairs and a {}-token vocabulary to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        vocab.len(),
        dir.display()
    )?;
    Ok(())
}

fn train_classifier_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    // Mixed-register negatives need the rewrite rules, known only for generated corpora.
    let templates = Templates::default();
    let rules = cfg.data.corpus_dir.is_none().then_some(&templates.rules);
    let train = style_corpus(&ws.splits.train, rules, &ws.vocab, seed::derive(cfg.seed, "classifier-train"));
    let valid = style_corpus(&ws.splits.valid, rules, &ws.vocab, seed::derive(cfg.seed, "classifier-valid"));
    let (clf, history) = train_classifier(
        &train,
        &valid,
        cfg.classifier_config(ws.vocab.len()),
        &cfg.classifier_training(),
        seed::derive(cfg.seed, "classifier"),
    )?;
    for (i, (loss, acc)) in history.train_loss.iter().zip(&history.valid_accuracy).enumerate() {
        writeln!(out, "epoch {:>2}  loss {loss:.4}  valid accuracy {acc:.4}", i + 1)?;
    }
    let plain = labeled_accuracy(&clf, &labeled_sentences(&ws.splits.valid, &ws.vocab))?;
    let path = cfg.classifier_path();
    clf.save(&path, &ws.vocab.hash())?;
    writeln!(
        out,
        "kept epoch {}; validation accuracy on corpus sentences {plain:.4}; saved {}",
        history.best_epoch + 1,
        path.display()
    )?;
    Ok(())
}

fn clear_run_dir(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("ckpt-") || ["best", "history.jsonl", "config.json"].contains(&name.as_ref()) {
            fs::remove_file(entry.path()).with_context(|| format!("removing {}", entry.path().display()))?;
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    let schedule = cfg.schedule()?;
    let classifier = if schedule.uses_classifier() || cfg.classifier_path().exists() {
        Some(load_classifier(cfg, &ws)?)
    } else {
        writeln!(out, "no classifier found; selecting checkpoints by validation BLEU")?;
        None
    };
    let train = ws.encoded(&ws.splits.train, cfg.direction);
    let valid = ws.encoded(&ws.splits.valid, cfg.direction);
    let dir = cfg.run_dir(schedule);
    clear_run_dir(&dir)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut echo = cfg.clone();
    echo.schedule = schedule.name().to_string();
    let echo = serde_json::json!({ "config": echo, "vocab_hash": ws.vocab.hash() });
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&echo)? + "\n")?;
    let train_config = cfg.train_config();
    let vocab_hash = ws.vocab.hash();
    let ctx = TrainContext {
        train: &train,
        valid: &valid,
        classifier: classifier.as_ref(),
        config: &train_config,
        seed: cfg.seed,
        run_dir: Some(&dir),
        vocab_hash: &vocab_hash,
    };
    let mut model = Seq2Seq::new(cfg.model_config(ws.vocab.len()), cfg.seed)?;
    let history = ctx.train(&mut model, schedule)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    writeln!(out, "phase epoch  loss_ml  loss_cp  loss_ts     loss  bleu    acc     overall")?;
    for r in &history.epochs {
        writeln!(
            out,
            "{:>5} {:>5} {:>8} {:>8} {:>8} {:>8.4}  {:.4}  {:>6}  {:.4}",
            r.phase + 1,
            r.epoch,
            fmt(r.loss_ml),
            fmt(r.loss_cp),
            fmt(r.loss_ts),
            r.loss,
            r.valid_bleu,
            fmt(r.valid_accuracy),
            r.valid_overall
        )?;
    }
    writeln!(out, "{} finished; best checkpoint {}", schedule.name(), best_checkpoint(&dir)?.display())?;
    Ok(())
}

fn eval(cfg: &RunConfig, requested: &[String], out: &mut dyn Write) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    let clf = load_classifier(cfg, &ws)?;
    let schedules: Vec<Schedule> = if requested.is_empty() {
        let trained: Vec<Schedule> = Schedule::ALL
            .into_iter()
            .filter(|s| cfg.run_dir(*s).join("best").exists())
            .collect();
        if trained.is_empty() {
            bail!(
                "no trained runs under {}; run `stylerl train` first",
                cfg.out.join("runs").display()
            );
        }
        trained
    } else {
        requested.iter().map(|s| Ok(s.parse::<Schedule>()?)).collect::<Result<_>>()?
    };
    let test = ws.encoded(&ws.splits.test, cfg.direction);
    let reports = schedules
        .iter()
        .map(|&s| {
            let model = load_model(cfg, &ws, s)?;
            let mut report = evaluate(s.name(), &model, &clf, &test, cfg.direction)?;
            report.sentences.clear();
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&reports)?;
    let dir = cfg.eval_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (ext, body) in [("txt", &table.text), ("csv", &table.csv), ("json", &table.json)] {
        let path = dir.join(format!("report.{ext}"));
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    write!(out, "{}", table.text)?;
    writeln!(out, "reports written to {}", dir.display())?;
    Ok(())
}

fn transfer(cfg: &RunConfig, sentence: &str, out: &mut dyn Write) -> Result<()> {
    let tokens = tokenize(sentence);
    if tokens.is_empty() {
        bail!("nothing to transfer: the sentence has no tokens");
    }
    let ws = Workspace::load(cfg)?;
    let schedule = cfg.schedule()?;
    let model = load_model(cfg, &ws, schedule)?;
    let source = ws.vocab.encode(&tokens);
    let hyp = model.decode_greedy(source.ids(), model.config().max_len)?;
    let words = ws.vocab.decode(hyp.content());
    writeln!(out, "{}", detokenize(&words))?;
    if cfg.classifier_path().exists() {
        let clf = load_classifier(cfg, &ws)?;
        let score = clf.score_hard(hyp.content())?;
        let target = match cfg.direction {
            Direction::LowToHigh => "formal",
            Direction::HighToLow => "informal",
        };
        writeln!(out, "formal-style score {score:.4} (target style {target})")?;
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, instances: usize, out: &mut dyn Write) -> Result<()> {
    if instances == 0 {
        bail!("--instances must be at least 1");
    }
    let results = selfcheck::check_all(cfg.seed, instances)?;
    let mut failed = Vec::new();
    for s in &results {
        writeln!(
            out,
            "{:<16} {:>6} elements  max rel error {:.2e}  tol {:.0e}  {}",
            s.name,
            s.elements,
            s.max_rel_error,
            s.tol,
            if s.passed() { "ok" } else { "FAIL" }
        )?;
        if !s.passed() {
            failed.push(s.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
