//! `aesf` command line: corpus ingestion, training, cross-validation, the
//! variant grid, ensembles, scoring and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::corpus::{self, kfold_splits, to_labels, ItemSpec, LabeledEssay, ScoredEssay};
use crate::error::{Error, Result};
use crate::lstm::Pooling;
use crate::metrics::{compare_engine_to_human_with, report_tsv, QwkVariant};
use crate::selftest;
use crate::tokenizer::Vocab;
use crate::training::{
    apply_variant, combine_columns, experiment_grid, kfold, predict_essays, run_fold, selection_qwk, Ensemble,
    EnsembleMode, LrSchedule, Model, ModelConfig, ModelKind, TrainPlan, GRID_VARIANTS,
};

pub const SEED_ENV: &str = "AESF_SEED";

/// Model and training settings addressable as flat `key = value` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    /// `None` picks the model kind's default rate.
    pub lr: Option<f64>,
    pub xi: f64,
    pub discriminative: bool,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(ModelKind::Bert),
            plan: TrainPlan::default(),
            lr: None,
            xi: crate::training::schedule::DISCRIMINATIVE_XI,
            discriminative: false,
            seed: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if matches!(v, "none" | "auto" | "default") {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let p = &mut self.plan;
        match key {
            "model" => m.kind = v.parse()?,
            "dim" => m.dim = parse_value(key, v)?,
            "heads" => m.heads = parse_value(key, v)?,
            "layers" => m.layers = parse_value(key, v)?,
            "ffn_dim" => m.ffn_dim = parse_value(key, v)?,
            "max_len" => m.max_len = parse_value(key, v)?,
            "mem_len" => m.mem_len = parse_value(key, v)?,
            "dropout" => m.dropout = parse_value(key, v)?,
            "pos_denominator" => m.pos_denominator = parse_opt(key, v)?,
            "lstm_hidden" => m.lstm_hidden = parse_value(key, v)?,
            "lstm_layers" => m.lstm_layers = parse_value(key, v)?,
            "lstm_pooling" => {
                m.lstm_pooling = match v {
                    "final" => Pooling::Final,
                    "mean" => Pooling::Mean,
                    _ => return Err(Error::Config(format!("bad lstm_pooling `{v}` (final | mean)"))),
                }
            }
            "vocab_size" => m.vocab_size = parse_value(key, v)?,
            "tfidf_cutoff" => m.tfidf_cutoff = parse_value(key, v)?,
            "epochs" => p.epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_opt(key, v)?,
            "lr_schedule" => {
                self.discriminative = match v {
                    "fixed" => false,
                    "discriminative" => true,
                    _ => return Err(Error::Config(format!("bad lr_schedule `{v}` (fixed | discriminative)"))),
                }
            }
            "xi" => self.xi = parse_value(key, v)?,
            "gradual_unfreeze" => p.gradual_unfreeze = parse_value(key, v)?,
            "finetune_dropout" => p.dropout = parse_opt(key, v)?,
            "layer_limit" => p.layer_limit = parse_opt(key, v)?,
            "remove_stopwords" => p.remove_stopwords = parse_value(key, v)?,
            "batch_size" => p.batch_size = parse_value(key, v)?,
            "warmup_steps" => p.warmup_steps = parse_value(key, v)?,
            "average_probabilities" => p.average_probabilities = parse_value(key, v)?,
            "stop_when_train_perfect" => p.stop_when_train_perfect = parse_value(key, v)?,
            "bow_epochs" => p.bow_epochs = parse_value(key, v)?,
            "bow_lr" => p.bow_lr = parse_value(key, v)?,
            "seed" => self.seed = parse_opt(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let p = &self.plan;
        vec![
            ("model", m.kind.to_string()),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("layers", m.layers.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("max_len", m.max_len.to_string()),
            ("mem_len", m.mem_len.to_string()),
            ("dropout", m.dropout.to_string()),
            ("pos_denominator", show_opt(&m.pos_denominator, "default")),
            ("lstm_hidden", m.lstm_hidden.to_string()),
            ("lstm_layers", m.lstm_layers.to_string()),
            ("lstm_pooling", if m.lstm_pooling == Pooling::Mean { "mean" } else { "final" }.into()),
            ("vocab_size", m.vocab_size.to_string()),
            ("tfidf_cutoff", m.tfidf_cutoff.to_string()),
            ("epochs", p.epochs.to_string()),
            ("lr", show_opt(&self.lr, "auto")),
            ("lr_schedule", if self.discriminative { "discriminative" } else { "fixed" }.into()),
            ("xi", self.xi.to_string()),
            ("gradual_unfreeze", p.gradual_unfreeze.to_string()),
            ("finetune_dropout", show_opt(&p.dropout, "none")),
            ("layer_limit", show_opt(&p.layer_limit, "none")),
            ("remove_stopwords", p.remove_stopwords.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("warmup_steps", p.warmup_steps.to_string()),
            ("average_probabilities", p.average_probabilities.to_string()),
            ("stop_when_train_perfect", p.stop_when_train_perfect.to_string()),
            ("bow_epochs", p.bow_epochs.to_string()),
            ("bow_lr", p.bow_lr.to_string()),
            ("seed", show_opt(&self.seed, "auto")),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Resolved plan with the seed, rate and schedule filled in.
    pub fn resolved_plan(&self, seed: u64) -> TrainPlan {
        let mut plan = self.plan.clone();
        plan.seed = seed;
        plan.base_lr = self.lr.unwrap_or_else(|| self.model.kind.default_lr());
        plan.lr_schedule =
            if self.discriminative { LrSchedule::Discriminative { xi: self.xi } } else { LrSchedule::Fixed };
        plan
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Worker threads for parallel training and prediction.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct CorpusArgs {
    /// Scored essays TSV (essay_id, essay_set, essay, rater1_domain1, rater2_domain1, domain1_score).
    #[arg(long)]
    pub input: PathBuf,
    /// Optional `item, min_score, max_score` sidecar.
    #[arg(long)]
    pub items: Option<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "aesf", version, about = "Automated essay scoring at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a scored TSV and summarize its items.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a subword vocabulary from essay texts.
    Vocab {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        size: Option<usize>,
        /// Vocabulary file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model on one fold of one item.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        item: i64,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Five-fold cross-validation of one model on one item.
    Kfold {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        item: i64,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Percentage change in dev QWK of fine-tuning variants over the base plan.
    Grid {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Item to include; repeatable.
        #[arg(long = "item", required = true)]
        item: Vec<i64>,
        /// Comma-separated variants, e.g. `1,2,1+2`; defaults to the full grid.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Combine trained checkpoints and evaluate them on scored essays.
    Ensemble {
        /// Member checkpoint; repeat for each member.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "mean-round")]
        mode: String,
        /// Index of the member that breaks majority ties.
        #[arg(long, default_value_t = 0)]
        best: usize,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Predict scores for essays with a trained checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV with essay_id, essay_set and essay columns.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Engine-vs-human agreement report for a predictions file.
    Evaluate {
        /// TSV with essay_id, item, predicted_score.
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value = "standard")]
        qwk_variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<(RunConfig, u64)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_text(&read_text(path)?)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let seed = match cfg.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => parse_value(SEED_ENV, v.trim())?,
            Err(_) => 0,
        },
    };
    cfg.seed = Some(seed);
    cfg.plan.seed = seed;
    if let Some(w) = args.workers {
        set_workers(w)?;
    }
    Ok((cfg, seed))
}

fn set_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn load_corpus(args: &CorpusArgs) -> Result<(Vec<ScoredEssay>, Vec<ItemSpec>)> {
    if !args.input.exists() {
        return Err(Error::Config(format!("input {} does not exist", args.input.display())));
    }
    match &args.items {
        Some(side) => corpus::load_tsv_with_specs(&args.input, side),
        None => corpus::load_tsv(&args.input),
    }
}

fn item_spec(specs: &[ItemSpec], item: i64) -> Result<ItemSpec> {
    specs
        .iter()
        .find(|s| s.item == item)
        .copied()
        .ok_or_else(|| Error::Config(format!("item {item} not found in the corpus")))
}

fn vocab_for(cfg: &RunConfig, path: Option<&PathBuf>, essays: &[ScoredEssay]) -> Result<Option<Vocab>> {
    if cfg.model.kind == ModelKind::Bow {
        return Ok(None);
    }
    match path {
        Some(p) => Vocab::load(p).map(Some),
        None => Vocab::build(essays.iter().map(|e| e.text.as_str()), cfg.model.vocab_size).map(Some),
    }
}

struct Manifest {
    command: &'static str,
    lines: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str, cfg: &RunConfig, seed: u64) -> Self {
        let mut m = Manifest { command, lines: Vec::new() };
        let mut cfg = cfg.clone();
        cfg.seed = Some(seed);
        m.lines.extend(cfg.to_text().lines().map(String::from));
        m
    }

    fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("# {key}: {value}"));
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = format!("# aesf {} {}\n", self.command, env!("CARGO_PKG_VERSION"));
        for l in &self.lines {
            text.push_str(l);
            text.push('\n');
        }
        write_out(&dir.join("manifest.txt"), &text)
    }
}

fn save_checkpoint(model: &Model, spec: &ItemSpec, seed: u64, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert("item".to_string(), spec.item.to_string());
    extra.insert("min_score".to_string(), spec.min_score.to_string());
    extra.insert("max_score".to_string(), spec.max_score.to_string());
    extra.insert("seed".to_string(), seed.to_string());
    let hash = model.to_checkpoint(&extra)?.save(dir.join("checkpoint.aesf"))?;
    manifest.note("sha256 checkpoint.aesf", hash);
    Ok(())
}

fn predictions_tsv(rows: &[(i64, i64, i64)]) -> String {
    let mut out = String::from("essay_id\titem\tpredicted_score\n");
    for (id, item, s) in rows {
        writeln!(out, "{id}\t{item}\t{s}").unwrap();
    }
    out
}

fn read_predictions(path: &Path) -> Result<Vec<(i64, i64, i64)>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != "essay_id\titem\tpredicted_score" {
        return Err(Error::Config(format!("{}: unexpected header `{header}`", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Config(format!("{} line {}: expected three integers", path.display(), n + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            let v = f
                .iter()
                .map(|x| x.trim().parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            Ok((v[0], v[1], v[2]))
        })
        .collect()
}

const FOLD_HEADER: &str = "fold\titem\tn\tqwk_engine\tqwk_human\tacc_engine\tacc_human\tdev_qwk\tvalidation_qwk";

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { corpus, out } => ingest(&corpus, out.as_deref()),
        Command::Vocab { corpus, size, out, cfg } => {
            let (rc, _) = resolve_config(&cfg)?;
            if cfg.print_config {
                print!("{}", rc.to_text());
                return Ok(());
            }
            let (essays, _) = load_corpus(&corpus)?;
            let vocab = Vocab::build(essays.iter().map(|e| e.text.as_str()), size.unwrap_or(rc.model.vocab_size))?;
            vocab.save(&out)?;
            println!("vocabulary of {} pieces written to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Train { corpus, item, fold, vocab, out, cfg } => {
            train(&corpus, item, fold, vocab.as_ref(), &out, &cfg)
        }
        Command::Kfold { corpus, item, vocab, out, cfg } => kfold_cmd(&corpus, item, vocab.as_ref(), &out, &cfg),
        Command::Grid { corpus, item, variants, fold, vocab, out, cfg } => {
            grid(&corpus, &item, variants.as_deref(), fold, vocab.as_ref(), &out, &cfg)
        }
        Command::Ensemble { checkpoints, mode, best, corpus, out, workers } => {
            if let Some(w) = workers {
                set_workers(w)?;
            }
            ensemble(&checkpoints, mode.parse()?, best, &corpus, &out)
        }
        Command::Score { checkpoint, input, out, workers } => {
            if let Some(w) = workers {
                set_workers(w)?;
            }
            score(&checkpoint, &input, &out)
        }
        Command::Evaluate { predictions, corpus, qwk_variant, out } => {
            evaluate(&predictions, &corpus, qwk_variant.parse()?, out.as_deref())
        }
        Command::Selftest => {
            let checks = selftest::run_all()?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Consistency(format!("{failed} self-test check(s) failed")));
            }
            Ok(())
        }
    }
}

fn ingest(args: &CorpusArgs, out: Option<&Path>) -> Result<()> {
    let (essays, specs) = load_corpus(args)?;
    let mut summary = String::from("item\tmin_score\tmax_score\tessays\n");
    for s in &specs {
        let n = essays.iter().filter(|e| e.item == s.item).count();
        writeln!(summary, "{}\t{}\t{}\t{n}", s.item, s.min_score, s.max_score).unwrap();
    }
    print!("{summary}");
    if let Some(dir) = out {
        out_dir(dir)?;
        write_out(&dir.join("items.tsv"), &summary)?;
        write_out(&dir.join("corpus.tsv"), &corpus::emit_tsv(&essays))?;
    }
    Ok(())
}

fn labeled_item(essays: &[ScoredEssay], spec: &ItemSpec) -> Result<(Vec<ScoredEssay>, Vec<LabeledEssay>)> {
    let raw: Vec<ScoredEssay> = essays.iter().filter(|e| e.item == spec.item).cloned().collect();
    let labeled = to_labels(&raw, spec)?;
    Ok((raw, labeled))
}

fn fold_row(out: &mut String, fold: &str, item: i64, f: &crate::training::FoldResult) {
    let r = &f.report;
    writeln!(
        out,
        "{fold}\t{item}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.n, r.qwk_engine, r.qwk_human, r.acc_engine, r.acc_human, f.dev_qwk, f.validation_qwk
    )
    .unwrap();
}

fn train(
    args: &CorpusArgs,
    item: i64,
    fold: usize,
    vocab: Option<&PathBuf>,
    out: &Path,
    cfg: &ConfigArgs,
) -> Result<()> {
    let (rc, seed) = resolve_config(cfg)?;
    if cfg.print_config {
        print!("{}", rc.to_text());
        return Ok(());
    }
    let (essays, specs) = load_corpus(args)?;
    let spec = item_spec(&specs, item)?;
    let (raw, labeled) = labeled_item(&essays, &spec)?;
    let splits = kfold_splits(&raw, seed)?;
    let split = splits.get(fold).ok_or_else(|| Error::Config(format!("fold {fold} not in 0..{}", splits.len())))?;
    let v = vocab_for(&rc, vocab, &essays)?;
    let plan = rc.resolved_plan(seed);
    let f = run_fold(&rc.model, v.as_ref(), &labeled, split, spec.num_labels(), &plan)?;
    out_dir(out)?;
    let mut manifest = Manifest::new("train", &rc, seed);
    manifest.note("input", args.input.display());
    manifest.note("item", item);
    manifest.note("fold", fold);
    save_checkpoint(&f.trained.model, &spec, seed, out, &mut manifest)?;
    let mut metrics = format!("{FOLD_HEADER}\n");
    fold_row(&mut metrics, &fold.to_string(), item, &f);
    write_out(&out.join("metrics.tsv"), &metrics)?;
    let rows: Vec<(i64, i64, i64)> = f.predictions.iter().map(|&(id, l)| (id, item, spec.to_score(l))).collect();
    write_out(&out.join("predictions.tsv"), &predictions_tsv(&rows))?;
    manifest.write(out)?;
    print!("{metrics}");
    Ok(())
}

fn kfold_cmd(args: &CorpusArgs, item: i64, vocab: Option<&PathBuf>, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let (rc, seed) = resolve_config(cfg)?;
    if cfg.print_config {
        print!("{}", rc.to_text());
        return Ok(());
    }
    let (essays, specs) = load_corpus(args)?;
    let spec = item_spec(&specs, item)?;
    let (raw, labeled) = labeled_item(&essays, &spec)?;
    let splits = kfold_splits(&raw, seed)?;
    let v = vocab_for(&rc, vocab, &essays)?;
    let plan = rc.resolved_plan(seed);
    let folds = kfold(&rc.model, v.as_ref(), &labeled, &splits, spec.num_labels(), &plan)?;
    out_dir(out)?;
    let mut metrics = format!("{FOLD_HEADER}\n");
    for f in &folds {
        fold_row(&mut metrics, &f.fold.to_string(), item, f);
    }
    let n = folds.len() as f64;
    let mean = |get: fn(&crate::training::FoldResult) -> f64| folds.iter().map(get).sum::<f64>() / n;
    writeln!(
        metrics,
        "mean\t{item}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        folds.iter().map(|f| f.report.n).sum::<usize>(),
        mean(|f| f.report.qwk_engine),
        mean(|f| f.report.qwk_human),
        mean(|f| f.report.acc_engine),
        mean(|f| f.report.acc_human),
        mean(|f| f.dev_qwk),
        mean(|f| f.validation_qwk),
    )
    .unwrap();
    let mut rows: Vec<(i64, i64, i64)> =
        folds.iter().flat_map(|f| f.predictions.iter().map(|&(id, l)| (id, item, spec.to_score(l)))).collect();
    rows.sort_unstable();
    let mut manifest = Manifest::new("kfold", &rc, seed);
    manifest.note("input", args.input.display());
    manifest.note("item", item);
    let best = folds.iter().enumerate().fold(0, |b, (i, f)| if f.dev_qwk > folds[b].dev_qwk { i } else { b });
    manifest.note("checkpoint fold", best);
    save_checkpoint(&folds[best].trained.model, &spec, seed, out, &mut manifest)?;
    write_out(&out.join("metrics.tsv"), &metrics)?;
    write_out(&out.join("predictions.tsv"), &predictions_tsv(&rows))?;
    manifest.write(out)?;
    print!("{metrics}");
    Ok(())
}

fn grid(
    args: &CorpusArgs,
    items: &[i64],
    variants: Option<&str>,
    fold: usize,
    vocab: Option<&PathBuf>,
    out: &Path,
    cfg: &ConfigArgs,
) -> Result<()> {
    let (rc, seed) = resolve_config(cfg)?;
    if cfg.print_config {
        print!("{}", rc.to_text());
        return Ok(());
    }
    let names: Vec<&str> = match variants {
        Some(v) => v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
        None => GRID_VARIANTS.to_vec(),
    };
    let base = rc.resolved_plan(seed);
    for n in &names {
        apply_variant(&base, n, rc.model.n_layers().max(1))?;
    }
    let (essays, specs) = load_corpus(args)?;
    let v = vocab_for(&rc, vocab, &essays)?;
    let mut data = BTreeMap::new();
    for &item in items {
        let spec = item_spec(&specs, item)?;
        let (raw, labeled) = labeled_item(&essays, &spec)?;
        let split = kfold_splits(&raw, seed)?
            .into_iter()
            .nth(fold)
            .ok_or_else(|| Error::Config(format!("fold {fold} out of range")))?;
        data.insert(item, (spec, labeled, split));
    }
    let table = experiment_grid(items, &names, &base, rc.model.n_layers().max(1), |item, plan| {
        let (spec, labeled, split) = &data[&item];
        Ok(run_fold(&rc.model, v.as_ref(), labeled, split, spec.num_labels(), plan)?.dev_qwk)
    })?;
    out_dir(out)?;
    let tsv = table.to_tsv();
    write_out(&out.join("grid.tsv"), &tsv)?;
    let mut manifest = Manifest::new("grid", &rc, seed);
    manifest.note("input", args.input.display());
    manifest.note("items", items.iter().map(i64::to_string).collect::<Vec<_>>().join(","));
    manifest.note("fold", fold);
    manifest.note("variants", names.join(","));
    manifest.write(out)?;
    print!("{tsv}");
    Ok(())
}

fn checkpoint_item(ck: &Checkpoint) -> Result<ItemSpec> {
    ItemSpec::new(ck.parse("item")?, ck.parse("min_score")?, ck.parse("max_score")?)
}

fn ensemble(paths: &[PathBuf], mode: EnsembleMode, best: usize, args: &CorpusArgs, out: &Path) -> Result<()> {
    let mut members = Vec::new();
    let mut spec: Option<ItemSpec> = None;
    let mut manifest =
        Manifest { command: "ensemble", lines: vec![format!("# mode: {mode}"), format!("# best: {best}")] };
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        let s = checkpoint_item(&ck)?;
        if spec.is_some_and(|prev| prev != s) {
            return Err(Error::Consistency("ensemble members were trained on different items".into()));
        }
        spec = Some(s);
        manifest.note(&format!("sha256 {}", p.display()), sha256_hex(&bytes));
        members.push(Model::from_checkpoint(&ck)?);
    }
    let spec = spec.ok_or_else(|| Error::Config("no checkpoints given".into()))?;
    let ens = Ensemble::new(members, mode, best)?;
    let (essays, _) = load_corpus(args)?;
    let (_, labeled) = labeled_item(&essays, &spec)?;
    if labeled.is_empty() {
        return Err(Error::Empty(format!("no essays for item {}", spec.item)));
    }
    let k = spec.num_labels();
    let per_member = ens.members.iter().map(|m| predict_essays(m, &labeled)).collect::<Result<Vec<_>>>()?;
    let combined = combine_columns(&per_member, k, mode, best)?;
    let gold: Vec<usize> = labeled.iter().map(|e| e.label).collect();
    let mut metrics = String::from("member\tqwk\n");
    for (i, p) in per_member.iter().enumerate() {
        writeln!(metrics, "{i}\t{}", selection_qwk(p, &gold, k)?).unwrap();
    }
    writeln!(metrics, "ensemble\t{}", selection_qwk(&combined, &gold, k)?).unwrap();
    out_dir(out)?;
    let rows: Vec<(i64, i64, i64)> =
        labeled.iter().zip(&combined).map(|(e, &l)| (e.essay_id, e.item, spec.to_score(l))).collect();
    write_out(&out.join("metrics.tsv"), &metrics)?;
    write_out(&out.join("predictions.tsv"), &predictions_tsv(&rows))?;
    manifest.note("input", args.input.display());
    manifest.write(out)?;
    print!("{metrics}");
    Ok(())
}

fn score(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = checkpoint_item(&ck)?;
    let model = Model::from_checkpoint(&ck)?;
    let essays = corpus::load_unscored(input)?;
    let (mine, other): (Vec<_>, Vec<_>) = essays.into_iter().partition(|e| e.1 == spec.item);
    if !other.is_empty() {
        eprintln!("skipping {} essays not from item {}", other.len(), spec.item);
    }
    if mine.is_empty() {
        return Err(Error::Empty(format!("no essays for item {} in {}", spec.item, input.display())));
    }
    use rayon::prelude::*;
    let rows = mine
        .par_iter()
        .map(|(id, item, text)| Ok((*id, *item, spec.to_score(model.predict(text)?))))
        .collect::<Result<Vec<_>>>()?;
    let text = predictions_tsv(&rows);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    write_out(out, &text)?;
    println!("{} predictions written to {}", rows.len(), out.display());
    Ok(())
}

fn evaluate(predictions: &Path, args: &CorpusArgs, variant: QwkVariant, out: Option<&Path>) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let (essays, specs) = load_corpus(args)?;
    let by_id: BTreeMap<i64, &ScoredEssay> = essays.iter().map(|e| (e.essay_id, e)).collect();
    let mut per_item: BTreeMap<i64, (Vec<usize>, Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (id, item, score) in preds {
        let e =
            by_id.get(&id).ok_or_else(|| Error::Consistency(format!("essay {id} not in {}", args.input.display())))?;
        if e.item != item {
            return Err(Error::Consistency(format!("essay {id} belongs to item {}, not {item}", e.item)));
        }
        let spec = item_spec(&specs, item)?;
        let slot = per_item.entry(item).or_default();
        slot.0.push(spec.to_label(e.rater1)?);
        slot.1.push(spec.to_label(e.rater2)?);
        slot.2.push(spec.to_label(score)?);
    }
    if per_item.is_empty() {
        return Err(Error::Empty("predictions file has no rows".into()));
    }
    let rows = per_item
        .iter()
        .map(|(&item, (r1, r2, p))| {
            let k = item_spec(&specs, item)?.num_labels();
            Ok((item, compare_engine_to_human_with(r1, r2, p, k, variant)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let tsv = report_tsv(&rows);
    if let Some(dir) = out {
        out_dir(dir)?;
        write_out(&dir.join("metrics.tsv"), &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_ids_are_unique() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = RunConfig::default();
        c.set("model", "xlnet").unwrap();
        c.set("layer_limit", "1").unwrap();
        c.set("lr", "0.01").unwrap();
        c.set("lr_schedule", "discriminative").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let p = back.resolved_plan(9);
        assert_eq!(p.seed, 9);
        assert_eq!(p.base_lr, 0.01);
        assert_eq!(p.lr_schedule, LrSchedule::Discriminative { xi: 0.95 });
    }

    #[test]
    fn config_errors_are_reported() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("epochs", "x").is_err());
        assert!(c.apply_text("epochs 3").is_err());
        assert!(c.apply_text("# comment only\n\nepochs = 3 # trailing").is_ok());
        assert_eq!(c.plan.epochs, 3);
        assert_eq!(RunConfig::default().resolved_plan(0).base_lr, ModelKind::Bert.default_lr());
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.tsv");
        let rows = vec![(1, 2, 3), (4, 2, -1)];
        fs::write(&p, predictions_tsv(&rows)).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), rows);
        fs::write(&p, "id\tx\n").unwrap();
        assert!(read_predictions(&p).is_err());
    }
}
