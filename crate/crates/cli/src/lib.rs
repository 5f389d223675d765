//! Command runners behind the `hat` binary. Each `cmd_*` function reads its
//! inputs, writes its output files under `out_dir` and returns what it
//! reported, so tests can drive them without a subprocess.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hat_core::bpe::{train_bpe, BpeVocab};
use hat_core::cost_model::{
    corpus_stats, kv_cache_ratio, match_backbone, BaselineShape, CorpusStats, CostError, DocLengths, HierShape,
    MatchResult, StatsOptions, HISTOGRAM_BIN_WIDTH,
};
use hat_core::evaluation::{
    baseline_traces, hat_traces, perturb_corpus, summarize, EvalError, EvalSummary, HatEvalOptions, PerturbKind,
    PerturbSpec, PredictionTrace,
};
use hat_core::generation::{generate, GenConfig, Sampling, WordCache};
use hat_core::models::{BaselineConfig, BaselineParams, HatConfig, HatParams, ModelError};
use hat_core::numerics::Real;
use hat_core::persistence::config::parse_pairs;
use hat_core::persistence::{
    check_compatible, load_checkpoint, load_corpus, peek_checkpoint, save_checkpoint, truncate_documents,
    Checkpoint, DirLock, Dtype, Family, PersistError, RngState, RunConfig,
};
use hat_core::segmentation::SplitterConfig;
use hat_core::training::{train_baseline, train_hat, OptimizerState, StepLog, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Config(_) | PersistError::ConfigMismatch(_) => CliError::Config(e.to_string()),
            PersistError::Locked(_) => CliError::Other(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::InvalidSchedule(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidFraction(_) => CliError::Config(e.to_string()),
            EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        match e {
            CostError::NoCandidate => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Hierarchical => "hierarchical",
        Family::Baseline => "baseline",
    }
}

/// Corpus name used in reports: the file or directory stem.
fn corpus_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
}

fn read_corpus(path: &Path, splitter: &SplitterConfig) -> Result<Vec<Vec<u8>>, CliError> {
    Ok(truncate_documents(load_corpus(path)?, splitter)?)
}

/// A model rebuilt from a checkpoint.
#[allow(clippy::large_enum_variant)]
pub enum Loaded<F: Real> {
    Hat {
        cfg: HatConfig,
        params: HatParams<F>,
    },
    Baseline {
        cfg: BaselineConfig,
        params: BaselineParams<F>,
        vocab: BpeVocab,
        splitter: SplitterConfig,
    },
}

impl<F: Real> Loaded<F> {
    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self, CliError> {
        let rc = &ckpt.config;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match rc.family {
            Family::Hierarchical => {
                let cfg = rc.hat_config()?;
                let mut params = HatParams::init(&cfg, &mut rng);
                ckpt.assign(&mut params)?;
                Ok(Loaded::Hat { cfg, params })
            }
            Family::Baseline => {
                let vocab = ckpt
                    .vocab
                    .clone()
                    .ok_or_else(|| CliError::Data("baseline checkpoint has no vocabulary".into()))?;
                let cfg = rc.baseline_config(vocab.vocab_size())?;
                let mut params = BaselineParams::init(&cfg, &mut rng);
                ckpt.assign(&mut params)?;
                Ok(Loaded::Baseline {
                    cfg,
                    params,
                    vocab,
                    splitter: rc.splitter()?,
                })
            }
        }
    }

    pub fn splitter(&self) -> SplitterConfig {
        match self {
            Loaded::Hat { cfg, .. } => cfg.splitter,
            Loaded::Baseline { splitter, .. } => *splitter,
        }
    }

    pub fn traces(&self, corpus: &[Vec<u8>]) -> Result<Vec<PredictionTrace>, CliError> {
        Ok(match self {
            Loaded::Hat { cfg, params } => hat_traces(cfg, params, corpus, HatEvalOptions::default())?,
            Loaded::Baseline {
                cfg,
                params,
                vocab,
                splitter,
            } => baseline_traces(cfg, params, vocab, splitter, corpus)?,
        })
    }
}

/// Work that needs the checkpoint's element type.
pub trait WithCheckpoint {
    type Out;
    fn run<F: Real>(self, ckpt: Checkpoint<F>) -> Result<Self::Out, CliError>;
}

pub fn with_checkpoint<W: WithCheckpoint>(dir: &Path, work: W) -> Result<W::Out, CliError> {
    let (_, dtype) = peek_checkpoint(dir)?;
    match dtype.as_str() {
        "f32" => work.run(load_checkpoint::<f32>(dir)?),
        "f64" => work.run(load_checkpoint::<f64>(dir)?),
        other => Err(CliError::Data(format!("unsupported dtype {other}"))),
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub eval: EvalSummary,
}

impl TrainReport {
    pub fn line(&self) -> String {
        format!(
            "final step={} loss={:.6} byte_accuracy={:.6} word_accuracy={:.6} bits_per_byte={:.6}",
            self.steps, self.final_loss, self.eval.byte_accuracy, self.eval.word_accuracy, self.eval.bits_per_byte
        )
    }
}

/// Trains from scratch, or from `out_dir/checkpoint` when `resume` is set,
/// saving a checkpoint every `checkpoint_every` steps and at the end.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<TrainReport, CliError> {
    cmd_train_until(cfg, out_dir, resume, None)
}

/// [`cmd_train`] that returns after the first checkpoint at or past
/// `stop_after`.
pub fn cmd_train_until(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let data = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| CliError::Config("train_data is not set".into()))?;
    let corpus = read_corpus(data, &cfg.splitter()?)?;
    match cfg.dtype {
        Dtype::F32 => train_typed::<f32>(cfg, out_dir, resume, stop_after, corpus),
        Dtype::F64 => train_typed::<f64>(cfg, out_dir, resume, stop_after, corpus),
    }
}

fn train_typed<F: Real>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
    corpus: Vec<Vec<u8>>,
) -> Result<TrainReport, CliError> {
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let _lock = DirLock::acquire(&ckpt_dir)?;
    let opts = cfg.train_options();

    let mut ckpt: Checkpoint<F> = if resume {
        let c = load_checkpoint::<F>(&ckpt_dir)?;
        check_compatible(&c.config, cfg)?;
        Checkpoint { config: cfg.clone(), ..c }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (params, vocab) = match cfg.family {
            Family::Hierarchical => (Checkpoint::named_params(&HatParams::<F>::init(&cfg.hat_config()?, &mut rng)), None),
            Family::Baseline => {
                let vocab = match &cfg.vocab_path {
                    Some(p) => {
                        let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                        BpeVocab::from_text(&text).map_err(|e| CliError::Data(e.to_string()))?
                    }
                    None => train_bpe(&corpus, cfg.vocab_size).map_err(|e| CliError::Data(e.to_string()))?.vocab,
                };
                let bc = cfg.baseline_config(vocab.vocab_size())?;
                (Checkpoint::named_params(&BaselineParams::<F>::init(&bc, &mut rng)), Some(vocab))
            }
        };
        Checkpoint {
            config: cfg.clone(),
            step: 0,
            rng: RngState::capture(&rng),
            params,
            optimizer: None,
            vocab,
        }
    };

    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = if resume && log_path.exists() {
        BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?)
    } else {
        let mut w = create(&log_path)?;
        writeln!(w, "{}", StepLog::HEADER).map_err(io_err(&log_path))?;
        w
    };
    let mut write_log = |l: &StepLog| {
        let _ = writeln!(log, "{}", l.to_line());
        let _ = log.flush();
    };

    let mut final_loss = f64::NAN;
    let last = stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let every = if cfg.checkpoint_every == 0 { cfg.steps } else { cfg.checkpoint_every };
    let model = Loaded::from_checkpoint(&ckpt)?;
    let eval_corpus = match &cfg.eval_data {
        Some(p) => read_corpus(p, &model.splitter())?,
        None => corpus.clone(),
    };
    match model {
        Loaded::Hat { cfg: hc, mut params } => {
            let mut state = ckpt.optimizer.take().unwrap_or_else(|| OptimizerState::new(opts.adamw, &params));
            while ckpt.step < last {
                let end = (ckpt.step + every).min(cfg.steps);
                let chunk = hat_core::training::TrainOptions { steps: end, ..opts };
                let s = train_hat(&hc, &mut params, &mut state, &corpus, &chunk, ckpt.step, &mut write_log)?;
                final_loss = s.final_loss;
                ckpt.step = end;
                ckpt.params = Checkpoint::named_params(&params);
                ckpt.optimizer = Some(state.clone());
                save_checkpoint(&ckpt_dir, &ckpt)?;
            }
            let eval = summarize(&hat_traces(&hc, &params, &eval_corpus, HatEvalOptions::default())?)?;
            Ok(TrainReport {
                steps: ckpt.step,
                final_loss,
                eval,
            })
        }
        Loaded::Baseline {
            cfg: bc,
            mut params,
            vocab,
            splitter,
        } => {
            let mut state = ckpt.optimizer.take().unwrap_or_else(|| OptimizerState::new(opts.adamw, &params));
            while ckpt.step < last {
                let end = (ckpt.step + every).min(cfg.steps);
                let chunk = hat_core::training::TrainOptions { steps: end, ..opts };
                let s = train_baseline(
                    &bc,
                    &vocab,
                    &splitter,
                    &mut params,
                    &mut state,
                    &corpus,
                    &chunk,
                    ckpt.step,
                    &mut write_log,
                )?;
                final_loss = s.final_loss;
                ckpt.step = end;
                ckpt.params = Checkpoint::named_params(&params);
                ckpt.optimizer = Some(state.clone());
                save_checkpoint(&ckpt_dir, &ckpt)?;
            }
            let eval = summarize(&baseline_traces(&bc, &params, &vocab, &splitter, &eval_corpus)?)?;
            Ok(TrainReport {
                steps: ckpt.step,
                final_loss,
                eval,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub metric: &'static str,
    pub corpus: String,
    pub model: String,
    pub value: f64,
    pub n_bytes: usize,
    pub n_words: usize,
}

pub const EVAL_HEADER: &str = "metric,corpus,model,value,n_bytes,n_words";

impl EvalRow {
    fn from_summary(s: &EvalSummary, corpus: &str, model: &str) -> Vec<EvalRow> {
        [
            ("byte_accuracy", s.byte_accuracy),
            ("word_accuracy", s.word_accuracy),
            ("bits_per_byte", s.bits_per_byte),
        ]
        .into_iter()
        .map(|(metric, value)| EvalRow {
            metric,
            corpus: corpus.to_string(),
            model: model.to_string(),
            value,
            n_bytes: s.n_bytes,
            n_words: s.n_words,
        })
        .collect()
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.metric, self.corpus, self.model, self.value, self.n_bytes, self.n_words
        )
    }
}

fn write_rows(path: &Path, rows: &[EvalRow]) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "{EVAL_HEADER}").map_err(io_err(path))?;
    for r in rows {
        writeln!(w, "{}", r.to_csv()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

struct EvalWork<'a> {
    data: &'a Path,
}

impl WithCheckpoint for EvalWork<'_> {
    type Out = Vec<EvalRow>;

    fn run<F: Real>(self, ckpt: Checkpoint<F>) -> Result<Vec<EvalRow>, CliError> {
        let model = Loaded::from_checkpoint(&ckpt)?;
        let corpus = read_corpus(self.data, &model.splitter())?;
        let s = summarize(&model.traces(&corpus)?)?;
        Ok(EvalRow::from_summary(&s, &corpus_name(self.data), family_name(ckpt.config.family)))
    }
}

/// Teacher-forced metrics on a corpus, written to `out_dir/eval.csv`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out_dir: &Path) -> Result<Vec<EvalRow>, CliError> {
    let rows = with_checkpoint(checkpoint, EvalWork { data })?;
    write_rows(&out_dir.join("eval.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub prompt: Vec<u8>,
    pub max_bytes: usize,
    pub temperature: f64,
    pub seed: u64,
    pub kv_cache: bool,
    pub word_cache_size: usize,
    /// Corpus whose most frequent words fill the word cache.
    pub cache_corpus: Option<PathBuf>,
}

impl WithCheckpoint for &GenerateArgs {
    type Out = Vec<u8>;

    fn run<F: Real>(self, ckpt: Checkpoint<F>) -> Result<Vec<u8>, CliError> {
        let Loaded::Hat { cfg, params } = Loaded::from_checkpoint(&ckpt)? else {
            return Err(CliError::Config("generation needs a hierarchical checkpoint".into()));
        };
        let cache = match (&self.cache_corpus, self.word_cache_size) {
            (Some(p), n) if n > 0 => Some(WordCache::build(&cfg, &params, &read_corpus(p, &cfg.splitter)?, n)?),
            _ => None,
        };
        let gen = GenConfig {
            max_new_bytes: self.max_bytes,
            sampling: if self.temperature > 0.0 {
                Sampling::Temperature(self.temperature)
            } else {
                Sampling::Greedy
            },
            seed: self.seed,
            kv_cache: self.kv_cache,
        };
        Ok(generate(&cfg, &params, cache.as_ref(), &self.prompt, &gen)?.bytes)
    }
}

/// Prompt followed by the continuation.
pub fn cmd_generate(checkpoint: &Path, args: &GenerateArgs) -> Result<Vec<u8>, CliError> {
    if !(args.temperature >= 0.0 && args.temperature.is_finite()) {
        return Err(CliError::Config("temperature must be a finite value ≥ 0".into()));
    }
    with_checkpoint(checkpoint, args)
}

/// Length statistics: `stats.csv`, `hist_bpw.csv` and, with a vocabulary,
/// `hist_bpt.csv`.
pub fn cmd_stats(
    data: &Path,
    splitter: &SplitterConfig,
    vocab: Option<&Path>,
    opts: &StatsOptions,
    out_dir: &Path,
) -> Result<CorpusStats, CliError> {
    let corpus = load_corpus(data)?;
    let vocab = match vocab {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Some(BpeVocab::from_text(&text).map_err(|e| CliError::Data(e.to_string()))?)
        }
        None => None,
    };
    let stats = corpus_stats(&corpus, splitter, vocab.as_ref(), opts)?;
    let path = out_dir.join("stats.csv");
    let mut w = create(&path)?;
    stats.write_csv(&mut w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    let path = out_dir.join("hist_bpw.csv");
    let mut w = create(&path)?;
    stats.bpw_hist.write_csv(&mut w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    if let Some(h) = &stats.bpt_hist {
        let path = out_dir.join("hist_bpt.csv");
        let mut w = create(&path)?;
        h.write_csv(&mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
    }
    Ok(stats)
}

pub fn stats_line(stats: &CorpusStats) -> String {
    let bpt = stats
        .bytes_per_token()
        .map(|b| format!("{b:.4}"))
        .unwrap_or_else(|_| "n/a".into());
    format!(
        "documents={} bytes_per_word={:.4} bytes_per_token={} mean_bytes={:.1} mean_words={:.1}",
        stats.sample_size(),
        stats.bytes_per_word(),
        bpt,
        stats.mean_bytes(),
        stats.mean_words()
    )
}

/// Where the matcher takes its document lengths from.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchStats {
    /// A `stats.csv` file with token counts.
    File(PathBuf),
    /// One document of `doc_tokens` tokens at the given rates.
    Rates {
        bytes_per_token: f64,
        words_per_token: f64,
        doc_tokens: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchArgs {
    pub baseline_size: u64,
    pub char_heads: u64,
    pub char_layers: u64,
    pub head_size: u64,
    pub vocab_size: u64,
    pub stats: MatchStats,
    pub min: u64,
    pub max: u64,
}

impl MatchArgs {
    /// Compute-matched rows at the reference scales: baseline size and
    /// encoder/decoder heads and layers.
    pub fn preset(name: &str) -> Option<Self> {
        let (baseline_size, char_heads, char_layers) = match name {
            "1b" => (16, 6, 3),
            "3b" => (24, 6, 3),
            "7b" => (32, 8, 4),
            _ => return None,
        };
        Some(MatchArgs {
            baseline_size,
            char_heads,
            char_layers,
            head_size: 128,
            vocab_size: 65_536,
            stats: MatchStats::Rates {
                bytes_per_token: 4.35,
                words_per_token: 0.69,
                doc_tokens: 4096,
            },
            min: 1,
            max: 64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub result: MatchResult,
    pub kv_cache_ratio: f64,
}

impl MatchReport {
    pub fn line(&self) -> String {
        let r = &self.result;
        format!(
            "backbone heads=layers={} hidden={} baseline_cost={:.6e} hierarchical_cost={:.6e} deviation={:.4} within_5pct={} kv_cache_ratio={:.4}",
            r.size,
            r.shape.backbone_hidden,
            r.baseline_cost,
            r.hierarchical_cost,
            r.deviation,
            r.within_tolerance(),
            self.kv_cache_ratio
        )
    }
}

/// Backbone size search, with every candidate written to `match.csv`.
pub fn cmd_match(args: &MatchArgs, out_dir: &Path) -> Result<MatchReport, CliError> {
    let stats = match &args.stats {
        MatchStats::File(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            CorpusStats::read_csv(&text, HISTOGRAM_BIN_WIDTH).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        MatchStats::Rates {
            bytes_per_token,
            words_per_token,
            doc_tokens,
        } => {
            let words = (*doc_tokens as f64 * words_per_token).round() as u64;
            let bytes = (*doc_tokens as f64 * bytes_per_token).round() as u64;
            CorpusStats::from_docs(vec![DocLengths::new(bytes, *doc_tokens, words)], HISTOGRAM_BIN_WIDTH)
        }
    };
    if args.min > args.max {
        return Err(CliError::Config("empty search range".into()));
    }
    let n = args.baseline_size;
    let baseline = BaselineShape::new(n, n * args.head_size, args.vocab_size);
    let enc_dec = HierShape::new(0, 0, args.char_layers, args.char_heads * args.head_size);
    let result = match_backbone(&baseline, &enc_dec, args.head_size, &stats, args.min..=args.max)?;
    let kv = kv_cache_ratio(&baseline, &result.shape, &stats)?;
    let path = out_dir.join("match.csv");
    let mut w = create(&path)?;
    writeln!(w, "size,hierarchical_cost,baseline_cost,deviation").map_err(io_err(&path))?;
    for (size, cost) in &result.candidates {
        let dev = (cost - result.baseline_cost).abs() / result.baseline_cost;
        writeln!(w, "{size},{cost},{},{dev}", result.baseline_cost).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(MatchReport {
        result,
        kv_cache_ratio: kv,
    })
}

pub fn parse_perturb_kind(s: &str) -> Result<PerturbKind, CliError> {
    match s {
        "permute" => Ok(PerturbKind::Permute),
        "randomize" => Ok(PerturbKind::Randomize),
        "delete" => Ok(PerturbKind::Delete),
        "all_caps" => Ok(PerturbKind::AllCaps),
        _ => Err(CliError::Config(format!(
            "unknown perturbation {s:?} (permute, randomize, delete, all_caps)"
        ))),
    }
}

pub fn kind_name(k: PerturbKind) -> &'static str {
    match k {
        PerturbKind::Permute => "permute",
        PerturbKind::Randomize => "randomize",
        PerturbKind::Delete => "delete",
        PerturbKind::AllCaps => "all_caps",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDelta {
    pub kind: PerturbKind,
    pub metric: &'static str,
    pub clean: f64,
    pub perturbed: f64,
}

struct PerturbWork<'a> {
    data: &'a Path,
    kinds: &'a [PerturbKind],
    fraction: f64,
    seed: u64,
}

impl WithCheckpoint for PerturbWork<'_> {
    type Out = (Vec<EvalRow>, Vec<PerturbDelta>);

    fn run<F: Real>(self, ckpt: Checkpoint<F>) -> Result<Self::Out, CliError> {
        let model = Loaded::from_checkpoint(&ckpt)?;
        let corpus = read_corpus(self.data, &model.splitter())?;
        let family = family_name(ckpt.config.family);
        let clean = summarize(&model.traces(&corpus)?)?;
        let mut rows = EvalRow::from_summary(&clean, "clean", family);
        let mut deltas = Vec::new();
        for &kind in self.kinds {
            let spec = PerturbSpec {
                kind,
                fraction: self.fraction,
                seed: self.seed,
            };
            let noisy = perturb_corpus(&corpus, &spec)?;
            let s = summarize(&model.traces(&noisy)?)?;
            for (metric, a, b) in [
                ("byte_accuracy", clean.byte_accuracy, s.byte_accuracy),
                ("word_accuracy", clean.word_accuracy, s.word_accuracy),
                ("bits_per_byte", clean.bits_per_byte, s.bits_per_byte),
            ] {
                deltas.push(PerturbDelta {
                    kind,
                    metric,
                    clean: a,
                    perturbed: b,
                });
            }
            rows.extend(EvalRow::from_summary(&s, kind_name(kind), family));
        }
        Ok((rows, deltas))
    }
}

/// Metrics on the clean corpus and on each perturbed copy, written to
/// `perturb_eval.csv` and `perturb_deltas.csv`.
pub fn cmd_perturb_eval(
    checkpoint: &Path,
    data: &Path,
    kinds: &[PerturbKind],
    fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PerturbDelta>, CliError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CliError::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let (rows, deltas) = with_checkpoint(
        checkpoint,
        PerturbWork {
            data,
            kinds,
            fraction,
            seed,
        },
    )?;
    write_rows(&out_dir.join("perturb_eval.csv"), &rows)?;
    let path = out_dir.join("perturb_deltas.csv");
    let mut w = create(&path)?;
    writeln!(w, "perturbation,metric,clean,perturbed,delta").map_err(io_err(&path))?;
    for d in &deltas {
        writeln!(
            w,
            "{},{},{},{},{}",
            kind_name(d.kind),
            d.metric,
            d.clean,
            d.perturbed,
            d.perturbed - d.clean
        )
        .map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(deltas)
}

/// Settings of one grid point and the config they produce.
pub type GridRun = (Vec<(String, String)>, RunConfig);

/// Cartesian product of a grid file whose lines read `key = v1, v2, …`.
pub fn expand_grid(base: &RunConfig, grid: &str) -> Result<Vec<GridRun>, CliError> {
    let axes: Vec<(String, Vec<String>)> = parse_pairs(grid)?
        .into_iter()
        .map(|(k, v)| (k, v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()))
        .collect();
    if let Some((k, _)) = axes.iter().find(|(_, vs)| vs.is_empty()) {
        return Err(CliError::Config(format!("grid key {k} has no values")));
    }
    let mut runs: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in &axes {
        runs = runs
            .into_iter()
            .flat_map(|r| {
                vs.iter().map(move |v| {
                    let mut r = r.clone();
                    r.push((k.clone(), v.clone()));
                    r
                })
            })
            .collect();
    }
    runs.into_iter()
        .map(|settings| {
            let mut cfg = base.clone();
            for (k, v) in &settings {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok((settings, cfg))
        })
        .collect()
}

/// Trains every grid point under `out_dir/run_NNN` and tabulates the final
/// metrics in `sweep.csv`.
pub fn cmd_sweep(base: &RunConfig, grid: &str, out_dir: &Path) -> Result<Vec<TrainReport>, CliError> {
    let runs = expand_grid(base, grid)?;
    let keys: Vec<String> = runs.first().map(|(s, _)| s.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let path = out_dir.join("sweep.csv");
    let mut w = create(&path)?;
    let mut header = vec!["run".to_string()];
    header.extend(keys);
    header.extend(["final_loss", "byte_accuracy", "word_accuracy", "bits_per_byte"].map(String::from));
    writeln!(w, "{}", header.join(",")).map_err(io_err(&path))?;
    let mut reports = Vec::new();
    for (i, (settings, cfg)) in runs.iter().enumerate() {
        let name = format!("run_{i:03}");
        let r = cmd_train(cfg, &out_dir.join(&name), false)?;
        let mut row = vec![name];
        row.extend(settings.iter().map(|(_, v)| v.clone()));
        row.extend(
            [r.final_loss, r.eval.byte_accuracy, r.eval.word_accuracy, r.eval.bits_per_byte].map(|x| x.to_string()),
        );
        writeln!(w, "{}", row.join(",")).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        reports.push(r);
    }
    Ok(reports)
}

/// Trains a BPE vocabulary and writes it to `output`. Returns a warning when
/// the corpus ran out of repeated pairs early.
pub fn cmd_bpe_train(data: &Path, vocab_size: usize, output: &Path) -> Result<Option<String>, CliError> {
    let corpus = load_corpus(data)?;
    let t = train_bpe(&corpus, vocab_size).map_err(|e| CliError::Config(e.to_string()))?;
    let mut w = create(output)?;
    w.write_all(t.vocab.to_text().as_bytes()).map_err(io_err(output))?;
    w.flush().map_err(io_err(output))?;
    Ok(t.warning.map(|w| format!("{w:?}")))
}
