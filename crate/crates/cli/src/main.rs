use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hat_cli::*;
use hat_core::cost_model::{StatsOptions, HISTOGRAM_BIN_WIDTH};
use hat_core::persistence::RunConfig;

#[derive(Parser)]
#[command(name = "hat", version, about = "Hierarchical byte-level language models")]
struct Cli {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Config override, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoint and log go to the output directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Return after the first checkpoint at or past this step.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Teacher-forced accuracy and bits per byte.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Continue a prompt with a hierarchical model.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_bytes: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        no_kv_cache: bool,
        #[arg(long)]
        word_cache_size: Option<usize>,
        /// Corpus that fills the word cache.
        #[arg(long)]
        cache_corpus: Option<PathBuf>,
    },
    /// Bytes per word and per token over a corpus.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = HISTOGRAM_BIN_WIDTH)]
        bin_width: f64,
    },
    /// Size a hierarchical backbone to match a baseline's compute.
    Match(MatchCli),
    /// Accuracy under input perturbations.
    PerturbEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma separated: permute, randomize, delete, all_caps.
        #[arg(long, default_value = "permute,randomize,delete,all_caps")]
        kinds: String,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
    /// Train every point of a grid.
    Sweep {
        /// Lines of `key = v1, v2, ...`.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Train a BPE vocabulary.
    BpeTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct MatchCli {
    /// Reference size: 1b, 3b or 7b.
    #[arg(long)]
    preset: Option<String>,
    /// Baseline heads (= layers).
    #[arg(long)]
    baseline_size: Option<u64>,
    #[arg(long)]
    char_heads: Option<u64>,
    #[arg(long)]
    char_layers: Option<u64>,
    #[arg(long)]
    head_size: Option<u64>,
    #[arg(long)]
    vocab_size: Option<u64>,
    /// `stats.csv` from `hat stats` with a vocabulary.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    bytes_per_token: Option<f64>,
    #[arg(long)]
    words_per_token: Option<f64>,
    #[arg(long, default_value_t = 1)]
    min: u64,
    #[arg(long, default_value_t = 64)]
    max: u64,
}

impl MatchCli {
    fn resolve(self) -> Result<MatchArgs, CliError> {
        let mut a = match &self.preset {
            Some(p) => MatchArgs::preset(p).ok_or_else(|| CliError::Config(format!("unknown preset {p:?}")))?,
            None => {
                let need = |v: Option<u64>, name: &str| {
                    v.ok_or_else(|| CliError::Config(format!("--{name} is required without --preset")))
                };
                let mut a = MatchArgs::preset("1b").expect("preset");
                a.baseline_size = need(self.baseline_size, "baseline-size")?;
                a.char_heads = need(self.char_heads, "char-heads")?;
                a.char_layers = need(self.char_layers, "char-layers")?;
                a
            }
        };
        if let Some(v) = self.head_size {
            a.head_size = v;
        }
        if let Some(v) = self.vocab_size {
            a.vocab_size = v;
        }
        if let Some(p) = self.stats {
            a.stats = MatchStats::File(p);
        } else if let MatchStats::Rates {
            bytes_per_token,
            words_per_token,
            ..
        } = &mut a.stats
        {
            if let Some(v) = self.bytes_per_token {
                *bytes_per_token = v;
            }
            if let Some(v) = self.words_per_token {
                *words_per_token = v;
            }
        }
        a.min = self.min;
        a.max = self.max;
        Ok(a)
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = run_config(&cli)?;
    let out = &cli.out_dir;
    match cli.command {
        Command::Train {
            data,
            resume,
            stop_after,
        } => {
            let mut cfg = cfg;
            if data.is_some() {
                cfg.train_data = data;
            }
            println!("{}", cmd_train_until(&cfg, out, resume, stop_after)?.line());
        }
        Command::Eval { checkpoint, data } => {
            for r in cmd_eval(&checkpoint, &data, out)? {
                println!("{} {}={:.6}", r.corpus, r.metric, r.value);
            }
        }
        Command::Generate {
            checkpoint,
            prompt,
            max_bytes,
            temperature,
            no_kv_cache,
            word_cache_size,
            cache_corpus,
        } => {
            let args = GenerateArgs {
                prompt: prompt.into_bytes(),
                max_bytes: max_bytes.unwrap_or(cfg.max_new_bytes),
                temperature: temperature.unwrap_or(cfg.temperature),
                seed: cfg.seed,
                kv_cache: cfg.kv_cache && !no_kv_cache,
                word_cache_size: word_cache_size.unwrap_or(cfg.word_cache_size),
                cache_corpus,
            };
            let bytes = cmd_generate(&checkpoint, &args)?;
            let mut stdout = std::io::stdout();
            stdout
                .write_all(&bytes)
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| CliError::Other(e.to_string()))?;
        }
        Command::Stats {
            data,
            vocab,
            sample,
            bin_width,
        } => {
            let opts = StatsOptions {
                sample,
                seed: cfg.seed,
                bin_width,
            };
            let stats = cmd_stats(&data, &cfg.splitter()?, vocab.as_deref(), &opts, out)?;
            println!("{}", stats_line(&stats));
        }
        Command::Match(m) => println!("{}", cmd_match(&m.resolve()?, out)?.line()),
        Command::PerturbEval {
            checkpoint,
            data,
            kinds,
            fraction,
        } => {
            let kinds = kinds
                .split(',')
                .map(|k| parse_perturb_kind(k.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            for d in cmd_perturb_eval(&checkpoint, &data, &kinds, fraction, cfg.seed, out)? {
                println!(
                    "{} {} clean={:.6} perturbed={:.6} delta={:+.6}",
                    kind_name(d.kind),
                    d.metric,
                    d.clean,
                    d.perturbed,
                    d.perturbed - d.clean
                );
            }
        }
        Command::Sweep { grid } => {
            let text = std::fs::read_to_string(&grid).map_err(|e| CliError::Config(format!("{}: {e}", grid.display())))?;
            for (i, r) in cmd_sweep(&cfg, &text, out)?.iter().enumerate() {
                println!("run_{i:03} {}", r.line());
            }
        }
        Command::BpeTrain {
            data,
            vocab_size,
            output,
        } => {
            if let Some(w) = cmd_bpe_train(&data, vocab_size, &output)? {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
