//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key may appear at most
//! once; unknown keys are errors. Missing keys take the defaults below.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::PersistError;
use crate::models::{BaselineConfig, HatConfig};
use crate::segmentation::{SplitRule, SplitterConfig, DEFAULT_MAX_WORD_LEN};
use crate::training::{lr_for, AdamWConfig, LrSchedule, TrainOptions, DEFAULT_FLOOR, DEFAULT_WARMUP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Hierarchical,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: Family,
    pub dtype: Dtype,
    pub seed: u64,

    pub char_dim: usize,
    pub word_dim: usize,
    pub encoder_layers: usize,
    pub backbone_layers: usize,
    pub decoder_layers: usize,
    pub head_size: usize,

    pub hidden: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub vocab_path: Option<PathBuf>,

    pub split_rule: SplitRule,
    pub max_word_len: usize,

    pub steps: usize,
    pub byte_budget: usize,
    /// `None` derives the peak from the head count.
    pub lr: Option<f64>,
    pub warmup_steps: usize,
    pub lr_start_fraction: f64,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,

    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,

    pub max_new_bytes: usize,
    pub temperature: f64,
    pub word_cache_size: usize,
    pub kv_cache: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        RunConfig {
            family: Family::Hierarchical,
            dtype: Dtype::F32,
            seed: 0,
            char_dim: 64,
            word_dim: 128,
            encoder_layers: 1,
            backbone_layers: 2,
            decoder_layers: 1,
            head_size: 16,
            hidden: 128,
            layers: 2,
            vocab_size: 512,
            vocab_path: None,
            split_rule: SplitRule::Whitespace,
            max_word_len: DEFAULT_MAX_WORD_LEN,
            steps: 1000,
            byte_budget: 16_384,
            lr: None,
            warmup_steps: DEFAULT_WARMUP,
            lr_start_fraction: 0.0,
            lr_floor: DEFAULT_FLOOR,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            checkpoint_every: 0,
            train_data: None,
            eval_data: None,
            max_new_bytes: 256,
            temperature: 0.0,
            word_cache_size: 0,
            kv_cache: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, PersistError> {
    v.parse().map_err(|_| PersistError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, PersistError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(PersistError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

pub fn parse_split_rule(v: &str) -> Result<SplitRule, PersistError> {
    match v {
        "whitespace" => Ok(SplitRule::Whitespace),
        "unicode" => Ok(SplitRule::UnicodeWords),
        _ => match v.strip_prefix("fixed") {
            Some(n) => Ok(SplitRule::FixedSize(parse("split_rule", n)?)),
            None => Err(PersistError::Config(format!(
                "split_rule: expected whitespace, unicode or fixedN, got {v:?}"
            ))),
        },
    }
}

/// Splits config text into ordered key/value pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, PersistError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PersistError::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(o, _)| *o == k) {
            return Err(PersistError::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PersistError> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PersistError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PersistError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PersistError> {
        match key {
            "family" => {
                self.family = match v {
                    "hierarchical" => Family::Hierarchical,
                    "baseline" => Family::Baseline,
                    _ => return Err(PersistError::Config(format!("family: unknown {v:?}"))),
                }
            }
            "dtype" => {
                self.dtype = match v {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(PersistError::Config(format!("dtype: unknown {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "char_dim" => self.char_dim = parse(key, v)?,
            "word_dim" => self.word_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "backbone_layers" => self.backbone_layers = parse(key, v)?,
            "decoder_layers" => self.decoder_layers = parse(key, v)?,
            "head_size" => self.head_size = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "vocab_path" => self.vocab_path = parse_path(v),
            "split_rule" => self.split_rule = parse_split_rule(v)?,
            "max_word_len" => self.max_word_len = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "byte_budget" => self.byte_budget = parse(key, v)?,
            "lr" => self.lr = if v == "auto" { None } else { Some(parse(key, v)?) },
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "lr_start_fraction" => self.lr_start_fraction = parse(key, v)?,
            "lr_floor" => self.lr_floor = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train_data" => self.train_data = parse_path(v),
            "eval_data" => self.eval_data = parse_path(v),
            "max_new_bytes" => self.max_new_bytes = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "word_cache_size" => self.word_cache_size = parse(key, v)?,
            "kv_cache" => self.kv_cache = parse_bool(key, v)?,
            _ => return Err(PersistError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let family = match self.family {
            Family::Hierarchical => "hierarchical",
            Family::Baseline => "baseline",
        };
        let lr = self.lr.map(|l| format!("{l:?}")).unwrap_or_else(|| "auto".into());
        let pairs: Vec<(&str, String)> = vec![
            ("family", family.into()),
            ("dtype", self.dtype.name().into()),
            ("seed", self.seed.to_string()),
            ("char_dim", self.char_dim.to_string()),
            ("word_dim", self.word_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("backbone_layers", self.backbone_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("head_size", self.head_size.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("vocab_path", path(&self.vocab_path)),
            ("split_rule", self.split_rule.to_string()),
            ("max_word_len", self.max_word_len.to_string()),
            ("steps", self.steps.to_string()),
            ("byte_budget", self.byte_budget.to_string()),
            ("lr", lr),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_start_fraction", format!("{:?}", self.lr_start_fraction)),
            ("lr_floor", format!("{:?}", self.lr_floor)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("train_data", path(&self.train_data)),
            ("eval_data", path(&self.eval_data)),
            ("max_new_bytes", self.max_new_bytes.to_string()),
            ("temperature", format!("{:?}", self.temperature)),
            ("word_cache_size", self.word_cache_size.to_string()),
            ("kv_cache", self.kv_cache.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn splitter(&self) -> Result<SplitterConfig, PersistError> {
        SplitterConfig::new(self.split_rule, self.max_word_len).map_err(|e| PersistError::Config(e.to_string()))
    }

    fn check_head_size(&self, dims: &[(&str, usize)]) -> Result<(), PersistError> {
        for (name, d) in dims {
            if self.head_size == 0 || d % self.head_size != 0 {
                return Err(PersistError::Config(format!(
                    "{name} = {d} is not a multiple of head_size = {}",
                    self.head_size
                )));
            }
        }
        Ok(())
    }

    pub fn hat_config(&self) -> Result<HatConfig, PersistError> {
        self.check_head_size(&[("char_dim", self.char_dim), ("word_dim", self.word_dim)])?;
        let cfg = HatConfig::new(
            self.char_dim,
            self.word_dim,
            (self.encoder_layers, self.backbone_layers, self.decoder_layers),
            self.head_size,
            self.splitter()?,
        );
        cfg.validate().map_err(|e| PersistError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn baseline_config(&self, vocab_size: usize) -> Result<BaselineConfig, PersistError> {
        self.check_head_size(&[("hidden", self.hidden)])?;
        let cfg = BaselineConfig::new(vocab_size, self.hidden, self.layers, self.head_size);
        cfg.validate().map_err(|e| PersistError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Heads of the stack whose width sets the learning rate.
    pub fn lr_heads(&self) -> usize {
        let width = match self.family {
            Family::Hierarchical => self.word_dim,
            Family::Baseline => self.hidden,
        };
        width / self.head_size.max(1)
    }

    pub fn train_options(&self) -> TrainOptions {
        let peak = self.lr.unwrap_or_else(|| lr_for(self.lr_heads()));
        let mut schedule = LrSchedule::new(peak, self.warmup_steps, self.steps);
        schedule.floor_fraction = self.lr_floor;
        schedule.start_fraction = self.lr_start_fraction;
        TrainOptions {
            steps: self.steps,
            byte_budget: self.byte_budget,
            schedule,
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
        }
    }

    /// Checks everything that can be checked without data, before any
    /// allocation.
    pub fn validate(&self) -> Result<(), PersistError> {
        match self.family {
            Family::Hierarchical => {
                self.hat_config()?;
            }
            Family::Baseline => {
                self.splitter()?;
                if self.vocab_path.is_none() && self.vocab_size < 256 {
                    return Err(PersistError::Config("vocab_size must be at least 256".into()));
                }
                self.baseline_config(self.vocab_size.max(256))?;
            }
        }
        if self.byte_budget == 0 {
            return Err(PersistError::Config("byte_budget must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(PersistError::Config("temperature must be a finite value ≥ 0".into()));
        }
        self.train_options()
            .schedule
            .validate()
            .map_err(|e| PersistError::Config(e.to_string()))
    }

    /// Keys that fix tensor shapes; two configs with equal values here
    /// produce interchangeable checkpoints.
    pub fn shape_keys(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let family = match self.family {
            Family::Hierarchical => "hierarchical",
            Family::Baseline => "baseline",
        };
        m.insert("family", family.to_string());
        m.insert("head_size", self.head_size.to_string());
        match self.family {
            Family::Hierarchical => {
                m.insert("char_dim", self.char_dim.to_string());
                m.insert("word_dim", self.word_dim.to_string());
                m.insert("encoder_layers", self.encoder_layers.to_string());
                m.insert("backbone_layers", self.backbone_layers.to_string());
                m.insert("decoder_layers", self.decoder_layers.to_string());
                m.insert("split_rule", self.split_rule.to_string());
                m.insert("max_word_len", self.max_word_len.to_string());
            }
            Family::Baseline => {
                m.insert("hidden", self.hidden.to_string());
                m.insert("layers", self.layers.to_string());
            }
        }
        m
    }
}
