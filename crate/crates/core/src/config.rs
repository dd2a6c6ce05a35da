//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{DEFAULT_MAX_CHUNK_CHARS, DEFAULT_MAX_CHUNK_MENTIONS};
use crate::encoder::{Pooling, DEFAULT_DIM, DEFAULT_VOCAB, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::label_index::DEFAULT_LABEL_BATCH;
use crate::metric::{LossKind, LossSpec, SimilarityKind, SimilaritySpec};
use crate::verbalizer::Format;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    InBatch,
    Hard,
}

impl NegativeMode {
    pub fn name(self) -> &'static str {
        match self {
            NegativeMode::InBatch => "in_batch",
            NegativeMode::Hard => "hard",
        }
    }
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_batch" => Ok(NegativeMode::InBatch),
            "hard" => Ok(NegativeMode::Hard),
            _ => Err(Error::Config(format!("unknown negative mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeCount {
    Fixed(usize),
    Dynamic,
}

impl NegativeCount {
    fn render(self) -> String {
        match self {
            NegativeCount::Fixed(k) => k.to_string(),
            NegativeCount::Dynamic => "dynamic".into(),
        }
    }
}

impl FromStr for NegativeCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(NegativeCount::Dynamic);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(NegativeCount::Fixed(k)),
            _ => Err(Error::Config(format!(
                "neg_count must be 'dynamic' or a positive integer, got '{s}'"
            ))),
        }
    }
}

/// When label embeddings are refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshPolicy {
    /// Full refresh at every epoch start and every `refresh_interval_spans`
    /// spans, plus on-the-fly write-back of every label used in a step.
    Frequent,
    /// Full refresh at epoch start only.
    Epoch,
}

impl RefreshPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RefreshPolicy::Frequent => "frequent",
            RefreshPolicy::Epoch => "epoch",
        }
    }
}

impl FromStr for RefreshPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequent" => Ok(RefreshPolicy::Frequent),
            "epoch" => Ok(RefreshPolicy::Epoch),
            _ => Err(Error::Config(format!("unknown refresh policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeConfig {
    pub enabled: bool,
    pub insert_fraction: f64,
    pub corrupt_rate: f64,
    pub switch_after_spans: u64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            enabled: false,
            insert_fraction: 1.0 / 3.0,
            corrupt_rate: 0.10,
            switch_after_spans: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_docs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub similarity: SimilarityKind,
    pub loss: LossKind,
    /// Triplet margin; `None` picks the metric's default.
    pub margin: Option<f64>,
    pub pooling: Pooling,
    pub negatives: NegativeMode,
    pub neg_count: NegativeCount,
    pub neg_budget: usize,
    pub refresh_interval_spans: u64,
    pub refresh_policy: RefreshPolicy,
    pub label_batch: usize,
    pub iterative: IterativeConfig,
    pub seed: u64,
    pub format: Format,
    pub dim: usize,
    pub window: usize,
    pub vocab: usize,
    pub max_chunk_mentions: usize,
    pub max_chunk_chars: usize,
    /// Iterative prediction re-scores resolved mentions each round.
    pub rescore_resolved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_docs: 32,
            lr: 0.05,
            epochs: 10,
            similarity: SimilarityKind::Euclidean,
            loss: LossKind::Triplet,
            margin: None,
            pooling: Pooling::Mean,
            negatives: NegativeMode::Hard,
            neg_count: NegativeCount::Dynamic,
            neg_budget: 256,
            refresh_interval_spans: 2_000,
            refresh_policy: RefreshPolicy::Frequent,
            label_batch: DEFAULT_LABEL_BATCH,
            iterative: IterativeConfig::default(),
            seed: 0,
            format: Format::TitleDesc,
            dim: DEFAULT_DIM,
            window: DEFAULT_WINDOW,
            vocab: DEFAULT_VOCAB,
            max_chunk_mentions: DEFAULT_MAX_CHUNK_MENTIONS,
            max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS,
            rescore_resolved: true,
        }
    }
}

/// Every configuration key with a short description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("batch_docs", "documents (chunks) per update step"),
    ("lr", "gradient-descent step size"),
    ("epochs", "passes over the training corpus"),
    ("similarity", "cosine | dot | euclidean"),
    ("loss", "triplet | cross_entropy"),
    ("margin", "triplet margin (default: 0.5 cosine, 3.0 otherwise)"),
    ("pooling", "mean | first_last"),
    ("negatives", "in_batch | hard"),
    ("neg_count", "negatives per mention: a positive integer or 'dynamic'"),
    ("neg_budget", "negative embeddings per batch in dynamic mode"),
    ("refresh_interval_spans", "spans between full label-cache refreshes"),
    ("refresh_policy", "frequent | epoch"),
    ("label_batch", "labels encoded per refresh batch"),
    ("iterative", "train with verbalization insertions (true | false)"),
    ("insert_fraction", "fraction of chunk mentions receiving insertions"),
    ("corrupt_rate", "probability an early gold insertion is replaced by a wrong label"),
    ("switch_after_spans", "spans after which predictions replace gold insertions"),
    ("seed", "seed for every stochastic component"),
    ("format", "title | title_desc | title_cat | title_desc_cat | title_para100 | title_para500"),
    ("dim", "embedding width"),
    ("window", "context radius in tokens"),
    ("vocab", "hash-bucket vocabulary size (power of two)"),
    ("max_chunk_mentions", "mentions per chunk"),
    ("max_chunk_chars", "characters per chunk"),
    ("rescore_resolved", "iterative prediction re-scores resolved mentions (true | false)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_fraction(key: &str, value: &str) -> Result<f64> {
    match value.split_once('/') {
        Some((n, d)) => {
            let n: f64 = parse(key, n.trim())?;
            let d: f64 = parse(key, d.trim())?;
            Ok(n / d)
        }
        None => parse(key, value),
    }
}

impl TrainConfig {
    pub fn sim_spec(&self) -> SimilaritySpec {
        SimilaritySpec::new(self.similarity)
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss,
            margin: self
                .margin
                .unwrap_or_else(|| self.similarity.default_margin()),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "batch_docs" => self.batch_docs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "similarity" => self.similarity = value.parse()?,
            "loss" => self.loss = value.parse()?,
            "margin" => {
                self.margin = match value {
                    "default" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "pooling" => self.pooling = value.parse()?,
            "negatives" => self.negatives = value.parse()?,
            "neg_count" => self.neg_count = value.parse()?,
            "neg_budget" => self.neg_budget = parse(key, value)?,
            "refresh_interval_spans" => self.refresh_interval_spans = parse(key, value)?,
            "refresh_policy" => self.refresh_policy = value.parse()?,
            "label_batch" => self.label_batch = parse(key, value)?,
            "iterative" => self.iterative.enabled = parse(key, value)?,
            "insert_fraction" => self.iterative.insert_fraction = parse_fraction(key, value)?,
            "corrupt_rate" => self.iterative.corrupt_rate = parse_fraction(key, value)?,
            "switch_after_spans" => self.iterative.switch_after_spans = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "format" => self.format = value.parse()?,
            "dim" => self.dim = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "max_chunk_mentions" => self.max_chunk_mentions = parse(key, value)?,
            "max_chunk_chars" => self.max_chunk_chars = parse(key, value)?,
            "rescore_resolved" => self.rescore_resolved = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "batch_docs" => self.batch_docs.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "similarity" => self.similarity.name().into(),
            "loss" => self.loss.name().into(),
            "margin" => self
                .margin
                .map_or_else(|| "default".to_string(), |m| m.to_string()),
            "pooling" => self.pooling.name().into(),
            "negatives" => self.negatives.name().into(),
            "neg_count" => self.neg_count.render(),
            "neg_budget" => self.neg_budget.to_string(),
            "refresh_interval_spans" => self.refresh_interval_spans.to_string(),
            "refresh_policy" => self.refresh_policy.name().into(),
            "label_batch" => self.label_batch.to_string(),
            "iterative" => self.iterative.enabled.to_string(),
            "insert_fraction" => self.iterative.insert_fraction.to_string(),
            "corrupt_rate" => self.iterative.corrupt_rate.to_string(),
            "switch_after_spans" => self.iterative.switch_after_spans.to_string(),
            "seed" => self.seed.to_string(),
            "format" => self.format.name().into(),
            "dim" => self.dim.to_string(),
            "window" => self.window.to_string(),
            "vocab" => self.vocab.to_string(),
            "max_chunk_mentions" => self.max_chunk_mentions.to_string(),
            "max_chunk_chars" => self.max_chunk_chars.to_string(),
            "rescore_resolved" => self.rescore_resolved.to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_docs", self.batch_docs),
            ("neg_budget", self.neg_budget),
            ("label_batch", self.label_batch),
            ("dim", self.dim),
            ("max_chunk_mentions", self.max_chunk_mentions),
            ("max_chunk_chars", self.max_chunk_chars),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        if self.refresh_interval_spans == 0 {
            return Err(Error::Config(
                "refresh_interval_spans must be at least 1".into(),
            ));
        }
        if !self.vocab.is_power_of_two() {
            return Err(Error::Config("vocab must be a power of two".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if let Some(m) = self.margin {
            if !m.is_finite() {
                return Err(Error::Config("margin must be finite".into()));
            }
        }
        let it = &self.iterative;
        if !(0.0..=1.0).contains(&it.corrupt_rate) {
            return Err(Error::Config("corrupt_rate must lie in [0, 1]".into()));
        }
        if !(it.insert_fraction > 0.0 && it.insert_fraction < 1.0) {
            return Err(Error::Config("insert_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// All keys in `CONFIG_KEYS` order, one `key = value` per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (key, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }
}
