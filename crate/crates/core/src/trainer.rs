//! Batching, negative selection, gradient steps and cache-refresh
//! scheduling.
//!
//! Every stochastic choice draws from one seeded generator owned by the
//! trainer, and all accumulation happens in a fixed order, so a run is a
//! pure function of its inputs and seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{NegativeCount, NegativeMode, RefreshPolicy, TrainConfig};
use crate::corpus::{chunk_document, Chunk, Document, LabelSet};
use crate::encoder::{pool_backward, encoder_backward, EncoderGrads, LabelInput, Model};
use crate::error::{Error, Result};
use crate::label_index::{sample_in_batch_negatives, LabelCache};
use crate::metric::loss_gradients;
use crate::predictor::{EncodedMentions, PredictionState, Predictor};
use crate::verbalizer::verbalize;

pub const CLIP_NORM: f64 = 1.0;

/// Shuffles documents with `seed`, chunks them, and groups the chunks into
/// batches of at most `batch_docs`.
pub fn make_batches(
    corpus: &[Document],
    batch_docs: usize,
    limits: (usize, usize),
    seed: u64,
) -> Result<Vec<Vec<Chunk>>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chunks = Vec::new();
    for i in order {
        chunks.extend(chunk_document(&corpus[i], limits.0, limits.1)?);
    }
    Ok(chunks
        .chunks(batch_docs.max(1))
        .map(<[Chunk]>::to_vec)
        .collect())
}

/// Negatives per mention under a fixed budget of negative embeddings.
pub fn dynamic_negative_count(batch_mentions: usize, neg_budget: usize) -> usize {
    (neg_budget / batch_mentions.max(1)).max(1)
}

fn ceil_fraction(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub skipped_unlinkable: u64,
    pub skipped_no_negatives: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Mean loss over the mentions that contributed.
    pub loss: f64,
    pub used_mentions: usize,
    pub batch_mentions: usize,
    pub negatives_used: BTreeSet<String>,
    pub written_back: BTreeSet<String>,
    pub refreshes: u64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// A chunk after training-time insertions.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertedChunk {
    pub chunk: Chunk,
    /// Mentions whose verbalization was inserted; they carry no loss.
    pub excluded: BTreeSet<usize>,
    /// (mention, inserted label id) in insertion order.
    pub inserted: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub dev_acc: Option<f64>,
    pub refreshes: u64,
    pub spans: u64,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub cache: LabelCache,
    /// Mention spans consumed so far.
    pub spans: u64,
    /// Full cache refreshes performed so far.
    pub refreshes: u64,
    pub diagnostics: Diagnostics,
    labels: &'a LabelSet,
    inputs: Vec<LabelInput>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(labels: &'a LabelSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.vocab, config.dim, config.window, config.seed);
        Self::with_model(labels, config, model)
    }

    pub fn with_model(labels: &'a LabelSet, config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        if model.dim() != config.dim || model.vocab() != config.vocab {
            return Err(Error::Config("model shape does not match configuration".into()));
        }
        let inputs = label_inputs(labels, &config)?;
        let cache = LabelCache::new(
            labels.ids().map(String::from).collect(),
            config.dim,
            config.pooling,
            config.sim_spec(),
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
        Ok(Trainer {
            config,
            model,
            cache,
            spans: 0,
            refreshes: 0,
            diagnostics: Diagnostics::default(),
            labels,
            inputs,
            rng,
        })
    }

    pub fn labels(&self) -> &LabelSet {
        self.labels
    }

    pub fn label_inputs(&self) -> &[LabelInput] {
        &self.inputs
    }

    pub fn full_refresh(&mut self) -> Result<()> {
        self.cache.full_refresh(
            &self.model.label,
            &self.inputs,
            self.config.label_batch,
            self.spans,
        )?;
        self.refreshes += 1;
        Ok(())
    }

    fn negatives_per_mention(&self, batch_mentions: usize) -> usize {
        match self.config.neg_count {
            NegativeCount::Fixed(k) => k,
            NegativeCount::Dynamic => dynamic_negative_count(batch_mentions, self.config.neg_budget),
        }
    }

    /// One accumulated gradient step over `batch`. `excluded[i]` lists
    /// mentions of chunk `i` that must not contribute to the loss; it may be
    /// shorter than the batch.
    pub fn train_step(&mut self, batch: &[Chunk], excluded: &[BTreeSet<usize>]) -> Result<StepReport> {
        let (grads, mut report, fresh) = self.compute_step(batch, excluded)?;
        if let Some((mut mention_grads, mut label_grads)) = grads {
            let norm = (mention_grads.norm_sq() + label_grads.norm_sq()).sqrt();
            report.grad_norm = norm;
            if norm > CLIP_NORM {
                mention_grads.scale(CLIP_NORM / norm);
                label_grads.scale(CLIP_NORM / norm);
            }
            self.model.mention.apply(&mention_grads, self.config.lr);
            self.model.label.apply(&label_grads, self.config.lr);
        }

        if self.config.refresh_policy == RefreshPolicy::Frequent {
            for (row, emb) in &fresh {
                let id = self.cache.ids()[*row].clone();
                self.cache.write_back(&id, emb)?;
                report.written_back.insert(id);
            }
        }

        let before = self.spans;
        self.spans += report.batch_mentions as u64;
        if self.config.refresh_policy == RefreshPolicy::Frequent {
            let interval = self.config.refresh_interval_spans;
            let crossings = self.spans / interval - before / interval;
            for _ in 0..crossings {
                self.full_refresh()?;
            }
            report.refreshes = crossings;
        }
        Ok(report)
    }

    #[allow(clippy::type_complexity)]
    fn compute_step(
        &mut self,
        batch: &[Chunk],
        excluded: &[BTreeSet<usize>],
    ) -> Result<(
        Option<(EncoderGrads, EncoderGrads)>,
        StepReport,
        BTreeMap<usize, Vec<f64>>,
    )> {
        let pooling = self.config.pooling;
        let sim = self.config.sim_spec();
        let loss_spec = self.config.loss_spec();
        let batch_mentions: usize = batch.iter().map(|c| c.mentions.len()).sum();
        let k = self.negatives_per_mention(batch_mentions);
        let mut report = StepReport {
            batch_mentions,
            ..Default::default()
        };
        let batch_golds: Vec<String> = batch
            .iter()
            .flat_map(|c| &c.mentions)
            .filter(|m| self.labels.contains(&m.gold))
            .map(|m| m.gold.clone())
            .collect();

        struct Item {
            chunk: usize,
            mention: usize,
            anchor: Vec<f64>,
            gold: usize,
            negatives: Vec<usize>,
        }

        let mut encoded: Vec<Option<EncodedMentions>> = Vec::with_capacity(batch.len());
        let mut items = Vec::new();
        for (ci, chunk) in batch.iter().enumerate() {
            let skip = excluded.get(ci);
            let active: Vec<usize> = (0..chunk.mentions.len())
                .filter(|i| !skip.is_some_and(|s| s.contains(i)))
                .collect();
            if active.is_empty() {
                encoded.push(None);
                continue;
            }
            let enc = EncodedMentions::new(
                &chunk.text,
                chunk.mentions.iter().map(|m| (m.start, m.end)),
                &self.model.mention,
            )?;
            for mi in active {
                let m = &chunk.mentions[mi];
                let Some(gold) = self.labels.position(&m.gold) else {
                    self.diagnostics.skipped_unlinkable += 1;
                    continue;
                };
                let anchor = enc.embedding(mi, pooling)?;
                let negatives: Vec<usize> = match self.config.negatives {
                    NegativeMode::Hard => self
                        .cache
                        .mine_hard_negatives(&anchor, &m.gold, k)?
                        .into_iter()
                        .filter_map(|(id, _)| self.cache.position(&id))
                        .collect(),
                    NegativeMode::InBatch => {
                        sample_in_batch_negatives(&batch_golds, &m.gold, k, &mut self.rng)
                            .into_iter()
                            .filter_map(|id| self.cache.position(&id))
                            .collect()
                    }
                };
                if negatives.is_empty() {
                    self.diagnostics.skipped_no_negatives += 1;
                    continue;
                }
                items.push(Item {
                    chunk: ci,
                    mention: mi,
                    anchor,
                    gold,
                    negatives,
                });
            }
            encoded.push(Some(enc));
        }

        if items.is_empty() {
            return Ok((None, report, BTreeMap::new()));
        }

        // fresh label embeddings for every gold and negative in the batch
        let rows: BTreeSet<usize> = items
            .iter()
            .flat_map(|it| std::iter::once(it.gold).chain(it.negatives.iter().copied()))
            .collect();
        let mut fresh: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &row in &rows {
            fresh.insert(row, self.inputs[row].embed(&self.model.label, pooling)?.vector);
        }

        let dim = self.config.dim;
        let scale = 1.0 / items.len() as f64;
        let mut token_grads: Vec<Vec<f64>> = encoded
            .iter()
            .map(|e| e.as_ref().map_or_else(Vec::new, |e| vec![0.0; e.tokens.len() * dim]))
            .collect();
        let mut label_upstream: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut total_loss = 0.0;
        let axpy = |acc: &mut Vec<f64>, g: &[f64]| {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
        };
        for it in &items {
            let negs: Vec<&[f64]> = it.negatives.iter().map(|r| fresh[r].as_slice()).collect();
            let lg = loss_gradients(&it.anchor, &fresh[&it.gold], &negs, &loss_spec, &sim)?;
            total_loss += lg.loss;
            let enc = encoded[it.chunk].as_ref().expect("chunk with items is encoded");
            let mut pooled = it.anchor.clone();
            pooled.iter_mut().zip(&lg.anchor).for_each(|(p, g)| *p = scale * g);
            pool_backward(
                &pooled,
                enc.ranges[it.mention].clone(),
                pooling,
                &mut token_grads[it.chunk],
                dim,
            )?;
            let width = lg.positive.len();
            axpy(
                label_upstream.entry(it.gold).or_insert_with(|| vec![0.0; width]),
                &lg.positive,
            );
            for (row, g) in it.negatives.iter().zip(&lg.negatives) {
                axpy(label_upstream.entry(*row).or_insert_with(|| vec![0.0; width]), g);
                report.negatives_used.insert(self.cache.ids()[*row].clone());
            }
        }

        let mut mention_grads = EncoderGrads::zeros(dim);
        for (enc, grads) in encoded.iter().zip(&token_grads) {
            if let Some(enc) = enc {
                mention_grads.add_assign(&encoder_backward(&enc.tokens, &self.model.mention, grads)?);
            }
        }
        let mut label_grads = EncoderGrads::zeros(dim);
        for (row, up) in &label_upstream {
            label_grads.add_assign(&self.inputs[*row].backward(&self.model.label, pooling, up)?);
        }

        report.loss = total_loss * scale;
        report.used_mentions = items.len();
        Ok((Some((mention_grads, label_grads)), report, fresh))
    }

    /// Training-time insertions: per chunk, `insert_fraction` of the mentions
    /// receive a parenthesized verbalization and are excluded from the loss.
    /// Before `switch_after_spans` the inserted label is the gold one,
    /// replaced by a uniformly drawn wrong label with probability
    /// `corrupt_rate`; afterwards it is the current model's prediction,
    /// restricted to predictions scoring above the batch median.
    pub fn apply_iterative_insertions(&mut self, batch: &[Chunk]) -> Result<Vec<InsertedChunk>> {
        let cfg = self.config.iterative.clone();
        let use_predictions = self.spans >= cfg.switch_after_spans;

        let predictions: Vec<Vec<(String, f64)>> = if use_predictions {
            let predictor = Predictor::new(
                &self.model.mention,
                &self.cache,
                self.labels,
                self.config.pooling,
            );
            batch
                .iter()
                .map(|c| {
                    predictor
                        .predict_document(c, None)
                        .map(|ps| ps.into_iter().map(|p| (p.id, p.score)).collect())
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let median = if use_predictions {
            let mut scores: Vec<f64> = predictions.iter().flatten().map(|p| p.1).collect();
            scores.sort_by(f64::total_cmp);
            median_of_sorted(&scores)
        } else {
            f64::NEG_INFINITY
        };

        let mut out = Vec::with_capacity(batch.len());
        for (ci, chunk) in batch.iter().enumerate() {
            let n = chunk.mentions.len();
            let candidates: Vec<usize> = if use_predictions {
                (0..n).filter(|&i| predictions[ci][i].1 > median).collect()
            } else {
                (0..n)
                    .filter(|&i| self.labels.contains(&chunk.mentions[i].gold))
                    .collect()
            };
            let take = ceil_fraction(cfg.insert_fraction, n).min(candidates.len());
            let mut chosen: Vec<usize> = sample(&mut self.rng, candidates.len(), take)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            chosen.sort_unstable();

            let mut state = PredictionState::new(chunk);
            let mut inserted = Vec::with_capacity(chosen.len());
            for &mi in &chosen {
                let label = if use_predictions {
                    predictions[ci][mi].0.clone()
                } else {
                    let gold = &chunk.mentions[mi].gold;
                    if self.labels.len() > 1 && self.rng.gen_bool(cfg.corrupt_rate) {
                        self.random_wrong_label(gold)
                    } else {
                        gold.clone()
                    }
                };
                let record = self
                    .labels
                    .get(&label)
                    .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
                state.insert_verbalization(mi, record)?;
                inserted.push((mi, label));
            }
            out.push(InsertedChunk {
                chunk: state.to_chunk(chunk),
                excluded: chosen.into_iter().collect(),
                inserted,
            });
        }
        Ok(out)
    }

    fn random_wrong_label(&mut self, gold: &str) -> String {
        let records = self.labels.records();
        match self.labels.position(gold) {
            Some(g) => {
                let mut i = self.rng.gen_range(0..records.len() - 1);
                if i >= g {
                    i += 1;
                }
                records[i].id.clone()
            }
            None => records[self.rng.gen_range(0..records.len())].id.clone(),
        }
    }

    /// One-shot accuracy on `dev` with a freshly encoded label cache. The
    /// training cache and refresh counters are left untouched.
    pub fn dev_accuracy(&self, dev: &[Document]) -> Result<f64> {
        let mut cache = self.cache.clone();
        cache.full_refresh(&self.model.label, &self.inputs, self.config.label_batch, self.spans)?;
        let predictor = Predictor::new(&self.model.mention, &cache, self.labels, self.config.pooling);
        let mut total = 0usize;
        let mut correct = 0usize;
        for doc in dev {
            for chunk in chunk_document(doc, self.config.max_chunk_mentions, self.config.max_chunk_chars)? {
                for p in predictor.predict_document(&chunk, None)? {
                    total += 1;
                    correct += (p.id == chunk.mentions[p.mention].gold) as usize;
                }
            }
        }
        if total == 0 {
            return Err(Error::Eval("no mentions".into()));
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.config
            .seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Runs one epoch: a full refresh, then one step per batch.
    pub fn run_epoch(&mut self, epoch: usize, corpus: &[Document], dev: Option<&[Document]>) -> Result<EpochMetrics> {
        self.full_refresh()?;
        let batches = make_batches(
            corpus,
            self.config.batch_docs,
            (self.config.max_chunk_mentions, self.config.max_chunk_chars),
            self.epoch_seed(epoch),
        )?;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in batches {
            let report = if self.config.iterative.enabled {
                let inserted = self.apply_iterative_insertions(&batch)?;
                let excluded: Vec<BTreeSet<usize>> =
                    inserted.iter().map(|c| c.excluded.clone()).collect();
                let chunks: Vec<Chunk> = inserted.into_iter().map(|c| c.chunk).collect();
                self.train_step(&chunks, &excluded)?
            } else {
                self.train_step(&batch, &[])?
            };
            if report.used_mentions > 0 {
                loss_sum += report.loss;
                loss_count += 1;
            }
        }
        let dev_acc = dev.map(|d| self.dev_accuracy(d)).transpose()?;
        Ok(EpochMetrics {
            epoch: epoch + 1,
            loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
            dev_acc,
            refreshes: self.refreshes,
            spans: self.spans,
        })
    }
}

fn median_of_sorted(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => f64::NEG_INFINITY,
        n if n % 2 == 1 => xs[n / 2],
        n => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

/// Tokenized verbalizations for every label, in label-set order.
pub fn label_inputs(labels: &LabelSet, config: &TrainConfig) -> Result<Vec<LabelInput>> {
    let spec = config.format.spec();
    labels
        .records()
        .iter()
        .map(|r| LabelInput::new(&verbalize(r, &spec)?, config.vocab))
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub cache: LabelCache,
    pub diagnostics: Diagnostics,
}

/// Full training run: `config.epochs` epochs, each starting with a full
/// label-cache refresh.
pub fn train(
    corpus: &[Document],
    labels: &LabelSet,
    config: &TrainConfig,
    dev: Option<&[Document]>,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut trainer = Trainer::new(labels, config.clone())?;
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        metrics.push(trainer.run_epoch(epoch, corpus, dev)?);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        cache: trainer.cache,
        diagnostics: trainer.diagnostics,
    })
}
