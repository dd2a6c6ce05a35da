//! One-shot and iterative inference.
//!
//! Iterative prediction predicts every mention, inserts the verbalizations of
//! the highest-scoring unresolved predictions in parentheses after their
//! mentions, re-encodes the enriched text and repeats until every mention is
//! resolved. A stored prediction is only replaced by a strictly higher score.

use std::collections::BTreeSet;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_document, Chunk, Document, EntityRecord, LabelSet, Mention};
use crate::encoder::{encode, pool_span, tokenize, EncoderParams, Encoded, Pooling, TokenSequence};
use crate::error::{Error, Result};
use crate::label_index::LabelCache;

/// Text placed in parentheses after a mention: the description when the
/// record has one, otherwise the title.
pub fn insertion_text(record: &EntityRecord) -> &str {
    record
        .description
        .as_deref()
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .unwrap_or(&record.title)
}

/// Encoded chunk text with the token range of every mention.
#[derive(Debug, Clone)]
pub struct EncodedMentions {
    pub tokens: TokenSequence,
    pub vectors: Encoded,
    pub ranges: Vec<Range<usize>>,
}

impl EncodedMentions {
    pub fn new(
        text: &str,
        spans: impl IntoIterator<Item = (usize, usize)>,
        params: &EncoderParams,
    ) -> Result<Self> {
        let tokens = tokenize(text, params.vocab);
        let ranges = spans
            .into_iter()
            .map(|(s, e)| tokens.token_range(s, e).ok_or(Error::EmptySpan))
            .collect::<Result<Vec<_>>>()?;
        let vectors = if ranges.is_empty() && tokens.is_empty() {
            Encoded {
                dim: params.dim,
                data: Vec::new(),
            }
        } else {
            encode(&tokens, params)?
        };
        Ok(EncodedMentions {
            tokens,
            vectors,
            ranges,
        })
    }

    pub fn embedding(&self, i: usize, pooling: Pooling) -> Result<Vec<f64>> {
        Ok(pool_span(&self.vectors, self.ranges[i].clone(), pooling)?.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Insertion {
    /// Character offset of the inserted text in the working text.
    pub at: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionState {
    chars: Vec<char>,
    /// Mention offsets into the working text.
    pub offsets: Vec<(usize, usize)>,
    pub predicted: Vec<Option<(String, f64)>>,
    pub resolved: Vec<bool>,
    pub insertions: Vec<Insertion>,
}

impl PredictionState {
    pub fn new(chunk: &Chunk) -> Self {
        let n = chunk.mentions.len();
        PredictionState {
            chars: chunk.text.chars().collect(),
            offsets: chunk.mentions.iter().map(|m| (m.start, m.end)).collect(),
            predicted: vec![None; n],
            resolved: vec![false; n],
            insertions: Vec::new(),
        }
    }

    pub fn working_text(&self) -> String {
        self.chars.iter().collect()
    }

    /// The working text with every insertion removed.
    pub fn original_text(&self) -> String {
        let mut skip = vec![false; self.chars.len()];
        for ins in &self.insertions {
            skip[ins.at..ins.at + ins.len].iter_mut().for_each(|s| *s = true);
        }
        self.chars
            .iter()
            .zip(skip)
            .filter(|(_, s)| !s)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn surface(&self, i: usize) -> String {
        let (s, e) = self.offsets[i];
        self.chars[s..e].iter().collect()
    }

    pub fn all_resolved(&self) -> bool {
        self.resolved.iter().all(|&r| r)
    }

    /// Inserts `" (" + text + ")"` right after mention `i` and shifts every
    /// later offset.
    pub fn insert_after(&mut self, i: usize, text: &str) -> Result<()> {
        if self.resolved[i] {
            return Err(Error::InvalidDocument {
                doc: String::new(),
                message: format!("mention {i} already has an insertion"),
            });
        }
        let at = self.offsets[i].1;
        let inserted: Vec<char> = format!(" ({text})").chars().collect();
        let len = inserted.len();
        self.chars.splice(at..at, inserted);
        for (j, (s, e)) in self.offsets.iter_mut().enumerate() {
            if j != i && *s >= at {
                *s += len;
                *e += len;
            }
        }
        for ins in &mut self.insertions {
            if ins.at >= at {
                ins.at += len;
            }
        }
        self.insertions.push(Insertion { at, len });
        self.resolved[i] = true;
        Ok(())
    }

    pub fn insert_verbalization(&mut self, i: usize, record: &EntityRecord) -> Result<()> {
        self.insert_after(i, insertion_text(record))
    }

    /// The working text as a chunk whose mentions follow the shifted offsets.
    pub fn to_chunk(&self, template: &Chunk) -> Chunk {
        Chunk {
            parent_doc: template.parent_doc.clone(),
            offset: template.offset,
            text: self.working_text(),
            mentions: template
                .mentions
                .iter()
                .zip(&self.offsets)
                .map(|(m, &(start, end))| Mention {
                    start,
                    end,
                    ..m.clone()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MentionPrediction {
    pub mention: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub predictions: Vec<MentionPrediction>,
    pub first_pass: Vec<MentionPrediction>,
    pub iterations: usize,
    /// Stored score of every mention after each round.
    pub score_history: Vec<Vec<f64>>,
    pub state: PredictionState,
}

pub struct Predictor<'a> {
    pub params: &'a EncoderParams,
    pub cache: &'a LabelCache,
    pub labels: &'a LabelSet,
    pub pooling: Pooling,
    pub rescore_resolved: bool,
}

impl<'a> Predictor<'a> {
    pub fn new(
        params: &'a EncoderParams,
        cache: &'a LabelCache,
        labels: &'a LabelSet,
        pooling: Pooling,
    ) -> Self {
        Predictor {
            params,
            cache,
            labels,
            pooling,
            rescore_resolved: true,
        }
    }

    fn score_spans(
        &self,
        text: &str,
        spans: &[(usize, usize)],
        which: &[usize],
        allowed: Option<&BTreeSet<String>>,
    ) -> Result<Vec<(String, f64)>> {
        if which.is_empty() {
            return Ok(Vec::new());
        }
        let enc = EncodedMentions::new(text, spans.iter().copied(), self.params)?;
        which
            .iter()
            .map(|&i| {
                let emb = enc.embedding(i, self.pooling)?;
                self.cache.nearest_label(&emb, allowed)
            })
            .collect()
    }

    pub fn predict_document(
        &self,
        chunk: &Chunk,
        allowed: Option<&BTreeSet<String>>,
    ) -> Result<Vec<MentionPrediction>> {
        if let Some(set) = allowed {
            if set.is_empty() {
                return Err(Error::EmptyAllowedSet);
            }
        }
        let spans: Vec<(usize, usize)> = chunk.mentions.iter().map(|m| (m.start, m.end)).collect();
        let all: Vec<usize> = (0..spans.len()).collect();
        Ok(self
            .score_spans(&chunk.text, &spans, &all, allowed)?
            .into_iter()
            .enumerate()
            .map(|(mention, (id, score))| MentionPrediction { mention, id, score })
            .collect())
    }

    pub fn predict_iterative(
        &self,
        chunk: &Chunk,
        allowed: Option<&BTreeSet<String>>,
    ) -> Result<IterativeOutcome> {
        if let Some(set) = allowed {
            if set.is_empty() {
                return Err(Error::EmptyAllowedSet);
            }
        }
        let n = chunk.mentions.len();
        let per_round = n.div_ceil(3).max(1);
        let mut state = PredictionState::new(chunk);
        let mut first_pass = Vec::new();
        let mut score_history = Vec::new();
        let mut iterations = 0;

        while !state.all_resolved() {
            iterations += 1;
            let which: Vec<usize> = (0..n)
                .filter(|&i| self.rescore_resolved || !state.resolved[i])
                .collect();
            let scored = self.score_spans(&state.working_text(), &state.offsets, &which, allowed)?;
            for (&i, (id, score)) in which.iter().zip(scored) {
                let replace = match &state.predicted[i] {
                    None => true,
                    Some((_, old)) => score > *old,
                };
                if replace {
                    state.predicted[i] = Some((id, score));
                }
            }
            if iterations == 1 {
                first_pass = collect(&state);
            }
            score_history.push(
                state
                    .predicted
                    .iter()
                    .map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |(_, s)| *s))
                    .collect(),
            );

            let mut open: Vec<usize> = (0..n).filter(|&i| !state.resolved[i]).collect();
            open.sort_by(|&a, &b| {
                let sa = state.predicted[a].as_ref().map_or(f64::NEG_INFINITY, |p| p.1);
                let sb = state.predicted[b].as_ref().map_or(f64::NEG_INFINITY, |p| p.1);
                sb.total_cmp(&sa).then(a.cmp(&b))
            });
            for i in open.into_iter().take(per_round) {
                let (id, _) = state.predicted[i]
                    .clone()
                    .expect("every mention is predicted in the first round");
                let record = self
                    .labels
                    .get(&id)
                    .ok_or_else(|| Error::UnknownLabel(id.clone()))?;
                state.insert_verbalization(i, record)?;
            }
        }
        Ok(IterativeOutcome {
            predictions: collect(&state),
            first_pass,
            iterations,
            score_history,
            state,
        })
    }
}

fn collect(state: &PredictionState) -> Vec<MentionPrediction> {
    state
        .predicted
        .iter()
        .enumerate()
        .filter_map(|(mention, p)| {
            p.as_ref().map(|(id, score)| MentionPrediction {
                mention,
                id: id.clone(),
                score: *score,
            })
        })
        .collect()
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc: String,
    pub start: usize,
    pub end: usize,
    pub pred: String,
    pub score: f64,
    pub gold: String,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusPredictions {
    pub records: Vec<PredictionRecord>,
    /// First-round predictions; equal to `records` for one-shot runs.
    pub first_pass: Vec<PredictionRecord>,
}

/// Gold ids of `docs` that exist in `labels`: the target label set used for
/// restricted inference.
pub fn target_label_set(docs: &[Document], labels: &LabelSet) -> BTreeSet<String> {
    docs.iter()
        .flat_map(|d| &d.mentions)
        .filter(|m| labels.contains(&m.gold))
        .map(|m| m.gold.clone())
        .collect()
}

/// Predicts every mention of every document, chunking long documents with
/// the given limits. Output follows corpus order.
pub fn predict_corpus(
    predictor: &Predictor<'_>,
    docs: &[Document],
    limits: (usize, usize),
    iterative: bool,
    allowed: Option<&BTreeSet<String>>,
) -> Result<CorpusPredictions> {
    let chunks: Vec<Chunk> = docs
        .iter()
        .map(|d| chunk_document(d, limits.0, limits.1))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let per_chunk = chunks
        .par_iter()
        .map(|chunk| -> Result<(Vec<PredictionRecord>, Vec<PredictionRecord>)> {
            let to_records = |preds: &[MentionPrediction], iterations: usize| {
                preds
                    .iter()
                    .map(|p| {
                        let m = &chunk.mentions[p.mention];
                        PredictionRecord {
                            doc: chunk.parent_doc.clone(),
                            start: chunk.offset + m.start,
                            end: chunk.offset + m.end,
                            pred: p.id.clone(),
                            score: p.score,
                            gold: m.gold.clone(),
                            iterations,
                        }
                    })
                    .collect::<Vec<_>>()
            };
            if iterative {
                let out = predictor.predict_iterative(chunk, allowed)?;
                Ok((
                    to_records(&out.predictions, out.iterations),
                    to_records(&out.first_pass, 1),
                ))
            } else {
                let preds = predictor.predict_document(chunk, allowed)?;
                let recs = to_records(&preds, 1);
                Ok((recs.clone(), recs))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = CorpusPredictions::default();
    for (records, first) in per_chunk {
        out.records.extend(records);
        out.first_pass.extend(first);
    }
    Ok(out)
}
