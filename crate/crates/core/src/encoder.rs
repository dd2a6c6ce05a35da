//! Hash-bucket tokenizer and the trainable context encoder.
//!
//! The encoder maps each token to
//! `out_t = W_self · e_t + W_ctx · c_t + bias`, where `e_t` is the token's
//! embedding-table row and `c_t` the mean embedding over the clipped window
//! `t - w ..= t + w`. Spans are then pooled by mean or by concatenating the
//! first and last token vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;
use std::ops::Range;
use std::str::FromStr;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::verbalizer::Verbalization;

pub const DEFAULT_VOCAB: usize = 65_536;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_WINDOW: usize = 5;
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().map(|t| t.id)
    }

    /// Tokens overlapping the character span `[start, end)`.
    pub fn token_range(&self, start: usize, end: usize) -> Option<Range<usize>> {
        let first = self.tokens.iter().position(|t| t.char_span.1 > start)?;
        let count = self.tokens[first..]
            .iter()
            .take_while(|t| t.char_span.0 < end)
            .count();
        (count > 0).then_some(first..first + count)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Lowercases and splits on maximal runs of non-alphanumeric characters.
/// Token ids are FNV-1a-64 of the lowercased token modulo `vocab`.
pub fn tokenize(text: &str, vocab: usize) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut flush = |current: &mut String, start: usize, end: usize| {
        if !current.is_empty() {
            let id = (fnv1a64(current.as_bytes()) % vocab as u64) as usize;
            tokens.push(Token {
                id,
                char_span: (start, end),
            });
            current.clear();
        }
    };
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = i;
            }
            current.extend(c.to_lowercase());
        } else {
            flush(&mut current, start, i);
        }
        n = i + 1;
    }
    flush(&mut current, start, n);
    TokenSequence { tokens }
}

/// Lowercased token strings, for diagnostics and tests.
pub fn token_strings(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    tokenize(text, 1)
        .tokens
        .iter()
        .map(|t| {
            chars[t.char_span.0..t.char_span.1]
                .iter()
                .flat_map(|c| c.to_lowercase())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pooling {
    Mean,
    FirstLast,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::FirstLast => "first_last",
        }
    }

    pub fn width(self, dim: usize) -> usize {
        match self {
            Pooling::Mean => dim,
            Pooling::FirstLast => 2 * dim,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Pooling::Mean => 0,
            Pooling::FirstLast => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Pooling::Mean),
            1 => Some(Pooling::FirstLast),
            _ => None,
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "first_last" => Ok(Pooling::FirstLast),
            _ => Err(Error::Config(format!("unknown pooling '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanEmbedding {
    pub vector: Vec<f64>,
    pub pooling: Pooling,
}

/// Parameters of one encoder. Matrices are row-major `dim × dim`, the table
/// is `vocab × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: usize,
    pub dim: usize,
    pub window: usize,
    pub table: Vec<f64>,
    pub w_self: Vec<f64>,
    pub w_ctx: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(vocab: usize, dim: usize, window: usize) -> Self {
        EncoderParams {
            vocab,
            dim,
            window,
            table: vec![0.0; vocab * dim],
            w_self: vec![0.0; dim * dim],
            w_ctx: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    /// Uniform initialization in `[-INIT_RANGE, INIT_RANGE]`.
    pub fn init(vocab: usize, dim: usize, window: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(vocab, dim, window);
        for x in p
            .table
            .iter_mut()
            .chain(p.w_self.iter_mut())
            .chain(p.w_ctx.iter_mut())
            .chain(p.bias.iter_mut())
        {
            *x = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
        p
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.table[id * self.dim..(id + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.table
            .iter()
            .chain(&self.w_self)
            .chain(&self.w_ctx)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }
}

/// The two independent encoders of the dual-encoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mention: EncoderParams,
    pub label: EncoderParams,
}

impl Model {
    pub fn init(vocab: usize, dim: usize, window: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mention = EncoderParams::init(vocab, dim, window, &mut rng);
        let label = EncoderParams::init(vocab, dim, window, &mut rng);
        Model { mention, label }
    }

    pub fn dim(&self) -> usize {
        self.mention.dim
    }

    pub fn vocab(&self) -> usize {
        self.mention.vocab
    }
}

/// Token vectors produced by [`encode`], row-major `len × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

fn window_bounds(t: usize, len: usize, w: usize) -> (usize, usize) {
    (t.saturating_sub(w), (t + w).min(len - 1))
}

/// Clipped window means `c_t`, row-major `len × dim`.
fn window_means(ids: &[usize], params: &EncoderParams) -> Vec<f64> {
    let d = params.dim;
    let len = ids.len();
    let mut prefix = vec![0.0; (len + 1) * d];
    for (t, &id) in ids.iter().enumerate() {
        let row = params.row(id);
        for k in 0..d {
            prefix[(t + 1) * d + k] = prefix[t * d + k] + row[k];
        }
    }
    let mut means = vec![0.0; len * d];
    for t in 0..len {
        let (lo, hi) = window_bounds(t, len, params.window);
        let n = (hi - lo + 1) as f64;
        for k in 0..d {
            means[t * d + k] = (prefix[(hi + 1) * d + k] - prefix[lo * d + k]) / n;
        }
    }
    means
}

fn matvec_add(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * d..(i + 1) * d];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn matvec_t_add(m: &[f64], g: &[f64], out: &mut [f64]) {
    let d = g.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let row = &m[i * d..(i + 1) * d];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gi;
        }
    }
}

fn outer_add(g: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, xj) in out[i * d..(i + 1) * d].iter_mut().zip(x) {
            *o += gi * xj;
        }
    }
}

pub fn encode(seq: &TokenSequence, params: &EncoderParams) -> Result<Encoded> {
    if seq.is_empty() {
        return Err(Error::EmptySpan);
    }
    let d = params.dim;
    let ids: Vec<usize> = seq.ids().collect();
    if let Some(&bad) = ids.iter().find(|&&id| id >= params.vocab) {
        return Err(Error::ShapeMismatch {
            expected: params.vocab,
            actual: bad + 1,
        });
    }
    let means = window_means(&ids, params);
    let mut data = vec![0.0; ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        let out = &mut data[t * d..(t + 1) * d];
        out.copy_from_slice(&params.bias);
        matvec_add(&params.w_self, params.row(id), out);
        matvec_add(&params.w_ctx, &means[t * d..(t + 1) * d], out);
    }
    Ok(Encoded { dim: d, data })
}

pub fn pool_span(vectors: &Encoded, range: Range<usize>, method: Pooling) -> Result<SpanEmbedding> {
    if range.is_empty() || range.end > vectors.len() {
        return Err(Error::EmptySpan);
    }
    let d = vectors.dim;
    let vector = match method {
        Pooling::Mean => {
            let n = range.len() as f64;
            let mut acc = vec![0.0; d];
            for t in range {
                for (a, x) in acc.iter_mut().zip(vectors.row(t)) {
                    *a += x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
        Pooling::FirstLast => {
            let mut v = vectors.row(range.start).to_vec();
            v.extend_from_slice(vectors.row(range.end - 1));
            v
        }
    };
    Ok(SpanEmbedding {
        vector,
        pooling: method,
    })
}

/// Adds the gradient of a pooled span back onto per-token gradients.
pub fn pool_backward(
    upstream: &[f64],
    range: Range<usize>,
    method: Pooling,
    token_grads: &mut [f64],
    dim: usize,
) -> Result<()> {
    if range.is_empty() || range.end * dim > token_grads.len() {
        return Err(Error::EmptySpan);
    }
    if upstream.len() != method.width(dim) {
        return Err(Error::ShapeMismatch {
            expected: method.width(dim),
            actual: upstream.len(),
        });
    }
    match method {
        Pooling::Mean => {
            let n = range.len() as f64;
            for t in range {
                for (g, u) in token_grads[t * dim..(t + 1) * dim].iter_mut().zip(upstream) {
                    *g += u / n;
                }
            }
        }
        Pooling::FirstLast => {
            let (first, last) = upstream.split_at(dim);
            for (g, u) in token_grads[range.start * dim..(range.start + 1) * dim]
                .iter_mut()
                .zip(first)
            {
                *g += u;
            }
            let t = range.end - 1;
            for (g, u) in token_grads[t * dim..(t + 1) * dim].iter_mut().zip(last) {
                *g += u;
            }
        }
    }
    Ok(())
}

/// Gradients for one encoder. Table gradients are sparse, keyed by row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub dim: usize,
    pub table: BTreeMap<usize, Vec<f64>>,
    pub w_self: Vec<f64>,
    pub w_ctx: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(dim: usize) -> Self {
        EncoderGrads {
            dim,
            table: BTreeMap::new(),
            w_self: vec![0.0; dim * dim],
            w_ctx: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (row, g) in &other.table {
            let acc = self
                .table
                .entry(*row)
                .or_insert_with(|| vec![0.0; self.dim]);
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        for (a, b) in self
            .w_self
            .iter_mut()
            .chain(self.w_ctx.iter_mut())
            .chain(self.bias.iter_mut())
            .zip(other.w_self.iter().chain(&other.w_ctx).chain(&other.bias))
        {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.values_mut() {
            *x *= factor;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|x| x * x).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&x| x == 0.0)
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.table
            .values()
            .flatten()
            .chain(&self.w_self)
            .chain(&self.w_ctx)
            .chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.table
            .values_mut()
            .flatten()
            .chain(self.w_self.iter_mut())
            .chain(self.w_ctx.iter_mut())
            .chain(self.bias.iter_mut())
    }

    /// Dense copy of the table gradient, for tests on small vocabularies.
    pub fn dense_table(&self, vocab: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab * self.dim];
        for (row, g) in &self.table {
            out[row * self.dim..(row + 1) * self.dim].copy_from_slice(g);
        }
        out
    }
}

impl EncoderParams {
    /// `self -= lr * grads`.
    pub fn apply(&mut self, grads: &EncoderGrads, lr: f64) {
        let d = self.dim;
        for (row, g) in &grads.table {
            for (p, gi) in self.table[row * d..(row + 1) * d].iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        for (p, g) in self
            .w_self
            .iter_mut()
            .chain(self.w_ctx.iter_mut())
            .chain(self.bias.iter_mut())
            .zip(grads.w_self.iter().chain(&grads.w_ctx).chain(&grads.bias))
        {
            *p -= lr * g;
        }
    }
}

/// Exact gradients of `encode` given upstream gradients on the token
/// vectors (row-major `len × dim`).
pub fn encoder_backward(
    seq: &TokenSequence,
    params: &EncoderParams,
    upstream: &[f64],
) -> Result<EncoderGrads> {
    let d = params.dim;
    let len = seq.len();
    if upstream.len() != len * d {
        return Err(Error::ShapeMismatch {
            expected: len * d,
            actual: upstream.len(),
        });
    }
    let mut grads = EncoderGrads::zeros(d);
    if len == 0 {
        return Ok(grads);
    }
    let ids: Vec<usize> = seq.ids().collect();
    let means = window_means(&ids, params);

    // d out_t / d e_t via W_self, and the window-mean term spread with a
    // difference array over each window.
    let mut de = vec![0.0; len * d];
    let mut diff = vec![0.0; (len + 1) * d];
    let mut h = vec![0.0; d];
    for t in 0..len {
        let g = &upstream[t * d..(t + 1) * d];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        outer_add(g, params.row(ids[t]), &mut grads.w_self);
        outer_add(g, &means[t * d..(t + 1) * d], &mut grads.w_ctx);
        grads.bias.iter_mut().zip(g).for_each(|(b, gi)| *b += gi);
        matvec_t_add(&params.w_self, g, &mut de[t * d..(t + 1) * d]);

        h.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_add(&params.w_ctx, g, &mut h);
        let (lo, hi) = window_bounds(t, len, params.window);
        let n = (hi - lo + 1) as f64;
        for k in 0..d {
            diff[lo * d + k] += h[k] / n;
            diff[(hi + 1) * d + k] -= h[k] / n;
        }
    }
    let mut running = vec![0.0; d];
    for t in 0..len {
        for k in 0..d {
            running[k] += diff[t * d + k];
            de[t * d + k] += running[k];
        }
    }
    for (t, &id) in ids.iter().enumerate() {
        let g = &de[t * d..(t + 1) * d];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let acc = grads.table.entry(id).or_insert_with(|| vec![0.0; d]);
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(grads)
}

/// A tokenized label verbalization with its title token range.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelInput {
    pub tokens: TokenSequence,
    pub title_range: Range<usize>,
}

impl LabelInput {
    pub fn new(verbalization: &Verbalization, vocab: usize) -> Result<Self> {
        let tokens = tokenize(&verbalization.text, vocab);
        let (s, e) = verbalization.title_char_span;
        let title_range = tokens.token_range(s, e).ok_or(Error::EmptySpan)?;
        Ok(LabelInput {
            tokens,
            title_range,
        })
    }

    pub fn embed(&self, params: &EncoderParams, pooling: Pooling) -> Result<SpanEmbedding> {
        let enc = encode(&self.tokens, params)?;
        pool_span(&enc, self.title_range.clone(), pooling)
    }

    /// Gradients of the label encoder given the upstream gradient on the
    /// pooled title embedding.
    pub fn backward(
        &self,
        params: &EncoderParams,
        pooling: Pooling,
        upstream: &[f64],
    ) -> Result<EncoderGrads> {
        let mut token_grads = vec![0.0; self.tokens.len() * params.dim];
        pool_backward(
            upstream,
            self.title_range.clone(),
            pooling,
            &mut token_grads,
            params.dim,
        )?;
        encoder_backward(&self.tokens, params, &token_grads)
    }
}
