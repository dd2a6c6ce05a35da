//! Similarity metrics and the triplet / cross-entropy objectives.
//!
//! Everything is expressed as a similarity: euclidean similarity is the
//! negated distance, so larger is always better and the triplet hinge is
//! `margin - s(a, p) + s(a, n)` for every metric.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    Cosine,
    Dot,
    Euclidean,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 3] = [
        SimilarityKind::Cosine,
        SimilarityKind::Dot,
        SimilarityKind::Euclidean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Dot => "dot",
            SimilarityKind::Euclidean => "euclidean",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            SimilarityKind::Cosine => 0,
            SimilarityKind::Dot => 1,
            SimilarityKind::Euclidean => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        SimilarityKind::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Default triplet margin for this metric.
    pub fn default_margin(self) -> f64 {
        match self {
            SimilarityKind::Cosine => 0.5,
            SimilarityKind::Dot | SimilarityKind::Euclidean => 3.0,
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SimilarityKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown similarity '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilaritySpec {
    pub kind: SimilarityKind,
    pub epsilon: f64,
}

impl SimilaritySpec {
    pub fn new(kind: SimilarityKind) -> Self {
        SimilaritySpec {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl From<SimilarityKind> for SimilaritySpec {
    fn from(kind: SimilarityKind) -> Self {
        SimilaritySpec::new(kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Triplet,
    CrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::Triplet, LossKind::CrossEntropy];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Triplet margin; ignored by cross-entropy.
    pub margin: f64,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            margin: 0.0,
        }
    }

    pub fn triplet_for(sim: SimilarityKind) -> Self {
        LossSpec {
            kind: LossKind::Triplet,
            margin: sim.default_margin(),
        }
    }
}

fn check_width(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn similarity(a: &[f64], b: &[f64], spec: &SimilaritySpec) -> Result<f64> {
    check_width(a, b)?;
    Ok(similarity_unchecked(a, b, spec))
}

pub(crate) fn similarity_unchecked(a: &[f64], b: &[f64], spec: &SimilaritySpec) -> f64 {
    match spec.kind {
        SimilarityKind::Dot => dot(a, b),
        SimilarityKind::Cosine => dot(a, b) / (norm(a) * norm(b)).max(spec.epsilon),
        SimilarityKind::Euclidean => {
            -a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        }
    }
}

/// Gradients of `s(a, b)` with respect to `a` and `b`.
fn similarity_grads(a: &[f64], b: &[f64], spec: &SimilaritySpec) -> (Vec<f64>, Vec<f64>) {
    match spec.kind {
        SimilarityKind::Dot => (b.to_vec(), a.to_vec()),
        SimilarityKind::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            let denom = na * nb;
            if denom <= spec.epsilon {
                let inv = 1.0 / spec.epsilon;
                return (
                    b.iter().map(|x| x * inv).collect(),
                    a.iter().map(|x| x * inv).collect(),
                );
            }
            let c = dot(a, b) / denom;
            let ga = a
                .iter()
                .zip(b)
                .map(|(x, y)| y / denom - c * x / (na * na))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(x, y)| x / denom - c * y / (nb * nb))
                .collect();
            (ga, gb)
        }
        SimilarityKind::Euclidean => {
            let dist = -similarity_unchecked(a, b, spec);
            if dist == 0.0 {
                return (vec![0.0; a.len()], vec![0.0; b.len()]);
            }
            let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| -(x - y) / dist).collect();
            let gb = ga.iter().map(|g| -g).collect();
            (ga, gb)
        }
    }
}

fn check_inputs(anchor: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<()> {
    if negatives.is_empty() {
        return Err(Error::NoNegatives);
    }
    check_width(anchor, positive)?;
    negatives.iter().try_for_each(|n| check_width(anchor, n))
}

/// Mean over negatives of `max(0, margin - s(a, p) + s(a, n))`.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    spec: &SimilaritySpec,
    margin: f64,
) -> Result<f64> {
    check_inputs(anchor, positive, negatives)?;
    let sp = similarity_unchecked(anchor, positive, spec);
    let total: f64 = negatives
        .iter()
        .map(|n| (margin - sp + similarity_unchecked(anchor, n, spec)).max(0.0))
        .sum();
    Ok(total / negatives.len() as f64)
}

fn log_softmax_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    (logits[0] - max - sum.ln(), probs)
}

/// `-log softmax([s(a,p), s(a,n_1), ...])[0]`.
pub fn cross_entropy_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    spec: &SimilaritySpec,
) -> Result<f64> {
    check_inputs(anchor, positive, negatives)?;
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|v| similarity_unchecked(anchor, v, spec))
        .collect();
    Ok(-log_softmax_first(&logits).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Loss value with exact gradients for every input vector. An inactive
/// hinge (value exactly 0) contributes the zero subgradient.
pub fn loss_gradients(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    loss: &LossSpec,
    sim: &SimilaritySpec,
) -> Result<LossGradients> {
    check_inputs(anchor, positive, negatives)?;
    let width = anchor.len();
    let mut ga = vec![0.0; width];
    let mut gp = vec![0.0; width];
    let mut gn = vec![vec![0.0; width]; negatives.len()];
    let axpy = |acc: &mut [f64], alpha: f64, x: &[f64]| {
        acc.iter_mut().zip(x).for_each(|(a, v)| *a += alpha * v);
    };

    let sp = similarity_unchecked(anchor, positive, sim);
    let (dsp_a, dsp_p) = similarity_grads(anchor, positive, sim);
    let value = match loss.kind {
        LossKind::Triplet => {
            let inv = 1.0 / negatives.len() as f64;
            let mut total = 0.0;
            for (i, n) in negatives.iter().enumerate() {
                let hinge = loss.margin - sp + similarity_unchecked(anchor, n, sim);
                if hinge > 0.0 {
                    total += hinge;
                    let (dsn_a, dsn_n) = similarity_grads(anchor, n, sim);
                    axpy(&mut ga, -inv, &dsp_a);
                    axpy(&mut ga, inv, &dsn_a);
                    axpy(&mut gp, -inv, &dsp_p);
                    axpy(&mut gn[i], inv, &dsn_n);
                }
            }
            total * inv
        }
        LossKind::CrossEntropy => {
            let logits: Vec<f64> = std::iter::once(sp)
                .chain(negatives.iter().map(|n| similarity_unchecked(anchor, n, sim)))
                .collect();
            let (log_p0, probs) = log_softmax_first(&logits);
            // dL/dz_0 = p_0 - 1, dL/dz_i = p_i
            let w0 = probs[0] - 1.0;
            axpy(&mut ga, w0, &dsp_a);
            axpy(&mut gp, w0, &dsp_p);
            for (i, n) in negatives.iter().enumerate() {
                let (dsn_a, dsn_n) = similarity_grads(anchor, n, sim);
                axpy(&mut ga, probs[i + 1], &dsn_a);
                axpy(&mut gn[i], probs[i + 1], &dsn_n);
            }
            -log_p0
        }
    };
    Ok(LossGradients {
        loss: value,
        anchor: ga,
        positive: gp,
        negatives: gn,
    })
}
