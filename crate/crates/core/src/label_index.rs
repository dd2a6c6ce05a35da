//! Cached label embeddings with exact search and negative mining.
//!
//! The cache is only ever read during mining and inference; gradients always
//! flow through freshly encoded label embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::encoder::{EncoderParams, LabelInput, Pooling};
use crate::error::{Error, Result};
use crate::metric::{similarity_unchecked, SimilarityKind, SimilaritySpec};

pub const DEFAULT_LABEL_BATCH: usize = 128;
const CACHE_MAGIC: &[u8; 8] = b"VRBCACHE";

#[derive(Debug, Clone, PartialEq)]
pub struct LabelCache {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    width: usize,
    matrix: Vec<f64>,
    pub pooling: Pooling,
    pub sim: SimilaritySpec,
    /// Span counter value at the last full refresh.
    pub last_full_refresh: u64,
    /// On-the-fly writes since the last full refresh.
    pub dirty_writes: u64,
}

/// A scored cache row, ordered best-first: higher similarity, then lower row.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f64,
    row: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        // "less" means better so a max-heap keeps the worst on top
        other
            .sim
            .total_cmp(&self.sim)
            .then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl LabelCache {
    /// An all-zero cache; call [`LabelCache::full_refresh`] before use.
    pub fn new(ids: Vec<String>, dim: usize, pooling: Pooling, sim: SimilaritySpec) -> Self {
        let width = pooling.width(dim);
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        LabelCache {
            matrix: vec![0.0; ids.len() * width],
            ids,
            index,
            width,
            pooling,
            sim,
            last_full_refresh: 0,
            dirty_writes: 0,
        }
    }

    pub fn from_rows(
        ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        pooling: Pooling,
        sim: SimilaritySpec,
    ) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if ids.len() != rows.len() {
            return Err(Error::ShapeMismatch {
                expected: ids.len(),
                actual: rows.len(),
            });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::ShapeMismatch {
                expected: width,
                actual: bad.len(),
            });
        }
        let mut cache = LabelCache::new(ids, 0, pooling, sim);
        cache.width = width;
        cache.matrix = rows.concat();
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.width..(i + 1) * self.width]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Re-encodes every row with the current label encoder, `batch_size`
    /// labels at a time. `inputs[i]` must belong to `ids()[i]`.
    pub fn full_refresh(
        &mut self,
        params: &EncoderParams,
        inputs: &[LabelInput],
        batch_size: usize,
        span_counter: u64,
    ) -> Result<()> {
        if inputs.len() != self.ids.len() {
            return Err(Error::ShapeMismatch {
                expected: self.ids.len(),
                actual: inputs.len(),
            });
        }
        let expected = self.pooling.width(params.dim);
        if expected != self.width {
            return Err(Error::ShapeMismatch {
                expected: self.width,
                actual: expected,
            });
        }
        let width = self.width;
        let pooling = self.pooling;
        for (rows, batch) in self
            .matrix
            .chunks_mut(batch_size.max(1) * width)
            .zip(inputs.chunks(batch_size.max(1)))
        {
            rows.par_chunks_mut(width)
                .zip(batch.par_iter())
                .try_for_each(|(row, input)| -> Result<()> {
                    row.copy_from_slice(&input.embed(params, pooling)?.vector);
                    Ok(())
                })?;
        }
        self.dirty_writes = 0;
        self.last_full_refresh = span_counter;
        Ok(())
    }

    pub fn write_back(&mut self, id: &str, fresh: &[f64]) -> Result<()> {
        let row = self
            .position(id)
            .ok_or_else(|| Error::UnknownLabel(id.to_string()))?;
        if fresh.len() != self.width {
            return Err(Error::ShapeMismatch {
                expected: self.width,
                actual: fresh.len(),
            });
        }
        self.matrix[row * self.width..(row + 1) * self.width].copy_from_slice(fresh);
        self.dirty_writes += 1;
        Ok(())
    }

    fn check_anchor(&self, anchor: &[f64]) -> Result<()> {
        if anchor.len() != self.width {
            return Err(Error::ShapeMismatch {
                expected: self.width,
                actual: anchor.len(),
            });
        }
        Ok(())
    }

    /// Best `k` rows by similarity among rows accepted by `keep`.
    fn top_k(&self, anchor: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Vec<(usize, f64)> {
        let mut heap: BinaryHeap<Scored> = BinaryHeap::with_capacity(k + 1);
        if k == 0 {
            return Vec::new();
        }
        for row in 0..self.len() {
            if !keep(row) {
                continue;
            }
            let s = Scored {
                sim: similarity_unchecked(anchor, self.row(row), &self.sim),
                row,
            };
            if heap.len() < k {
                heap.push(s);
            } else if let Some(worst) = heap.peek() {
                if s < *worst {
                    heap.pop();
                    heap.push(s);
                }
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|s| (s.row, s.sim))
            .collect()
    }

    /// The `k` most similar labels other than `gold_id`, best first. Asking
    /// for more than exist returns every non-gold label.
    pub fn mine_hard_negatives(
        &self,
        anchor: &[f64],
        gold_id: &str,
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        self.check_anchor(anchor)?;
        let gold = self
            .position(gold_id)
            .ok_or_else(|| Error::UnknownLabel(gold_id.to_string()))?;
        Ok(self
            .top_k(anchor, k.min(self.len().saturating_sub(1)), |r| r != gold)
            .into_iter()
            .map(|(r, s)| (self.ids[r].clone(), s))
            .collect())
    }

    /// Most similar label, optionally restricted to `allowed` ids.
    pub fn nearest_label(
        &self,
        anchor: &[f64],
        allowed: Option<&BTreeSet<String>>,
    ) -> Result<(String, f64)> {
        self.check_anchor(anchor)?;
        let best = match allowed {
            None => self.top_k(anchor, 1, |_| true),
            Some(set) => {
                if set.is_empty() {
                    return Err(Error::EmptyAllowedSet);
                }
                let mut rows = Vec::with_capacity(set.len());
                for id in set {
                    rows.push(
                        self.position(id)
                            .ok_or_else(|| Error::UnknownLabel(id.clone()))?,
                    );
                }
                let mut mask = vec![false; self.len()];
                rows.iter().for_each(|&r| mask[r] = true);
                self.top_k(anchor, 1, |r| mask[r])
            }
        };
        best.into_iter()
            .next()
            .map(|(r, s)| (self.ids[r].clone(), s))
            .ok_or(Error::EmptyAllowedSet)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&[self.sim.kind.tag(), self.pooling.tag()])?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for x in &self.matrix {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("label cache: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u64b = [0u8; 8];
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        let n = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        let width = u32::from_le_bytes(u32b) as usize;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags).map_err(|_| bad("truncated header"))?;
        let kind = SimilarityKind::from_tag(tags[0]).ok_or_else(|| bad("unknown similarity"))?;
        let pooling = Pooling::from_tag(tags[1]).ok_or_else(|| bad("unknown pooling"))?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32b).map_err(|_| bad("truncated ids"))?;
            let mut buf = vec![0u8; u32::from_le_bytes(u32b) as usize];
            r.read_exact(&mut buf).map_err(|_| bad("truncated ids"))?;
            ids.push(String::from_utf8(buf).map_err(|_| bad("id is not UTF-8"))?);
        }
        let mut matrix = Vec::with_capacity(n * width);
        for _ in 0..n * width {
            r.read_exact(&mut u32b).map_err(|_| bad("truncated rows"))?;
            matrix.push(f32::from_le_bytes(u32b) as f64);
        }
        let mut cache = LabelCache::new(ids, 0, pooling, SimilaritySpec::new(kind));
        cache.width = width;
        cache.matrix = matrix;
        Ok(cache)
    }
}

/// Up to `k` distinct gold ids of other mentions in the batch, excluding
/// `gold`, sampled without replacement. Candidates keep first-seen order so
/// the draw is reproducible for a given generator state.
pub fn sample_in_batch_negatives(
    batch_golds: &[String],
    gold: &str,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let candidates: Vec<&String> = batch_golds
        .iter()
        .filter(|g| g.as_str() != gold && seen.insert(g.as_str()))
        .collect();
    let take = k.min(candidates.len());
    if take == 0 {
        return Vec::new();
    }
    sample(rng, candidates.len(), take)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}
