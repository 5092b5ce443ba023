//! Immutable vector index over unit embeddings.
//!
//! Vectors are normalized and stored in single precision. Similarities are
//! always accumulated in `f64` from the stored `f32` components (the query is
//! cast to `f32` first), so exact and graph search agree bit-for-bit on every
//! score they both compute. Results are ordered by descending similarity,
//! ties by ascending id.

mod hnsw;
mod persist;

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;

use crate::encoder::{Embedding, NORM_EPS};
use crate::error::{Error, Result};

pub use hnsw::{Graph, LAYER0_DEGREE_FACTOR};

/// Pools at least this large are scanned in parallel in exact mode.
const PARALLEL_SCAN: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    /// Maximum out-degree on upper layers; layer 0 allows
    /// [`LAYER0_DEGREE_FACTOR`] times as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    Approximate(HnswParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
    /// Row of the neighbor inside the index.
    pub pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    mode: IndexMode,
    graph: Option<Graph>,
}

/// Cosine of two stored rows, accumulated in double precision.
pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Unit-normalize `v` and round to single precision.
pub fn to_unit_f32(v: &[f64]) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite("vector"));
    }
    if n <= NORM_EPS {
        return Err(Error::InvalidArgument("zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| (x / n) as f32).collect())
}

fn rank_order(ids: &[String], a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1]))
}

impl VectorIndex {
    pub fn build(entries: Vec<(String, Embedding)>, mode: IndexMode) -> Result<Self> {
        let dim = entries.first().ok_or(Error::Empty("index entries"))?.1.dim();
        let mut ids = Vec::with_capacity(entries.len());
        let mut flat = Vec::with_capacity(entries.len() * dim);
        for (id, e) in entries {
            ids.push(id);
            flat.extend(e.0);
        }
        Self::from_flat(ids, dim, &flat, mode)
    }

    /// Build from row-major `f64` rows, `ids.len() * dim` values.
    pub fn from_flat(ids: Vec<String>, dim: usize, flat: &[f64], mode: IndexMode) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("index entries"));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("vector dimension must be at least 1".into()));
        }
        if flat.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                expected: ids.len() * dim,
                got: flat.len(),
            });
        }
        if ids.len() > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many vectors".into()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (line, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    line: line + 1,
                });
            }
        }
        let rows: Vec<Vec<f32>> = flat
            .par_chunks(dim)
            .enumerate()
            .map(|(i, row)| to_unit_f32(row).map_err(|e| Error::at(i, e)))
            .collect::<Result<_>>()?;
        let vectors: Vec<f32> = rows.into_iter().flatten().collect();

        let graph = match mode {
            IndexMode::Exact => None,
            IndexMode::Approximate(p) => {
                validate_hnsw(&p)?;
                Some(Graph::build(&vectors, dim, &p))
            }
        };
        Ok(VectorIndex {
            dim,
            ids,
            vectors,
            mode,
            graph,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..][..self.dim]
    }

    fn prepare_query(&self, q: &[f64], k: usize) -> Result<Vec<f32>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        to_unit_f32(q)
    }

    /// Top `k` by cosine; in approximate mode the beam is `max(ef_search, k)`.
    pub fn query_topk(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        match self.mode {
            IndexMode::Exact => self.exact(q, k),
            IndexMode::Approximate(p) => self.query_topk_ef(q, k, p.ef_search),
        }
    }

    /// Approximate search with an explicit beam; exact mode ignores `ef`.
    pub fn query_topk_ef(&self, q: &[f64], k: usize, ef: usize) -> Result<Vec<Neighbor>> {
        let Some(graph) = &self.graph else {
            return self.exact(q, k);
        };
        let q = self.prepare_query(q, k)?;
        let found = graph.search(&self.vectors, self.dim, &q, ef.max(k));
        let mut hits: Vec<(f64, usize)> = found.into_iter().map(|(s, i)| (s, i as usize)).collect();
        hits.sort_by(|&a, &b| rank_order(&self.ids, a, b));
        hits.truncate(k);
        Ok(self.neighbors(hits))
    }

    /// Brute-force search regardless of mode.
    pub fn exact(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let q = self.prepare_query(q, k)?;
        let score = |i: usize| (cosine_f32(&q, self.vector(i)), i);
        let mut hits: Vec<(f64, usize)> = if self.len() >= PARALLEL_SCAN {
            (0..self.len()).into_par_iter().map(score).collect()
        } else {
            (0..self.len()).map(score).collect()
        };
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, |&a, &b| rank_order(&self.ids, a, b));
            hits.truncate(k);
        }
        hits.sort_by(|&a, &b| rank_order(&self.ids, a, b));
        Ok(self.neighbors(hits))
    }

    fn neighbors(&self, hits: Vec<(f64, usize)>) -> Vec<Neighbor> {
        hits.into_iter()
            .map(|(similarity, pos)| Neighbor {
                id: self.ids[pos].clone(),
                similarity,
                pos,
            })
            .collect()
    }
}

fn validate_hnsw(p: &HnswParams) -> Result<()> {
    let bad = |field, reason: &str| {
        Err(Error::InvalidSpec {
            field,
            reason: reason.into(),
        })
    };
    if p.m < 2 {
        return bad("m", "must be at least 2");
    }
    if p.ef_construction < 1 {
        return bad("ef_construction", "must be at least 1");
    }
    if p.ef_search < 1 {
        return bad("ef_search", "must be at least 1");
    }
    Ok(())
}
