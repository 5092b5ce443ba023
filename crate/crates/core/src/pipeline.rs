//! Hierarchical search: embed the pool with the reference encoder, index it,
//! then per query embed with the query encoder, retrieve the top `K` and
//! optionally re-rank those candidates with a pair scorer.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::comparer::{rerank, ComparerParams, PairScorer};
use crate::corpus::Corpus;
use crate::encoder::{Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{IndexMode, VectorIndex};
use crate::recm::encode_corpus;
use crate::tokenizer::{SubwordVocab, TokenSeq};

pub const DEFAULT_K: usize = 50;
pub const VULN_K: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    EmbeddingOnly,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub id: String,
    /// Row in the engine's index and pool.
    pub pos: usize,
    pub embed_similarity: f64,
    pub rerank_dissimilarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SearchStats {
    pub stage1: Duration,
    pub stage3: Duration,
    pub candidates: usize,
    pub comparer_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<RankedEntry>,
    pub stage: Stage,
    pub stats: SearchStats,
}

/// Counts pair-scorer invocations; wraps any scorer.
struct Counting<'a, C: ?Sized> {
    inner: &'a C,
    calls: std::sync::atomic::AtomicUsize,
}

impl<C: PairScorer + ?Sized> PairScorer for Counting<'_, C> {
    fn dissimilarity(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.dissimilarity(a, b)
    }
}

#[derive(Debug, Clone)]
pub struct SearchEngine<C = ComparerParams> {
    query_encoder: Arc<EncoderParams>,
    reference_encoder: Arc<EncoderParams>,
    comparer: Option<Arc<C>>,
    index: VectorIndex,
    pool: Vec<TokenSeq>,
    k: usize,
}

impl<C: PairScorer> SearchEngine<C> {
    /// Embed every pool record with the reference encoder and index it.
    pub fn index_pool(
        query_encoder: Arc<EncoderParams>,
        reference_encoder: Arc<EncoderParams>,
        vocab: &SubwordVocab,
        pool: &Corpus,
        max_len: usize,
        mode: IndexMode,
    ) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("pool"));
        }
        let seqs = encode_corpus(pool, vocab, max_len);
        let embs = reference_encoder.embed_batch(&seqs)?;
        let entries = pool
            .records()
            .iter()
            .map(|r| r.id.clone())
            .zip(embs)
            .collect();
        let index = VectorIndex::build(entries, mode)?;
        Self::from_parts(query_encoder, reference_encoder, index, seqs)
    }

    /// Assemble an engine from an index whose row `i` was built from `pool[i]`.
    pub fn from_parts(
        query_encoder: Arc<EncoderParams>,
        reference_encoder: Arc<EncoderParams>,
        index: VectorIndex,
        pool: Vec<TokenSeq>,
    ) -> Result<Self> {
        if pool.len() != index.len() {
            return Err(Error::DimMismatch {
                expected: index.len(),
                got: pool.len(),
            });
        }
        if query_encoder.dim() != index.dim() || reference_encoder.dim() != index.dim() {
            return Err(Error::DimMismatch {
                expected: index.dim(),
                got: query_encoder.dim(),
            });
        }
        Ok(SearchEngine {
            query_encoder,
            reference_encoder,
            comparer: None,
            index,
            pool,
            k: DEFAULT_K,
        })
    }

    pub fn with_comparer<D: PairScorer>(self, comparer: Arc<D>) -> SearchEngine<D> {
        SearchEngine {
            query_encoder: self.query_encoder,
            reference_encoder: self.reference_encoder,
            comparer: Some(comparer),
            index: self.index,
            pool: self.pool,
            k: self.k,
        }
    }

    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        self.k = k;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn pool(&self) -> &[TokenSeq] {
        &self.pool
    }

    pub fn query_encoder(&self) -> &EncoderParams {
        &self.query_encoder
    }

    pub fn reference_encoder(&self) -> &EncoderParams {
        &self.reference_encoder
    }

    pub fn has_comparer(&self) -> bool {
        self.comparer.is_some()
    }

    pub fn search(&self, query: &TokenSeq, k_out: usize, use_comparer: bool) -> Result<RankedResult> {
        if query.is_empty() {
            return Err(Error::Empty("query token sequence"));
        }
        let t0 = Instant::now();
        let emb = self.query_encoder.forward(query)?;
        self.search_embedded(query, &emb, k_out, use_comparer, t0)
    }

    /// Same as [`search`](Self::search) with the query embedding precomputed.
    pub fn search_with_embedding(
        &self,
        query: &TokenSeq,
        emb: &Embedding,
        k_out: usize,
        use_comparer: bool,
    ) -> Result<RankedResult> {
        self.search_embedded(query, emb, k_out, use_comparer, Instant::now())
    }

    fn search_embedded(
        &self,
        query: &TokenSeq,
        emb: &Embedding,
        k_out: usize,
        use_comparer: bool,
        t0: Instant,
    ) -> Result<RankedResult> {
        if k_out == 0 {
            return Err(Error::InvalidArgument("k_out must be at least 1".into()));
        }
        if k_out > self.k {
            return Err(Error::InvalidArgument(format!(
                "k_out {k_out} exceeds retrieval depth K = {}",
                self.k
            )));
        }
        if query.is_empty() {
            return Err(Error::Empty("query token sequence"));
        }
        let comparer = match (use_comparer, &self.comparer) {
            (false, _) => None,
            (true, Some(c)) => Some(c.as_ref()),
            (true, None) => {
                return Err(Error::InvalidArgument("engine has no comparer bound".into()));
            }
        };
        let hits = self.index.query_topk(emb.as_slice(), self.k)?;
        let stage1 = t0.elapsed();
        let mut stats = SearchStats {
            stage1,
            candidates: hits.len(),
            ..SearchStats::default()
        };

        let Some(comparer) = comparer else {
            let entries = hits
                .into_iter()
                .take(k_out)
                .map(|n| RankedEntry {
                    id: n.id,
                    pos: n.pos,
                    embed_similarity: n.similarity,
                    rerank_dissimilarity: None,
                })
                .collect();
            return Ok(RankedResult {
                entries,
                stage: Stage::EmbeddingOnly,
                stats,
            });
        };

        let t1 = Instant::now();
        let counting = Counting {
            inner: comparer,
            calls: Default::default(),
        };
        let cands: Vec<(&str, &TokenSeq)> = hits
            .iter()
            .map(|n| (n.id.as_str(), &self.pool[n.pos]))
            .collect();
        let ranked = rerank(&counting, query, &cands)?;
        stats.stage3 = t1.elapsed();
        stats.comparer_calls = counting.calls.into_inner();

        // Candidate ids are unique, so a sorted lookup recovers each hit.
        let mut by_id: Vec<&crate::index::Neighbor> = hits.iter().collect();
        by_id.sort_by(|a, b| a.id.cmp(&b.id));
        let entries = ranked
            .into_iter()
            .take(k_out)
            .map(|r| {
                let n = by_id[by_id
                    .binary_search_by(|n| n.id.as_str().cmp(&r.id))
                    .expect("re-ranked ids come from the candidate set")];
                RankedEntry {
                    id: r.id,
                    pos: n.pos,
                    embed_similarity: n.similarity,
                    rerank_dissimilarity: Some(r.dissimilarity),
                }
            })
            .collect();
        Ok(RankedResult {
            entries,
            stage: Stage::Hierarchical,
            stats,
        })
    }
}

/// One CSV row per entry: `query_id,rank,candidate_id,embed_sim,rerank_d`.
pub fn result_csv_rows(query_id: &str, result: &RankedResult) -> Vec<String> {
    result
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d = e
                .rerank_dissimilarity
                .map(|d| format!("{d:.9}"))
                .unwrap_or_default();
            format!("{query_id},{},{},{:.9},{d}", i + 1, e.id, e.embed_similarity)
        })
        .collect()
}

pub const RESULT_CSV_HEADER: &str = "query_id,rank,candidate_id,embed_sim,rerank_d";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GenSpec};
    use crate::encoder::EncoderDims;
    use crate::index::{cosine_f32, to_unit_f32, HnswParams};
    use std::collections::HashSet;

    struct Fixture {
        vocab: SubwordVocab,
        corpus: Corpus,
        enc: Arc<EncoderParams>,
    }

    fn fixture() -> Fixture {
        let corpus = generate(&GenSpec::new(40, 3, 5)).unwrap();
        let vocab = SubwordVocab::train(&corpus, 400).unwrap();
        let enc = Arc::new(EncoderParams::init(EncoderDims::new(vocab.len(), 16), 2).unwrap());
        Fixture { vocab, corpus, enc }
    }

    fn engine(f: &Fixture, mode: IndexMode) -> SearchEngine {
        SearchEngine::index_pool(f.enc.clone(), f.enc.clone(), &f.vocab, &f.corpus, 64, mode).unwrap()
    }

    /// D = -cosine of the two encoders' embeddings, scored like the index.
    struct NegCosine(Arc<EncoderParams>);

    impl PairScorer for NegCosine {
        fn dissimilarity(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
            let x = to_unit_f32(self.0.forward(a)?.as_slice())?;
            let y = to_unit_f32(self.0.forward(b)?.as_slice())?;
            Ok(-cosine_f32(&x, &y))
        }
    }

    #[test]
    fn pool_size_and_self_hit() {
        let f = fixture();
        let e = engine(&f, IndexMode::Exact);
        assert_eq!(e.index().len(), f.corpus.len());
        for pos in [0, 17, 100] {
            let r = e.search(&e.pool()[pos], 1, false).unwrap();
            assert_eq!(r.entries[0].id, f.corpus.record(pos).id);
        }
    }

    #[test]
    fn index_bytes_repeat() {
        let f = fixture();
        let a = engine(&f, IndexMode::Approximate(HnswParams::default()));
        let b = engine(&f, IndexMode::Approximate(HnswParams::default()));
        assert_eq!(a.index().to_bytes(), b.index().to_bytes());
    }

    #[test]
    fn pass_through_without_comparer() {
        let f = fixture();
        let e = engine(&f, IndexMode::Exact);
        let q = &e.pool()[3];
        let r = e.search(q, 10, false).unwrap();
        let emb = f.enc.forward(q).unwrap();
        let raw = e.index().query_topk(emb.as_slice(), 10).unwrap();
        let ids: Vec<&str> = r.entries.iter().map(|e| e.id.as_str()).collect();
        let want: Vec<&str> = raw.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, want);
        assert_eq!(r.stage, Stage::EmbeddingOnly);
        assert_eq!(r.stats.comparer_calls, 0);
    }

    #[test]
    fn negative_cosine_comparer_reproduces_embedding_order() {
        let f = fixture();
        let e = engine(&f, IndexMode::Exact).with_comparer(Arc::new(NegCosine(f.enc.clone())));
        for pos in 0..20 {
            let q = &e.pool()[pos * 5];
            let plain = e.search(q, DEFAULT_K, false).unwrap();
            let hier = e.search(q, DEFAULT_K, true).unwrap();
            let a: Vec<&str> = plain.entries.iter().map(|e| e.id.as_str()).collect();
            let b: Vec<&str> = hier.entries.iter().map(|e| e.id.as_str()).collect();
            assert_eq!(a, b);
            for x in &hier.entries {
                assert_eq!(x.rerank_dissimilarity, Some(-x.embed_similarity));
            }
        }
    }

    #[test]
    fn hierarchical_results_stay_inside_candidates() {
        let f = fixture();
        let cmp = Arc::new(ComparerParams::init(f.vocab.len(), 8, 4).unwrap());
        let e = engine(&f, IndexMode::Exact).with_comparer(cmp).with_k(15).unwrap();
        for i in 0..1000 {
            let pos = (i * 7919) % f.corpus.len();
            let mut q = e.pool()[pos].clone();
            let shift = i % q.len();
            q.ids.rotate_left(shift);
            let top_k: HashSet<String> = e
                .search(&q, 15, false)
                .unwrap()
                .entries
                .into_iter()
                .map(|x| x.id)
                .collect();
            let hier = e.search(&q, 5, true).unwrap();
            assert_eq!(hier.stats.comparer_calls, 15);
            assert!(hier.entries.iter().all(|x| top_k.contains(&x.id)));
        }
    }

    #[test]
    fn search_errors() {
        let f = fixture();
        let e = engine(&f, IndexMode::Exact);
        let q = e.pool()[0].clone();
        assert!(e.search(&q, DEFAULT_K + 1, false).is_err());
        assert!(e.search(&q, 0, false).is_err());
        assert!(e.search(&TokenSeq::default(), 1, false).is_err());
        assert!(e.search(&q, 1, true).is_err());
        assert!(e.clone().with_k(0).is_err());
    }

    #[test]
    fn deterministic_results_and_csv() {
        let f = fixture();
        let cmp = Arc::new(ComparerParams::init(f.vocab.len(), 8, 4).unwrap());
        let e = engine(&f, IndexMode::Exact).with_comparer(cmp);
        let q = &e.pool()[9];
        let a = e.search(q, 5, true).unwrap();
        let b = e.search(q, 5, true).unwrap();
        assert_eq!(a.entries, b.entries);
        let rows = result_csv_rows("q9", &a);
        assert_eq!(rows.len(), 5);
        assert!(rows[0].starts_with("q9,1,"));
        assert_eq!(rows[0].split(',').count(), 5);
    }
}
