//! Retrieval metrics, pool-size sweeps and vulnerability-search recall.
//!
//! Every query has a single ground truth: another variant of its own class.
//! A query's pool is that ground truth plus distractors from other classes,
//! drawn as a prefix of a per-query shuffle so that the pools of a sweep are
//! nested. Ranks beyond what the retriever returns count as misses.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::comparer::ComparerParams;
use crate::corpus::Corpus;
use crate::encoder::{Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{IndexMode, VectorIndex};
use crate::pipeline::SearchEngine;
use crate::recm::encode_corpus;
use crate::seed::rng_for;
use crate::tokenizer::{SubwordVocab, TokenSeq};

pub const REPORT_KS: [usize; 4] = [1, 5, 10, 50];
pub const REPORT_CSV_HEADER: &str =
    "poolsize,n_queries,mrr,recall@1,recall@5,recall@10,recall@50,stage1_ms,stage3_ms";

/// A 1-based rank, or `None` when the ground truth was not retrieved.
pub type Rank = Option<usize>;

fn check_ranks(ranks: &[Rank]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if ranks.contains(&Some(0)) {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    Ok(())
}

/// Mean reciprocal rank; misses contribute 0.
pub fn mrr(ranks: &[Rank]) -> Result<f64> {
    check_ranks(ranks)?;
    let sum: f64 = ranks.iter().flatten().map(|&r| 1.0 / r as f64).sum();
    Ok(sum / ranks.len() as f64)
}

/// Fraction of queries whose ground truth is ranked within the top `k`.
pub fn recall_at_k(ranks: &[Rank], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let hits = ranks.iter().flatten().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Ranked corpus positions for one query, plus stage timings.
#[derive(Debug, Clone, Default)]
pub struct Retrieval {
    pub ranked: Vec<usize>,
    pub stage1: Duration,
    pub stage3: Duration,
}

/// Something that ranks a pool of corpus records against a query record.
pub trait Retriever: Sync {
    /// Largest number of results a single retrieval may return.
    fn depth(&self) -> usize;

    fn retrieve(&self, query: usize, pool: &[usize], k_out: usize) -> Result<Retrieval>;
}

/// The trained pipeline evaluated over one fixed corpus.
///
/// Pool records are embedded once with the reference encoder; each
/// retrieval builds an exact index over the requested pool.
pub struct EngineRetriever {
    ids: Vec<String>,
    seqs: Vec<TokenSeq>,
    query_embs: Vec<Embedding>,
    ref_embs: Vec<Embedding>,
    query_encoder: Arc<EncoderParams>,
    reference_encoder: Arc<EncoderParams>,
    comparer: Option<Arc<ComparerParams>>,
    k: usize,
}

impl EngineRetriever {
    pub fn new(
        corpus: &Corpus,
        vocab: &SubwordVocab,
        max_len: usize,
        query_encoder: Arc<EncoderParams>,
        reference_encoder: Arc<EncoderParams>,
        comparer: Option<Arc<ComparerParams>>,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let seqs = encode_corpus(corpus, vocab, max_len);
        let query_embs = query_encoder.embed_batch(&seqs)?;
        let ref_embs = reference_encoder.embed_batch(&seqs)?;
        Ok(EngineRetriever {
            ids: corpus.records().iter().map(|r| r.id.clone()).collect(),
            seqs,
            query_embs,
            ref_embs,
            query_encoder,
            reference_encoder,
            comparer,
            k,
        })
    }

    pub fn uses_comparer(&self) -> bool {
        self.comparer.is_some()
    }
}

impl Retriever for EngineRetriever {
    fn depth(&self) -> usize {
        self.k
    }

    fn retrieve(&self, query: usize, pool: &[usize], k_out: usize) -> Result<Retrieval> {
        if pool.is_empty() {
            return Err(Error::Empty("pool"));
        }
        let dim = self.query_encoder.dim();
        let mut flat = Vec::with_capacity(pool.len() * dim);
        for &p in pool {
            flat.extend_from_slice(self.ref_embs[p].as_slice());
        }
        let ids = pool.iter().map(|&p| self.ids[p].clone()).collect();
        let index = VectorIndex::from_flat(ids, dim, &flat, IndexMode::Exact)?;
        let seqs = pool.iter().map(|&p| self.seqs[p].clone()).collect();
        let engine = SearchEngine::<ComparerParams>::from_parts(
            self.query_encoder.clone(),
            self.reference_encoder.clone(),
            index,
            seqs,
        )?
        .with_k(self.k.min(pool.len()))?;
        let k_out = k_out.min(engine.k());
        let result = match &self.comparer {
            Some(c) => engine.with_comparer(c.clone()).search_with_embedding(
                &self.seqs[query],
                &self.query_embs[query],
                k_out,
                true,
            )?,
            None => engine.search_with_embedding(&self.seqs[query], &self.query_embs[query], k_out, false)?,
        };
        Ok(Retrieval {
            ranked: result.entries.iter().map(|e| pool[e.pos]).collect(),
            stage1: result.stats.stage1,
            stage3: result.stats.stage3,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalQuery {
    pub query: usize,
    pub truth: usize,
    /// Other-class records in draw order; pools take a prefix.
    distractors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTask {
    pub queries: Vec<EvalQuery>,
    pub max_poolsize: usize,
    pub seed: u64,
}

impl EvalTask {
    /// One query per sampled class (classes need at least two variants).
    pub fn sample(corpus: &Corpus, n_queries: usize, max_poolsize: usize, seed: u64) -> Result<Self> {
        if n_queries == 0 {
            return Err(Error::InvalidArgument("need at least one query".into()));
        }
        if max_poolsize < 1 {
            return Err(Error::InvalidArgument("poolsize must be at least 1".into()));
        }
        let mut eligible: Vec<&Vec<usize>> =
            corpus.classes().values().filter(|m| m.len() >= 2).collect();
        if eligible.len() < n_queries {
            return Err(Error::InsufficientData(format!(
                "{n_queries} queries requested but only {} classes have two or more variants",
                eligible.len()
            )));
        }
        let mut rng = rng_for(seed, "eval/queries");
        eligible.shuffle(&mut rng);
        let mut queries = Vec::with_capacity(n_queries);
        for (qi, members) in eligible.into_iter().take(n_queries).enumerate() {
            let a = rng.random_range(0..members.len());
            let mut b = rng.random_range(0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            let class: HashSet<usize> = members.iter().copied().collect();
            let mut others: Vec<usize> = (0..corpus.len()).filter(|p| !class.contains(p)).collect();
            let need = max_poolsize - 1;
            if others.len() < need {
                return Err(Error::InvalidArgument(format!(
                    "poolsize {max_poolsize} needs {need} distractors but only {} exist",
                    others.len()
                )));
            }
            let mut prng = rng_for(seed, &format!("eval/pool/{qi}"));
            let (chosen, _) = others.partial_shuffle(&mut prng, need);
            queries.push(EvalQuery {
                query: members[a],
                truth: members[b],
                distractors: chosen.to_vec(),
            });
        }
        Ok(EvalTask {
            queries,
            max_poolsize,
            seed,
        })
    }

    /// Ground truth followed by the first `poolsize - 1` distractors.
    pub fn pool(&self, q: &EvalQuery, poolsize: usize) -> Result<Vec<usize>> {
        if poolsize == 0 || poolsize > self.max_poolsize {
            return Err(Error::InvalidArgument(format!(
                "poolsize {poolsize} outside 1..={}",
                self.max_poolsize
            )));
        }
        let mut pool = Vec::with_capacity(poolsize);
        pool.push(q.truth);
        pool.extend_from_slice(&q.distractors[..poolsize - 1]);
        Ok(pool)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub poolsize: usize,
    pub n_queries: usize,
    pub ranks: Vec<Rank>,
    pub stage1_ms: f64,
    pub stage3_ms: f64,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<Rank>, ks: &[usize], poolsize: usize) -> Result<Self> {
        let recall_at = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            mrr: mrr(&ranks)?,
            recall_at,
            poolsize,
            n_queries: ranks.len(),
            ranks,
            stage1_ms: 0.0,
            stage3_ms: 0.0,
        })
    }

    pub fn recall(&self, k: usize) -> f64 {
        match self.recall_at.get(&k) {
            Some(&r) => r,
            None => recall_at_k(&self.ranks, k).unwrap_or(0.0),
        }
    }

    /// Row matching [`REPORT_CSV_HEADER`]; timing columns stay empty unless
    /// `timings` is set, which keeps default reports reproducible.
    pub fn csv_row(&self, timings: bool) -> String {
        let mut s = format!("{},{},{:.6}", self.poolsize, self.n_queries, self.mrr);
        for k in REPORT_KS {
            let _ = write!(s, ",{:.6}", self.recall(k));
        }
        if timings {
            let _ = write!(s, ",{:.4},{:.4}", self.stage1_ms, self.stage3_ms);
        } else {
            s.push_str(",,");
        }
        s
    }
}

pub fn reports_csv(reports: &[EvalReport], timings: bool) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row(timings));
        s.push('\n');
    }
    s
}

pub fn run_eval<R: Retriever + ?Sized>(
    retriever: &R,
    task: &EvalTask,
    poolsize: usize,
    ks: &[usize],
) -> Result<EvalReport> {
    let k_out = retriever.depth();
    let outcomes: Vec<(Rank, Duration, Duration)> = task
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let pool = task.pool(q, poolsize)?;
            let r = retriever
                .retrieve(q.query, &pool, k_out)
                .map_err(|e| Error::at(i, e))?;
            let rank = r.ranked.iter().position(|&p| p == q.truth).map(|i| i + 1);
            Ok((rank, r.stage1, r.stage3))
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    let stage1_ms = outcomes.iter().map(|o| o.1.as_secs_f64()).sum::<f64>() * 1e3 / n;
    let stage3_ms = outcomes.iter().map(|o| o.2.as_secs_f64()).sum::<f64>() * 1e3 / n;
    let mut report = EvalReport::from_ranks(outcomes.into_iter().map(|o| o.0).collect(), ks, poolsize)?;
    report.stage1_ms = stage1_ms;
    report.stage3_ms = stage3_ms;
    Ok(report)
}

/// One report per pool size, all over the same queries and nested pools.
pub fn pool_sweep_sizes<R: Retriever + ?Sized>(
    retriever: &R,
    task: &EvalTask,
    sizes: &[usize],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    sizes.iter().map(|&p| run_eval(retriever, task, p, ks)).collect()
}

/// Pool sizes `2^i` for each exponent.
pub fn pool_sweep<R: Retriever + ?Sized>(
    retriever: &R,
    task: &EvalTask,
    exponents: &[u32],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let sizes = exponents
        .iter()
        .map(|&i| {
            1usize
                .checked_shl(i)
                .filter(|_| i < usize::BITS)
                .ok_or_else(|| Error::InvalidArgument(format!("exponent {i} too large")))
        })
        .collect::<Result<Vec<_>>>()?;
    pool_sweep_sizes(retriever, task, &sizes, ks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VulnTask {
    pub query: usize,
    pub vuln: Vec<usize>,
    pub pool: Vec<usize>,
}

impl VulnTask {
    /// One task per vulnerable class: its first variant queries a pool of
    /// every other record, and the class's other variants are the targets.
    pub fn from_corpus(corpus: &Corpus) -> Vec<VulnTask> {
        corpus
            .classes()
            .values()
            .filter(|m| m.len() >= 2 && m.iter().all(|&p| corpus.record(p).is_vulnerable))
            .map(|m| {
                let query = m[0];
                VulnTask {
                    query,
                    vuln: m[1..].to_vec(),
                    pool: (0..corpus.len()).filter(|&p| p != query).collect(),
                }
            })
            .collect()
    }
}

/// Share of `vuln` found in the first `vuln.len()` entries of `retrieved`.
pub fn vuln_recall_of(retrieved: &[usize], vuln: &[usize]) -> Result<f64> {
    if vuln.is_empty() {
        return Err(Error::Empty("vulnerable id set"));
    }
    let g = vuln.len();
    let targets: HashSet<usize> = vuln.iter().copied().collect();
    let found = retrieved.iter().take(g).filter(|p| targets.contains(p)).count();
    Ok(found as f64 / g as f64)
}

pub fn vuln_recall<R: Retriever + ?Sized>(retriever: &R, task: &VulnTask) -> Result<f64> {
    let g = task.vuln.len();
    if g == 0 {
        return Err(Error::Empty("vulnerable id set"));
    }
    if g > retriever.depth() {
        return Err(Error::InvalidArgument(format!(
            "{g} vulnerable targets exceed retrieval depth {}",
            retriever.depth()
        )));
    }
    let r = retriever.retrieve(task.query, &task.pool, g)?;
    vuln_recall_of(&r.ranked, &task.vuln)
}

/// Mean [`vuln_recall`] over tasks.
pub fn mean_vuln_recall<R: Retriever + ?Sized>(retriever: &R, tasks: &[VulnTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Empty("vulnerability tasks"));
    }
    let recalls: Vec<f64> = tasks
        .par_iter()
        .map(|t| vuln_recall(retriever, t))
        .collect::<Result<_>>()?;
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}
