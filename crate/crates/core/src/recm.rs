//! Contrastive training of the embedding model with a reusable embedding
//! cache.
//!
//! Each step encodes `n` positive pairs `(Q_i, R_i)` with the query and
//! reference encoders, scores every query against the in-batch references
//! followed by the cached references (oldest first), and minimizes InfoNCE.
//! Only the query encoder receives gradients; the reference encoder tracks it
//! by momentum, and the step's reference embeddings are then pushed into the
//! FIFO cache as negatives for later steps.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::encoder::{dot, Embedding, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, ParamSet};
use crate::seed::rng_for;
use crate::tokenizer::{SubwordVocab, TokenSeq, DEFAULT_MAX_LEN};

/// Fixed-capacity FIFO ring of reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    capacity: usize,
    ring: Vec<f64>,
    head: usize,
    len: usize,
}

impl EmbeddingCache {
    pub fn new(dim: usize, capacity: usize) -> Self {
        EmbeddingCache {
            dim,
            capacity,
            ring: vec![0.0; dim * capacity],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Append in order, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, embs: &[Embedding]) -> Result<()> {
        if let Some(e) = embs.iter().find(|e| e.dim() != self.dim) {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: e.dim(),
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for e in embs {
            let slot = if self.len < self.capacity {
                self.len += 1;
                (self.head + self.len - 1) % self.capacity
            } else {
                let s = self.head;
                self.head = (self.head + 1) % self.capacity;
                s
            };
            self.ring[slot * self.dim..][..self.dim].copy_from_slice(&e.0);
        }
        Ok(())
    }

    /// Entries oldest-first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len).map(move |k| {
            let slot = (self.head + k) % self.capacity;
            &self.ring[slot * self.dim..][..self.dim]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    /// d loss / d q_i for each query embedding.
    pub grad_q: Vec<Vec<f64>>,
    /// Logit columns per row: n + cache entries.
    pub width: usize,
}

/// Mean over rows of `-log softmax(q_i . [r; cache] / tau)[i]`.
pub fn infonce_loss(
    q: &[Embedding],
    r: &[Embedding],
    cache: &EmbeddingCache,
    tau: f64,
) -> Result<InfoNce> {
    if !(tau > 0.0) {
        return Err(Error::InvalidSpec {
            field: "temperature",
            reason: format!("{tau} is not positive"),
        });
    }
    if q.is_empty() {
        return Err(Error::Empty("query embeddings"));
    }
    if q.len() != r.len() {
        return Err(Error::DimMismatch {
            expected: q.len(),
            got: r.len(),
        });
    }
    let dim = q[0].dim();
    if let Some(e) = q.iter().chain(r).find(|e| e.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: e.dim(),
        });
    }
    if !cache.is_empty() && cache.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: cache.dim(),
        });
    }

    let refs: Vec<&[f64]> = r.iter().map(|e| e.as_slice()).chain(cache.iter()).collect();
    let n = q.len();
    let rows: Vec<(f64, Vec<f64>)> = q
        .par_iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> = refs.iter().map(|rj| dot(&qi.0, rj) / tau).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let pos = logits[i];
            let loss = if pos == max {
                // Keeps precision when the positive dominates.
                let rest: f64 = logits
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, l)| (l - pos).exp())
                    .sum();
                rest.ln_1p()
            } else {
                max - pos + denom.ln()
            };
            let mut g = vec![0.0; dim];
            for (e, rj) in exps.iter().zip(&refs) {
                let p = e / denom;
                for (gk, rk) in g.iter_mut().zip(rj.iter()) {
                    *gk += p * rk;
                }
            }
            let scale = 1.0 / (tau * n as f64);
            for (gk, rk) in g.iter_mut().zip(&r[i].0) {
                *gk = (*gk - rk) * scale;
            }
            (loss, g)
        })
        .collect();

    let loss = rows.iter().map(|(l, _)| l).sum::<f64>() / n as f64;
    Ok(InfoNce {
        loss,
        grad_q: rows.into_iter().map(|(_, g)| g).collect(),
        width: refs.len(),
    })
}

/// `reference <- m * reference + (1 - m) * query`, elementwise over every field.
pub fn momentum_update(
    reference: &mut EncoderParams,
    query: &EncoderParams,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidSpec {
            field: "momentum",
            reason: format!("{m} is not in [0, 1]"),
        });
    }
    if reference.dims() != query.dims() {
        return Err(Error::InvalidArgument(
            "reference and query encoders differ in shape".into(),
        ));
    }
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        reference.clone_from(query);
        return Ok(());
    }
    for (rt, qt) in reference.tensors_mut().into_iter().zip(query.tensors()) {
        for (r, &q) in rt.iter_mut().zip(qt) {
            // Clamp absorbs rounding so the result stays between the inputs.
            *r = (m * *r + (1.0 - m) * q).clamp(r.min(q), r.max(q));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub cache_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// d_tok = d_h = d_out
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.05,
            momentum: 0.99,
            cache_size: 8192,
            batch_size: 32,
            steps: 1000,
            adam: AdamConfig::default(),
            seed: 0,
            dim: crate::encoder::DEFAULT_DIM,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidSpec { field, reason });
        if !(self.temperature > 0.0) {
            return bad("temperature", format!("{} is not positive", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} is not in [0, 1]", self.momentum));
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2".into());
        }
        if self.dim == 0 || self.max_len == 0 {
            return bad("dim", "dimensions and max_len must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Logit columns used by this step.
    pub width: usize,
    /// Cache entries after the push.
    pub cache_fill: usize,
}

/// The mutable state of a training run.
#[derive(Debug, Clone)]
pub struct RecmTrainer {
    pub query: EncoderParams,
    pub reference: EncoderParams,
    pub adam: AdamState<EncoderParams>,
    pub cache: EmbeddingCache,
    pub temperature: f64,
    pub momentum: f64,
}

impl RecmTrainer {
    /// Starts with the reference encoder as an exact copy of the query encoder.
    pub fn new(query: EncoderParams, cfg: &TrainConfig) -> Self {
        RecmTrainer {
            reference: query.clone(),
            adam: AdamState::new(&query, cfg.adam),
            cache: EmbeddingCache::new(query.dim(), cfg.cache_size),
            query,
            temperature: cfg.temperature,
            momentum: cfg.momentum,
        }
    }

    /// One step: encode, InfoNCE against the current cache, Adam on the
    /// query encoder, momentum on the reference encoder, then push the
    /// (pre-update) reference embeddings.
    pub fn step(&mut self, batch: &[(TokenSeq, TokenSeq)]) -> Result<StepStats> {
        if batch.len() < 2 {
            return Err(Error::InsufficientData("a step needs at least 2 pairs".into()));
        }
        let qs: Vec<TokenSeq> = batch.iter().map(|(q, _)| q.clone()).collect();
        let rs: Vec<TokenSeq> = batch.iter().map(|(_, r)| r.clone()).collect();
        let q_emb = self.query.embed_batch(&qs)?;
        let r_emb = self.reference.embed_batch(&rs)?;

        let nce = infonce_loss(&q_emb, &r_emb, &self.cache, self.temperature)?;
        let grads = self.query.backward(&qs, &nce.grad_q)?;
        self.adam.step(&mut self.query, &grads)?;
        momentum_update(&mut self.reference, &self.query, self.momentum)?;
        self.cache.push(&r_emb)?;

        Ok(StepStats {
            loss: nce.loss,
            width: nce.width,
            cache_fill: self.cache.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub query: EncoderParams,
    pub reference: EncoderParams,
    pub losses: Vec<f64>,
}

/// Draws `n` distinct classes per step and one ordered positive pair per class.
#[derive(Debug)]
pub struct PairSampler {
    /// Per eligible class, record positions.
    classes: Vec<Vec<usize>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl PairSampler {
    pub fn new(corpus: &Corpus, n: usize, seed: u64, stream: &str) -> Result<Self> {
        let classes: Vec<Vec<usize>> = corpus
            .classes()
            .values()
            .filter(|m| m.len() >= 2)
            .cloned()
            .collect();
        if classes.len() < n {
            return Err(Error::InsufficientData(format!(
                "need {n} classes with at least 2 variants, found {}",
                classes.len()
            )));
        }
        Ok(PairSampler {
            classes,
            rng: rng_for(seed, stream),
        })
    }

    /// Positions `(query, reference)` for one batch.
    pub fn next_batch(&mut self, n: usize) -> Vec<(usize, usize)> {
        let picked = sample(&mut self.rng, self.classes.len(), n);
        picked
            .into_iter()
            .map(|c| {
                let members = &self.classes[c];
                let a = self.rng.random_range(0..members.len());
                let mut b = self.rng.random_range(0..members.len() - 1);
                if b >= a {
                    b += 1;
                }
                (members[a], members[b])
            })
            .collect()
    }
}

pub fn encode_corpus(corpus: &Corpus, vocab: &SubwordVocab, max_len: usize) -> Vec<TokenSeq> {
    corpus
        .records()
        .par_iter()
        .map(|r| vocab.encode(&r.tokens, max_len))
        .collect()
}

pub fn train(corpus: &Corpus, vocab: &SubwordVocab, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_metrics(corpus, vocab, cfg, None)
}

/// Like [`train`], additionally writing `step,loss,cache_fill` CSV lines.
pub fn train_with_metrics(
    corpus: &Corpus,
    vocab: &SubwordVocab,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut sampler = PairSampler::new(corpus, cfg.batch_size, cfg.seed, "recm-batches")?;
    let seqs = encode_corpus(corpus, vocab, cfg.max_len);
    let dims = EncoderDims::new(vocab.len(), cfg.dim);
    let init = EncoderParams::init(dims, cfg.seed)?;
    let mut trainer = RecmTrainer::new(init, cfg);

    if let Some(w) = metrics.as_mut() {
        writeln!(w, "step,loss,cache_fill")?;
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(TokenSeq, TokenSeq)> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|(a, b)| (seqs[a].clone(), seqs[b].clone()))
            .collect();
        let stats = trainer.step(&batch)?;
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{step},{},{}", stats.loss, stats.cache_fill)?;
        }
        losses.push(stats.loss);
    }
    Ok(TrainOutcome {
        query: trainer.query,
        reference: trainer.reference,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn e(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    #[test]
    fn uniform_logits_give_log_width() {
        let q = vec![e(&[1.0, 0.0]); 4];
        let r = vec![e(&[0.0, 1.0]); 4];
        let out = infonce_loss(&q, &r, &EmbeddingCache::new(2, 8), 0.05).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(out.width, 4);
    }

    #[test]
    fn separated_pair_loss_is_tiny() {
        let q = vec![e(&[1.0, 0.0]), e(&[-1.0, 0.0])];
        let r = vec![e(&[1.0, 0.0]), e(&[-1.0, 0.0])];
        let out = infonce_loss(&q, &r, &EmbeddingCache::new(2, 0), 0.05).unwrap();
        let expected = (-40f64).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-30);
        assert!((out.loss - 4.248354255291589e-18).abs() < 1e-30);
    }

    #[test]
    fn cache_entry_adds_a_column() {
        let q = vec![e(&[0.5, (0.75f64).sqrt()])];
        let r = vec![e(&[1.0, 0.0])];
        let mut cache = EmbeddingCache::new(2, 4);
        cache.push(&[e(&[1.0, 0.0])]).unwrap();
        let out = infonce_loss(&q, &r, &cache, 1.0).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.width, 2);
    }

    #[test]
    fn infonce_errors() {
        let q = vec![e(&[1.0, 0.0])];
        let cache = EmbeddingCache::new(2, 1);
        assert!(infonce_loss(&q, &q, &cache, 0.0).is_err());
        assert!(infonce_loss(&q, &[e(&[1.0, 0.0, 0.0])], &cache, 1.0).is_err());
        assert!(infonce_loss(&q, &[], &cache, 1.0).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut c = EmbeddingCache::new(1, 2);
        for v in [1.0, 2.0, 3.0] {
            c.push(&[e(&[v])]).unwrap();
        }
        assert_eq!(c.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![2.0, 3.0]);

        let mut c = EmbeddingCache::new(1, 3);
        let batch: Vec<_> = (0..6).map(|v| e(&[v as f64])).collect();
        c.push(&batch).unwrap();
        assert_eq!(c.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![3.0, 4.0, 5.0]);

        let mut c = EmbeddingCache::new(1, 0);
        c.push(&batch).unwrap();
        assert!(c.is_empty());
        assert!(c.push(&[e(&[1.0, 2.0])]).is_err());
    }

    fn params(seed: u64) -> EncoderParams {
        EncoderParams::init(EncoderDims::new(6, 3), seed).unwrap()
    }

    #[test]
    fn momentum_identity_copy_and_arithmetic() {
        let q = params(1);
        let r0 = params(2);
        let mut r = r0.clone();
        momentum_update(&mut r, &q, 1.0).unwrap();
        assert_eq!(r, r0);
        momentum_update(&mut r, &q, 0.0).unwrap();
        assert_eq!(r, q);

        let mut r = params(2);
        let mut q = params(2);
        r.b1[0] = 1.0;
        q.b1[0] = 0.0;
        momentum_update(&mut r, &q, 0.99).unwrap();
        assert!((r.b1[0] - 0.99).abs() < 1e-15);

        let other = EncoderParams::init(EncoderDims::new(7, 3), 0).unwrap();
        assert!(momentum_update(&mut r, &other, 0.5).is_err());
        assert!(momentum_update(&mut r, &q, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn momentum_is_convex(m in 0.0f64..=1.0, s1 in 0u64..100, s2 in 100u64..200) {
            let q = params(s1);
            let r0 = params(s2);
            let mut r = r0.clone();
            momentum_update(&mut r, &q, m).unwrap();
            for ((out, a), b) in r.tensors().iter().zip(r0.tensors()).zip(q.tensors()) {
                for k in 0..out.len() {
                    prop_assert!(out[k] >= a[k].min(b[k]) && out[k] <= a[k].max(b[k]));
                }
            }
        }

        #[test]
        fn cache_never_exceeds_capacity(cap in 0usize..6, pushes in prop::collection::vec(0usize..5, 0..10)) {
            let mut c = EmbeddingCache::new(1, cap);
            let mut all = Vec::new();
            for (k, n) in pushes.into_iter().enumerate() {
                let batch: Vec<_> = (0..n).map(|i| e(&[(k * 10 + i) as f64])).collect();
                all.extend(batch.iter().map(|b| b.0[0]));
                c.push(&batch).unwrap();
                prop_assert!(c.len() <= cap);
            }
            let tail: Vec<f64> = all[all.len().saturating_sub(cap)..].to_vec();
            prop_assert_eq!(c.iter().map(|x| x[0]).collect::<Vec<_>>(), tail);
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..500, n in 1usize..6, extra in 0usize..4) {
            let mut rng = rng_for(seed, "t");
            let mut unit = || {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dot(&v, &v).sqrt().max(1e-9);
                Embedding(v.iter().map(|x| x / norm).collect())
            };
            let q: Vec<_> = (0..n).map(|_| unit()).collect();
            let r: Vec<_> = (0..n).map(|_| unit()).collect();
            let mut cache = EmbeddingCache::new(4, 8);
            cache.push(&(0..extra).map(|_| unit()).collect::<Vec<_>>()).unwrap();
            let out = infonce_loss(&q, &r, &cache, 0.05).unwrap();
            prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
            prop_assert_eq!(out.width, n + extra);
        }
    }
}
