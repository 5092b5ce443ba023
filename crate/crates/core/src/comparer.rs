//! Pairwise comparison model.
//!
//! Unlike the encoder, which sees one function at a time, the comparer reads
//! both token sequences jointly and returns a dissimilarity `D` (lower means
//! more similar). Features for an ordered pair `(a, b)`:
//!
//! ```text
//! [mean_a ; mean_b ; mean_a * mean_b ; |mean_a - mean_b| ; align(a, b)]
//! ```
//!
//! where `align` is a symmetric soft token alignment: each token of one side
//! attends (softmax over cosine similarities) to the tokens of the other side,
//! and the attended cosines are averaged over both directions. A 2-layer MLP
//! head maps the features to a scalar, and `D(a, b)` averages the head over
//! both operand orders so the score is symmetric.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::encoder::{dot, read_f64s, NORM_EPS};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, ParamSet};
use crate::recm::{encode_corpus, PairSampler};
use crate::seed::rng_for;
use crate::tokenizer::{SubwordVocab, TokenSeq, DEFAULT_MAX_LEN};

/// Softmax temperature of the alignment channel.
pub const ALIGN_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MARGIN: f64 = 0.25;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LR: f64 = 3e-3;

const CKPT_MAGIC: &str = "HSCMP";
const CKPT_VERSION: &str = "v1";

/// Anything that can score a pair of token sequences; lower is more similar.
pub trait PairScorer: Sync {
    fn dissimilarity(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64>;
}

/// Head hidden width equals `d_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparerParams {
    vocab_size: usize,
    d_c: usize,
    /// vocab_size x d_c
    pub token_table: Vec<f64>,
    /// (4 d_c + 1) x d_c
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    /// length 1
    pub b2: Vec<f64>,
}

impl ParamSet for ComparerParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.token_table, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.token_table,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Pooled and aligned view of one ordered pair.
struct PairTrace {
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    /// Unit-normalized rows and their pre-normalization norms.
    unit_a: Vec<f64>,
    norm_a: Vec<f64>,
    unit_b: Vec<f64>,
    norm_b: Vec<f64>,
    /// La x Lb cosine matrix.
    cos: Vec<f64>,
    /// Row-wise (a attends to b) and column-wise (b attends to a) softmax.
    attn_ab: Vec<f64>,
    attn_ba: Vec<f64>,
    /// Attended cosine per row of a / per column of b.
    att_a: Vec<f64>,
    att_b: Vec<f64>,
    align: f64,
}

struct HeadTrace {
    hidden: Vec<f64>,
    out: f64,
}

/// Sparse gradient of one pair: touched token rows plus the dense head.
struct PairGrad {
    rows: Vec<(u32, Vec<f64>)>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl ComparerParams {
    pub fn init(vocab_size: usize, d_c: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || d_c == 0 {
            return Err(Error::InvalidSpec {
                field: "d_c",
                reason: "vocabulary size and d_c must be at least 1".into(),
            });
        }
        let mut rng = rng_for(seed, "comparer-init");
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        };
        let feat = 4 * d_c + 1;
        Ok(ComparerParams {
            vocab_size,
            d_c,
            token_table: uniform(vocab_size * d_c, 1),
            w1: uniform(feat * d_c, feat),
            b1: vec![0.0; d_c],
            w2: uniform(d_c, d_c),
            b2: vec![0.0],
        })
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn feature_dim(&self) -> usize {
        4 * self.d_c + 1
    }

    fn check(&self, seq: &TokenSeq) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                len: self.vocab_size,
            });
        }
        Ok(())
    }

    fn row(&self, id: u32) -> &[f64] {
        &self.token_table[id as usize * self.d_c..][..self.d_c]
    }

    fn pool_and_normalize(&self, seq: &TokenSeq) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.d_c;
        let mut mean = vec![0.0; d];
        let mut unit = Vec::with_capacity(seq.len() * d);
        let mut norms = Vec::with_capacity(seq.len());
        for &id in &seq.ids {
            let r = self.row(id);
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
            let n = dot(r, r).sqrt();
            let inv = 1.0 / n.max(NORM_EPS);
            unit.extend(r.iter().map(|x| x * inv));
            norms.push(n);
        }
        let inv = 1.0 / seq.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        (mean, unit, norms)
    }

    fn trace(&self, a: &TokenSeq, b: &TokenSeq) -> Result<PairTrace> {
        self.check(a)?;
        self.check(b)?;
        let d = self.d_c;
        let (mean_a, unit_a, norm_a) = self.pool_and_normalize(a);
        let (mean_b, unit_b, norm_b) = self.pool_and_normalize(b);
        let (la, lb) = (a.len(), b.len());

        let mut cos = vec![0.0; la * lb];
        for i in 0..la {
            let ui = &unit_a[i * d..][..d];
            for j in 0..lb {
                cos[i * lb + j] = dot(ui, &unit_b[j * d..][..d]);
            }
        }

        let inv_t = 1.0 / ALIGN_TEMPERATURE;
        let mut attn_ab = vec![0.0; la * lb];
        let mut att_a = vec![0.0; la];
        for i in 0..la {
            let row = &cos[i * lb..][..lb];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..lb {
                let e = ((row[j] - max) * inv_t).exp();
                attn_ab[i * lb + j] = e;
                z += e;
            }
            let mut acc = 0.0;
            for j in 0..lb {
                attn_ab[i * lb + j] /= z;
                acc += attn_ab[i * lb + j] * row[j];
            }
            att_a[i] = acc;
        }
        let mut attn_ba = vec![0.0; la * lb];
        let mut att_b = vec![0.0; lb];
        for j in 0..lb {
            let max = (0..la).map(|i| cos[i * lb + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..la {
                let e = ((cos[i * lb + j] - max) * inv_t).exp();
                attn_ba[i * lb + j] = e;
                z += e;
            }
            let mut acc = 0.0;
            for i in 0..la {
                attn_ba[i * lb + j] /= z;
                acc += attn_ba[i * lb + j] * cos[i * lb + j];
            }
            att_b[j] = acc;
        }
        let align = 0.5
            * (att_a.iter().sum::<f64>() / la as f64 + att_b.iter().sum::<f64>() / lb as f64);

        Ok(PairTrace {
            mean_a,
            mean_b,
            unit_a,
            norm_a,
            unit_b,
            norm_b,
            cos,
            attn_ab,
            attn_ba,
            att_a,
            att_b,
            align,
        })
    }

    fn features(&self, x: &[f64], y: &[f64], align: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feature_dim());
        f.extend_from_slice(x);
        f.extend_from_slice(y);
        f.extend(x.iter().zip(y).map(|(p, q)| p * q));
        f.extend(x.iter().zip(y).map(|(p, q)| (p - q).abs()));
        f.push(align);
        f
    }

    fn head(&self, feat: &[f64]) -> HeadTrace {
        let d = self.d_c;
        let mut hidden = self.b1.clone();
        for (k, &x) in feat.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.w1[k * d..][..d];
            for (h, w) in hidden.iter_mut().zip(row) {
                *h += x * w;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.tanh());
        let out = dot(&hidden, &self.w2) + self.b2[0];
        HeadTrace { hidden, out }
    }

    pub fn score_pair(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
        let t = self.trace(a, b)?;
        let f_ab = self.features(&t.mean_a, &t.mean_b, t.align);
        let f_ba = self.features(&t.mean_b, &t.mean_a, t.align);
        Ok(0.5 * (self.head(&f_ab).out + self.head(&f_ba).out))
    }

    /// Gradient of `upstream * D(a, b)`.
    fn pair_grad(&self, a: &TokenSeq, b: &TokenSeq, upstream: f64) -> Result<PairGrad> {
        let d = self.d_c;
        let fd = self.feature_dim();
        let t = self.trace(a, b)?;
        let mut g = PairGrad {
            rows: Vec::new(),
            w1: vec![0.0; fd * d],
            b1: vec![0.0; d],
            w2: vec![0.0; d],
            b2: 0.0,
        };
        let mut g_ma = vec![0.0; d];
        let mut g_mb = vec![0.0; d];
        let mut g_align = 0.0;

        for swapped in [false, true] {
            let (x, y) = if swapped {
                (&t.mean_b, &t.mean_a)
            } else {
                (&t.mean_a, &t.mean_b)
            };
            let feat = self.features(x, y, t.align);
            let h = self.head(&feat);
            let g_out = 0.5 * upstream;
            g.b2 += g_out;
            let mut g_z = vec![0.0; d];
            for k in 0..d {
                g.w2[k] += g_out * h.hidden[k];
                g_z[k] = g_out * self.w2[k] * (1.0 - h.hidden[k] * h.hidden[k]);
                g.b1[k] += g_z[k];
            }
            let mut g_feat = vec![0.0; fd];
            for (k, &fk) in feat.iter().enumerate() {
                let row = &self.w1[k * d..][..d];
                let g_row = &mut g.w1[k * d..][..d];
                let mut acc = 0.0;
                for j in 0..d {
                    g_row[j] += fk * g_z[j];
                    acc += row[j] * g_z[j];
                }
                g_feat[k] = acc;
            }
            let (g_x, g_y) = if swapped {
                (&mut g_mb, &mut g_ma)
            } else {
                (&mut g_ma, &mut g_mb)
            };
            for k in 0..d {
                let sign = match x[k] - y[k] {
                    v if v > 0.0 => 1.0,
                    v if v < 0.0 => -1.0,
                    _ => 0.0,
                };
                g_x[k] += g_feat[k] + g_feat[2 * d + k] * y[k] + g_feat[3 * d + k] * sign;
                g_y[k] += g_feat[d + k] + g_feat[2 * d + k] * x[k] - g_feat[3 * d + k] * sign;
            }
            g_align += g_feat[4 * d];
        }

        // Alignment channel: d align / d cos, then through the unit rows.
        let (la, lb) = (a.len(), b.len());
        let inv_t = 1.0 / ALIGN_TEMPERATURE;
        let ca = 0.5 * g_align / la as f64;
        let cb = 0.5 * g_align / lb as f64;
        let mut g_cos = vec![0.0; la * lb];
        for i in 0..la {
            for j in 0..lb {
                let k = i * lb + j;
                let c = t.cos[k];
                g_cos[k] = ca * t.attn_ab[k] * (1.0 + (c - t.att_a[i]) * inv_t)
                    + cb * t.attn_ba[k] * (1.0 + (c - t.att_b[j]) * inv_t);
            }
        }
        let mut g_ua = vec![0.0; la * d];
        let mut g_ub = vec![0.0; lb * d];
        for i in 0..la {
            let ui = &t.unit_a[i * d..][..d];
            for j in 0..lb {
                let gc = g_cos[i * lb + j];
                if gc == 0.0 {
                    continue;
                }
                let uj = &t.unit_b[j * d..][..d];
                let (gi, gj) = (&mut g_ua[i * d..][..d], &mut g_ub[j * d..][..d]);
                for k in 0..d {
                    gi[k] += gc * uj[k];
                    gj[k] += gc * ui[k];
                }
            }
        }

        let mut push_rows = |seq: &TokenSeq, unit: &[f64], norms: &[f64], g_u: &[f64], g_mean: &[f64]| {
            let inv_len = 1.0 / seq.len() as f64;
            for (i, &id) in seq.ids.iter().enumerate() {
                let u = &unit[i * d..][..d];
                let gu = &g_u[i * d..][..d];
                let n = norms[i];
                let row: Vec<f64> = if n > NORM_EPS {
                    let proj = dot(u, gu);
                    (0..d)
                        .map(|k| (gu[k] - u[k] * proj) / n + g_mean[k] * inv_len)
                        .collect()
                } else {
                    (0..d).map(|k| gu[k] / NORM_EPS + g_mean[k] * inv_len).collect()
                };
                g.rows.push((id, row));
            }
        };
        push_rows(a, &t.unit_a, &t.norm_a, &g_ua, &g_ma);
        push_rows(b, &t.unit_b, &t.norm_b, &g_ub, &g_mb);
        Ok(g)
    }

    /// Gradient of `sum_k upstream_k * D(pairs_k)`, summed in pair order.
    pub fn backward(&self, pairs: &[(&TokenSeq, &TokenSeq)], upstream: &[f64]) -> Result<ComparerParams> {
        if pairs.len() != upstream.len() {
            return Err(Error::DimMismatch {
                expected: pairs.len(),
                got: upstream.len(),
            });
        }
        let per_pair: Vec<Option<PairGrad>> = pairs
            .par_iter()
            .zip(upstream)
            .enumerate()
            .map(|(k, ((a, b), &u))| {
                if u == 0.0 {
                    // Still validate inputs.
                    self.check(a).and_then(|_| self.check(b)).map_err(|e| Error::at(k, e))?;
                    return Ok(None);
                }
                self.pair_grad(a, b, u).map(Some).map_err(|e| Error::at(k, e))
            })
            .collect::<Result<_>>()?;

        let d = self.d_c;
        let mut grad = self.zeros_like();
        for pg in per_pair.into_iter().flatten() {
            for (id, row) in pg.rows {
                let dst = &mut grad.token_table[id as usize * d..][..d];
                for (x, y) in dst.iter_mut().zip(&row) {
                    *x += y;
                }
            }
            for (x, y) in grad.w1.iter_mut().zip(&pg.w1) {
                *x += y;
            }
            for (x, y) in grad.b1.iter_mut().zip(&pg.b1) {
                *x += y;
            }
            for (x, y) in grad.w2.iter_mut().zip(&pg.w2) {
                *x += y;
            }
            grad.b2[0] += pg.b2;
        }
        Ok(grad)
    }

    pub fn to_bytes(&self, vocab_hash: u64) -> Vec<u8> {
        let mut out =
            format!("{CKPT_MAGIC} {CKPT_VERSION} {vocab_hash:016x} {}\n", self.d_c).into_bytes();
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_vocab_hash: u64) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("comparer checkpoint has no header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("comparer header is not UTF-8".into()))?;
        let f: Vec<&str> = header.split(' ').collect();
        if f.len() != 4 || f[0] != CKPT_MAGIC {
            return Err(Error::Format("not a comparer checkpoint".into()));
        }
        if f[1] != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported comparer version `{}`", f[1])));
        }
        let found = u64::from_str_radix(f[2], 16)
            .map_err(|e| Error::Format(format!("bad vocab hash: {e}")))?;
        if found != expected_vocab_hash {
            return Err(Error::VocabMismatch {
                expected: expected_vocab_hash,
                found,
            });
        }
        let d_c: usize = f[3]
            .parse()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Format(format!("bad d_c `{}`", f[3])))?;
        let floats = read_f64s(&bytes[nl + 1..])?;
        let feat = 4 * d_c + 1;
        let fixed = feat * d_c + d_c + d_c + 1;
        if floats.len() < fixed || !(floats.len() - fixed).is_multiple_of(d_c) {
            return Err(Error::Format("comparer payload size does not match header".into()));
        }
        let vocab_size = (floats.len() - fixed) / d_c;
        let mut it = floats.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        let p = ComparerParams {
            vocab_size,
            d_c,
            token_table: take(vocab_size * d_c),
            w1: take(feat * d_c),
            b1: take(d_c),
            w2: take(d_c),
            b2: take(1),
        };
        if !p.all_finite() {
            return Err(Error::NonFinite("comparer checkpoint"));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab_hash: u64) -> Result<()> {
        fs::write(path, self.to_bytes(vocab_hash))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected_vocab_hash: u64) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected_vocab_hash)
    }
}

impl PairScorer for ComparerParams {
    fn dissimilarity(&self, a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
        self.score_pair(a, b)
    }
}

/// `max(0, d_pos - d_neg + margin)` with `D` a dissimilarity.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Negative pairing for a batch of `n` positives: query `i` against reference `(i + 1) mod n`.
pub fn cyclic_negatives(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i + 1) % n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub dim: usize,
    pub max_len: usize,
}

impl Default for CompareTrainConfig {
    fn default() -> Self {
        CompareTrainConfig {
            margin: DEFAULT_MARGIN,
            batch_size: 32,
            steps: 1000,
            adam: AdamConfig {
                lr: DEFAULT_LR,
                ..AdamConfig::default()
            },
            seed: 0,
            dim: DEFAULT_DIM,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub params: ComparerParams,
    pub losses: Vec<f64>,
}

/// Mean triplet loss of one batch of positive pairs and its gradient.
pub fn triplet_batch(
    params: &ComparerParams,
    batch: &[(TokenSeq, TokenSeq)],
    margin: f64,
) -> Result<(f64, ComparerParams)> {
    let n = batch.len();
    let negs = cyclic_negatives(n);
    let mut pairs: Vec<(&TokenSeq, &TokenSeq)> = Vec::with_capacity(2 * n);
    pairs.extend(batch.iter().map(|(q, r)| (q, r)));
    pairs.extend(negs.iter().map(|&(i, j)| (&batch[i].0, &batch[j].1)));
    let scores: Vec<f64> = pairs
        .par_iter()
        .map(|(a, b)| params.score_pair(a, b))
        .collect::<Result<_>>()?;

    let mut upstream = vec![0.0; 2 * n];
    let mut loss = 0.0;
    for i in 0..n {
        let l = triplet_loss(scores[i], scores[n + i], margin);
        loss += l;
        if l > 0.0 {
            upstream[i] = 1.0 / n as f64;
            upstream[n + i] = -1.0 / n as f64;
        }
    }
    let grad = params.backward(&pairs, &upstream)?;
    Ok((loss / n as f64, grad))
}

pub fn train_comparer(
    corpus: &Corpus,
    vocab: &SubwordVocab,
    cfg: &CompareTrainConfig,
) -> Result<CompareOutcome> {
    if !(cfg.margin > 0.0) {
        return Err(Error::InvalidSpec {
            field: "margin",
            reason: format!("{} is not positive", cfg.margin),
        });
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidSpec {
            field: "batch_size",
            reason: "must be at least 2".into(),
        });
    }
    let mut sampler = PairSampler::new(corpus, cfg.batch_size, cfg.seed, "comparer-batches")?;
    let seqs = encode_corpus(corpus, vocab, cfg.max_len);
    let mut params = ComparerParams::init(vocab.len(), cfg.dim, cfg.seed)?;
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<(TokenSeq, TokenSeq)> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|(a, b)| (seqs[a].clone(), seqs[b].clone()))
            .collect();
        let (loss, grad) = triplet_batch(&params, &batch, cfg.margin)?;
        adam.step(&mut params, &grad)?;
        losses.push(loss);
    }
    Ok(CompareOutcome { params, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub id: String,
    pub dissimilarity: f64,
}

/// Order candidates by ascending dissimilarity to `query`, ties by id.
pub fn rerank<S: PairScorer + ?Sized>(
    scorer: &S,
    query: &TokenSeq,
    candidates: &[(&str, &TokenSeq)],
) -> Result<Vec<Reranked>> {
    if candidates.is_empty() {
        return Err(Error::Empty("rerank candidates"));
    }
    let mut out = candidates
        .iter()
        .map(|(id, seq)| {
            Ok(Reranked {
                id: id.to_string(),
                dissimilarity: scorer.dissimilarity(query, seq)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|x, y| {
        x.dissimilarity
            .total_cmp(&y.dissimilarity)
            .then_with(|| x.id.cmp(&y.id))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq::new(ids.to_vec())
    }

    #[test]
    fn symmetric_and_deterministic() {
        let p = ComparerParams::init(20, 4, 1).unwrap();
        let (a, b) = (seq(&[1, 2, 3]), seq(&[4, 5, 3, 3]));
        let d = p.score_pair(&a, &b).unwrap();
        assert_eq!(d, p.score_pair(&a, &b).unwrap());
        assert!((d - p.score_pair(&b, &a).unwrap()).abs() < 1e-12);
        assert_eq!(p.score_pair(&a, &a).unwrap(), p.score_pair(&a, &a).unwrap());
    }

    #[test]
    fn constant_head() {
        let mut p = ComparerParams::init(20, 4, 1).unwrap();
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        p.b2[0] = 0.7;
        for (a, b) in [(seq(&[1]), seq(&[2, 3])), (seq(&[5, 5]), seq(&[5]))] {
            assert_eq!(p.score_pair(&a, &b).unwrap(), 0.7);
        }
    }

    #[test]
    fn score_errors() {
        let p = ComparerParams::init(20, 4, 1).unwrap();
        assert!(matches!(p.score_pair(&seq(&[]), &seq(&[1])), Err(Error::Empty(_))));
        assert!(matches!(
            p.score_pair(&seq(&[20]), &seq(&[1])),
            Err(Error::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn triplet_cases() {
        assert_eq!(triplet_loss(0.1, 0.9, 0.25), 0.0);
        assert!((triplet_loss(0.8, 0.7, 0.25) - 0.35).abs() < 1e-12);
        assert_eq!(triplet_loss(0.4, 0.4, 0.25), 0.25);
    }

    #[test]
    fn cyclic_shift_pairs() {
        assert_eq!(cyclic_negatives(3), vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn rerank_rules() {
        let p = ComparerParams::init(20, 4, 1).unwrap();
        let q = seq(&[1, 2]);
        let c = seq(&[3]);
        let one = rerank(&p, &q, &[("x", &c)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].id, "x");

        let same = rerank(&p, &q, &[("b", &c), ("a", &c)]).unwrap();
        assert_eq!(same[0].id, "a");
        assert_eq!(same[1].id, "b");

        assert!(matches!(rerank(&p, &q, &[]), Err(Error::Empty(_))));
    }

    /// Two classes whose variants all mean-pool to the zero vector under a
    /// rigged token table: any score built on pooled embeddings is constant
    /// across pairs, while the alignment channel separates them.
    #[test]
    fn joint_input_separates_what_pooling_cannot() {
        let d = 2;
        let mut p = ComparerParams::init(6, d, 0).unwrap();
        p.token_table = vec![
            1.0, 0.0, // 0
            -1.0, 0.0, // 1
            0.0, 1.0, // 2
            0.0, -1.0, // 3
            0.5, 0.0, // 4
            -0.5, 0.0, // 5
        ];
        p.w1.fill(0.0);
        p.b1.fill(0.0);
        p.w2.fill(0.0);
        p.w1[4 * d * d] = 3.0; // align -> hidden unit 0
        p.w2[0] = -1.0; // D = -tanh(3 * align)
        p.b2[0] = 0.0;

        let class_a = [seq(&[0, 1]), seq(&[1, 0, 0, 1]), seq(&[4, 5])];
        let class_b = [seq(&[2, 3]), seq(&[3, 2, 3, 2])];
        let pooled = |s: &TokenSeq| -> Vec<f64> {
            let mut m = vec![0.0; d];
            for &id in &s.ids {
                for k in 0..d {
                    m[k] += p.token_table[id as usize * d + k] / s.len() as f64;
                }
            }
            m
        };
        for s in class_a.iter().chain(&class_b) {
            assert!(pooled(s).iter().all(|x| x.abs() < 1e-15));
        }

        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (x, y) in [(0, 1), (0, 2), (1, 2)] {
            pos.push(p.score_pair(&class_a[x], &class_a[y]).unwrap());
        }
        pos.push(p.score_pair(&class_b[0], &class_b[1]).unwrap());
        for a in &class_a {
            for b in &class_b {
                neg.push(p.score_pair(a, b).unwrap());
            }
        }
        let worst_pos = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best_neg = neg.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(worst_pos < best_neg, "pos {pos:?} neg {neg:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ComparerParams::init(40, 3, 2).unwrap();
        let bytes = p.to_bytes(7);
        assert!(bytes.starts_with(b"HSCMP v1 0000000000000007 3\n"));
        assert_eq!(ComparerParams::from_bytes(&bytes, 7).unwrap(), p);
        assert!(ComparerParams::from_bytes(&bytes, 8).is_err());
    }

    proptest! {
        #[test]
        fn rerank_is_a_permutation(seed in 0u64..200, n in 1usize..8) {
            let p = ComparerParams::init(12, 3, seed).unwrap();
            let q = seq(&[1, 2, 3]);
            let seqs: Vec<TokenSeq> = (0..n).map(|i| seq(&[(i % 12) as u32, ((i * 5) % 12) as u32])).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("id{}", (i * 7) % 10)).collect();
            let cands: Vec<(&str, &TokenSeq)> = ids.iter().map(String::as_str).zip(&seqs).collect();
            let out = rerank(&p, &q, &cands).unwrap();
            let mut a: Vec<&str> = out.iter().map(|r| r.id.as_str()).collect();
            let mut b: Vec<&str> = ids.iter().map(String::as_str).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(out.windows(2).all(|w| w[0].dissimilarity <= w[1].dissimilarity));
        }

        #[test]
        fn triplet_zero_iff_margin_met(dp in -2.0f64..2.0, dn in -2.0f64..2.0, m in 0.01f64..1.0) {
            let l = triplet_loss(dp, dn, m);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, dp - dn + m <= 0.0);
        }
    }
}
