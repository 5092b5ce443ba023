//! The embedding model.
//!
//! `mean-pool(token rows) -> affine -> tanh -> affine -> L2-normalize`.
//! Outputs are unit vectors, so dot product and cosine coincide. The same
//! type is instantiated twice during training: the query encoder, which is
//! gradient-trained, and the reference encoder, which follows it by momentum.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::seed::rng_for;
use crate::tokenizer::TokenSeq;

pub const NORM_EPS: f64 = 1e-12;
pub const DEFAULT_DIM: usize = 64;

const CKPT_MAGIC: &str = "HSENC";
const CKPT_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub d_tok: usize,
    pub d_h: usize,
    pub d_out: usize,
}

impl EncoderDims {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        EncoderDims {
            vocab_size,
            d_tok: dim,
            d_h: dim,
            d_out: dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    /// vocab_size x d_tok
    pub token_table: Vec<f64>,
    /// d_tok x d_h
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// d_h x d_out
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    /// pre-normalization output norm
    norm: f64,
    out: Vec<f64>,
}

impl ParamSet for EncoderParams {
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

impl EncoderParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases. The
    /// token table is a lookup on one-hot inputs, so its fan-in is 1.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        let EncoderDims {
            vocab_size,
            d_tok,
            d_h,
            d_out,
        } = dims;
        for (field, v) in [
            ("vocab_size", vocab_size),
            ("d_tok", d_tok),
            ("d_h", d_h),
            ("d_out", d_out),
        ] {
            if v == 0 {
                return Err(Error::InvalidSpec {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        let mut rng = rng_for(seed, "encoder-init");
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        };
        let token_table = uniform(vocab_size * d_tok, 1);
        let w1 = uniform(d_tok * d_h, d_tok);
        let w2 = uniform(d_h * d_out, d_h);
        Ok(EncoderParams {
            dims,
            token_table,
            w1,
            b1: vec![0.0; d_h],
            w2,
            b2: vec![0.0; d_out],
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.d_out
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.dims.vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                len: self.dims.vocab_size,
            });
        }
        Ok(())
    }

    fn trace(&self, seq: &TokenSeq) -> Result<Trace> {
        self.check_seq(seq)?;
        let EncoderDims { d_tok, d_h, d_out, .. } = self.dims;

        let mut pooled = vec![0.0; d_tok];
        for &id in &seq.ids {
            let row = &self.token_table[id as usize * d_tok..][..d_tok];
            for (p, r) in pooled.iter_mut().zip(row) {
                *p += r;
            }
        }
        let inv = 1.0 / seq.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let mut hidden = self.b1.clone();
        for (i, &p) in pooled.iter().enumerate() {
            let row = &self.w1[i * d_h..][..d_h];
            for (h, w) in hidden.iter_mut().zip(row) {
                *h += p * w;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.tanh());

        let mut out = self.b2.clone();
        for (j, &h) in hidden.iter().enumerate() {
            let row = &self.w2[j * d_out..][..d_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += h * w;
            }
        }
        let norm = dot(&out, &out).sqrt();
        let scale = 1.0 / norm.max(NORM_EPS);
        out.iter_mut().for_each(|o| *o *= scale);
        Ok(Trace {
            pooled,
            hidden,
            norm,
            out,
        })
    }

    pub fn forward(&self, seq: &TokenSeq) -> Result<Embedding> {
        Ok(Embedding(self.trace(seq)?.out))
    }

    pub fn embed_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<Embedding>> {
        seqs.par_iter()
            .enumerate()
            .map(|(i, s)| self.forward(s).map_err(|e| Error::at(i, e)))
            .collect()
    }

    /// Gradient of `sum_b <upstream_b, forward(batch_b)>` with respect to every
    /// parameter, i.e. backprop of per-example embedding gradients, summed.
    pub fn backward(&self, batch: &[TokenSeq], upstream: &[Vec<f64>]) -> Result<EncoderParams> {
        if batch.len() != upstream.len() {
            return Err(Error::DimMismatch {
                expected: batch.len(),
                got: upstream.len(),
            });
        }
        let EncoderDims { d_tok, d_h, d_out, .. } = self.dims;
        let mut grad = self.zeros_like();
        for (b, (seq, g_out)) in batch.iter().zip(upstream).enumerate() {
            if g_out.len() != d_out {
                return Err(Error::at(
                    b,
                    Error::DimMismatch {
                        expected: d_out,
                        got: g_out.len(),
                    },
                ));
            }
            if g_out.iter().all(|&g| g == 0.0) {
                continue;
            }
            let tr = self.trace(seq).map_err(|e| Error::at(b, e))?;

            // Normalization Jacobian: (I - y y^T) / |z| above the guard, I / eps below.
            let g_z2: Vec<f64> = if tr.norm > NORM_EPS {
                let proj = dot(&tr.out, g_out);
                g_out
                    .iter()
                    .zip(&tr.out)
                    .map(|(g, y)| (g - y * proj) / tr.norm)
                    .collect()
            } else {
                g_out.iter().map(|g| g / NORM_EPS).collect()
            };

            let mut g_hidden = vec![0.0; d_h];
            for j in 0..d_h {
                let row = &self.w2[j * d_out..][..d_out];
                let g_row = &mut grad.w2[j * d_out..][..d_out];
                let h = tr.hidden[j];
                let mut acc = 0.0;
                for k in 0..d_out {
                    g_row[k] += h * g_z2[k];
                    acc += row[k] * g_z2[k];
                }
                g_hidden[j] = acc;
            }
            for k in 0..d_out {
                grad.b2[k] += g_z2[k];
            }

            let g_z1: Vec<f64> = g_hidden
                .iter()
                .zip(&tr.hidden)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect();
            for j in 0..d_h {
                grad.b1[j] += g_z1[j];
            }
            let mut g_pooled = vec![0.0; d_tok];
            for i in 0..d_tok {
                let row = &self.w1[i * d_h..][..d_h];
                let g_row = &mut grad.w1[i * d_h..][..d_h];
                let p = tr.pooled[i];
                let mut acc = 0.0;
                for j in 0..d_h {
                    g_row[j] += p * g_z1[j];
                    acc += row[j] * g_z1[j];
                }
                g_pooled[i] = acc;
            }

            let inv = 1.0 / seq.len() as f64;
            for &id in &seq.ids {
                let g_row = &mut grad.token_table[id as usize * d_tok..][..d_tok];
                for (g, gp) in g_row.iter_mut().zip(&g_pooled) {
                    *g += gp * inv;
                }
            }
        }
        Ok(grad)
    }

    pub fn to_bytes(&self, vocab_hash: u64) -> Vec<u8> {
        let EncoderDims { d_tok, d_h, d_out, .. } = self.dims;
        let mut out =
            format!("{CKPT_MAGIC} {CKPT_VERSION} {vocab_hash:016x} {d_tok} {d_h} {d_out}\n")
                .into_bytes();
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
            .ok_or_else(|| Error::Format("encoder checkpoint has no header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("encoder header is not UTF-8".into()))?;
        let f: Vec<&str> = header.split(' ').collect();
        if f.len() != 6 || f[0] != CKPT_MAGIC {
            return Err(Error::Format("not an encoder checkpoint".into()));
        }
        if f[1] != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported encoder version `{}`", f[1])));
        }
        let found = u64::from_str_radix(f[2], 16)
            .map_err(|e| Error::Format(format!("bad vocab hash: {e}")))?;
        if found != expected_vocab_hash {
            return Err(Error::VocabMismatch {
                expected: expected_vocab_hash,
                found,
            });
        }
        let dim = |s: &str| -> Result<usize> {
            s.parse()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::Format(format!("bad dimension `{s}`")))
        };
        let (d_tok, d_h, d_out) = (dim(f[3])?, dim(f[4])?, dim(f[5])?);
        let floats = read_f64s(&bytes[nl + 1..])?;
        let fixed = d_tok * d_h + d_h + d_h * d_out + d_out;
        if floats.len() < fixed || (floats.len() - fixed) % d_tok != 0 {
            return Err(Error::Format("encoder payload size does not match header".into()));
        }
        let vocab_size = (floats.len() - fixed) / d_tok;
        let mut it = floats.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        let p = EncoderParams {
            dims: EncoderDims {
                vocab_size,
                d_tok,
                d_h,
                d_out,
            },
            token_table: take(vocab_size * d_tok),
            w1: take(d_tok * d_h),
            b1: take(d_h),
            w2: take(d_h * d_out),
            b2: take(d_out),
        };
        if !p.all_finite() {
            return Err(Error::NonFinite("encoder checkpoint"));
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

pub(crate) fn read_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(seed: u64) -> EncoderParams {
        EncoderParams::init(
            EncoderDims {
                vocab_size: 10,
                d_tok: 3,
                d_h: 4,
                d_out: 2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = EncoderParams::init(EncoderDims::new(50, 8), 3).unwrap();
        assert_eq!(a, EncoderParams::init(EncoderDims::new(50, 8), 3).unwrap());
        assert_ne!(a, EncoderParams::init(EncoderDims::new(50, 8), 4).unwrap());
        assert!(a.b1.iter().chain(&a.b2).all(|&b| b == 0.0));
        let e = a.forward(&TokenSeq::new(vec![1, 2, 3])).unwrap();
        assert_eq!(e.dim(), 8);
        assert!(EncoderParams::init(EncoderDims::new(50, 0), 3).is_err());
    }

    #[test]
    fn repeated_token_pools_to_single() {
        let p = tiny(1);
        let one = p.forward(&TokenSeq::new(vec![4])).unwrap();
        let many = p.forward(&TokenSeq::new(vec![4; 7])).unwrap();
        for (a, b) in one.0.iter().zip(&many.0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_head() {
        let mut p = tiny(2);
        p.w2.fill(0.0);
        p.b2 = vec![1.0, 0.0];
        for ids in [vec![0], vec![1, 5, 9], vec![3, 3]] {
            assert_eq!(p.forward(&TokenSeq::new(ids)).unwrap().0, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn forward_errors() {
        let p = tiny(1);
        assert!(matches!(p.forward(&TokenSeq::default()), Err(Error::Empty(_))));
        assert!(matches!(
            p.forward(&TokenSeq::new(vec![10])),
            Err(Error::IdOutOfRange { .. })
        ));
        let err = p
            .embed_batch(&[TokenSeq::new(vec![1]), TokenSeq::new(vec![99])])
            .unwrap_err();
        assert!(matches!(err, Error::AtIndex { index: 1, .. }));
    }

    #[test]
    fn embed_batch_matches_forward() {
        let p = tiny(5);
        let seqs = vec![TokenSeq::new(vec![1, 2]), TokenSeq::new(vec![3])];
        let out = p.embed_batch(&seqs).unwrap();
        assert_eq!(out[0], p.forward(&seqs[0]).unwrap());
        assert_eq!(out[1], p.forward(&seqs[1]).unwrap());
        assert!(p.embed_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn zero_upstream_and_unused_rows() {
        let p = tiny(6);
        let batch = vec![TokenSeq::new(vec![1, 2]), TokenSeq::new(vec![2, 3])];
        let g = p.backward(&batch, &[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));

        let g = p.backward(&batch, &[vec![0.3, -1.0], vec![0.5, 0.2]]).unwrap();
        for id in [0usize, 4, 5, 6, 7, 8, 9] {
            assert!(g.token_table[id * 3..id * 3 + 3].iter().all(|&v| v == 0.0));
        }
        assert!(g.token_table[3..6].iter().any(|&v| v != 0.0));
        assert!(p.backward(&batch, &[vec![0.0; 2]]).is_err());
        assert!(p.backward(&batch, &[vec![0.0; 3], vec![0.0; 2]]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let p = EncoderParams::init(EncoderDims::new(30, 5), 9).unwrap();
        let bytes = p.to_bytes(0xabc);
        assert!(bytes.starts_with(b"HSENC v1 0000000000000abc 5 5 5\n"));
        let back = EncoderParams::from_bytes(&bytes, 0xabc).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(0xabc), bytes);
        assert!(matches!(
            EncoderParams::from_bytes(&bytes, 0xabd),
            Err(Error::VocabMismatch { .. })
        ));
        assert!(EncoderParams::from_bytes(&bytes[..bytes.len() - 3], 0xabc).is_err());
    }

    proptest! {
        #[test]
        fn outputs_are_unit_norm(seed in 0u64..1000, ids in prop::collection::vec(0u32..10, 1..20)) {
            let p = tiny(seed);
            let e = p.forward(&TokenSeq::new(ids)).unwrap();
            prop_assert!((e.norm() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn pooling_is_order_invariant(seed in 0u64..1000, mut ids in prop::collection::vec(0u32..10, 1..20)) {
            let p = tiny(seed);
            let a = p.forward(&TokenSeq::new(ids.clone())).unwrap();
            ids.reverse();
            let b = p.forward(&TokenSeq::new(ids)).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
