//! Shared oracles and fixtures for the integration suites.
#![allow(dead_code)]

use hiersim::seed::rng_for;
use hiersim::{ComparerParams, EncoderDims, EncoderParams, ParamSet, TokenSeq};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)`, with two exact zeros counting as agreement.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every parameter.
pub fn max_fd_error<P: ParamSet>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> f64 {
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (t, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            worst = worst.max(rel_error(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn random_seq(rng: &mut impl Rng, vocab: usize, max_len: usize) -> TokenSeq {
    let len = rng.random_range(1..=max_len);
    TokenSeq::new((0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
}

fn scramble<P: ParamSet>(p: &mut P, rng: &mut impl Rng) {
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
}

/// Worst relative error of the encoder gradient on one random draw of the
/// tiny model (d_tok 3, d_h 4, d_out 2, batch of 2).
pub fn encoder_draw(seed: u64) -> f64 {
    let mut rng = rng_for(seed, "encoder-gradcheck");
    let vocab = 6;
    let dims = EncoderDims {
        vocab_size: vocab,
        d_tok: 3,
        d_h: 4,
        d_out: 2,
    };
    let mut params = EncoderParams::init(dims, seed).unwrap();
    scramble(&mut params, &mut rng);
    let batch: Vec<TokenSeq> = (0..2).map(|_| random_seq(&mut rng, vocab, 5)).collect();
    let upstream: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let loss = |p: &EncoderParams| -> f64 {
        batch
            .iter()
            .zip(&upstream)
            .map(|(s, u)| {
                let e = p.forward(s).unwrap();
                e.as_slice().iter().zip(u).map(|(x, y)| x * y).sum::<f64>()
            })
            .sum()
    };
    let analytic = params.backward(&batch, &upstream).unwrap();
    max_fd_error(&params, &analytic, loss)
}

/// Worst relative error of the comparer gradient on one random draw
/// (d_c 3, batch of 2 pairs).
pub fn comparer_draw(seed: u64) -> f64 {
    let mut rng = rng_for(seed, "comparer-gradcheck");
    let vocab = 7;
    let mut params = ComparerParams::init(vocab, 3, seed).unwrap();
    scramble(&mut params, &mut rng);
    let seqs: Vec<TokenSeq> = (0..4).map(|_| random_seq(&mut rng, vocab, 5)).collect();
    let pairs = [(&seqs[0], &seqs[1]), (&seqs[2], &seqs[3])];
    let upstream: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |p: &ComparerParams| -> f64 {
        pairs
            .iter()
            .zip(&upstream)
            .map(|((a, b), u)| u * p.score_pair(a, b).unwrap())
            .sum()
    };
    let analytic = params.backward(&pairs, &upstream).unwrap();
    max_fd_error(&params, &analytic, loss)
}

/// Classes with disjoint token alphabets: class `k` only uses `k{k}t{j}`.
pub fn toy_corpus(classes: usize, variants: usize, seed: u64) -> hiersim::Corpus {
    let mut rng = rng_for(seed, "toy-corpus");
    let mut records = Vec::new();
    for k in 0..classes {
        for v in 0..variants {
            let len = rng.random_range(6..=12);
            records.push(hiersim::FunctionRecord {
                id: format!("toy{k:03}_{v}"),
                class_id: format!("toy{k:03}"),
                arch_tag: "A1".into(),
                opt_tag: format!("O{}", v % 4),
                tokens: (0..len)
                    .map(|_| format!("k{k}t{}", rng.random_range(0..6)))
                    .collect(),
                is_vulnerable: false,
            });
        }
    }
    hiersim::Corpus::from_records(records).unwrap()
}
