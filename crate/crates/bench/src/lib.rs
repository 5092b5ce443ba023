//! Fixtures shared by the stage benchmarks.

use hiersim::recm::encode_corpus;
use hiersim::seed::rng_for;
use hiersim::{
    generate, ComparerParams, Corpus, EncoderDims, EncoderParams, GenSpec, HnswParams, IndexMode,
    SubwordVocab, TokenSeq, VectorIndex,
};
use rand::Rng;

pub const MAX_LEN: usize = 128;

/// A generated corpus with its vocabulary and untrained models.
pub struct ModelFixture {
    pub corpus: Corpus,
    pub vocab: SubwordVocab,
    pub seqs: Vec<TokenSeq>,
    pub encoder: EncoderParams,
    pub comparer: ComparerParams,
}

pub fn models(classes: usize, dim: usize) -> ModelFixture {
    let corpus = generate(&GenSpec::new(classes, 4, 1)).expect("valid spec");
    let vocab = SubwordVocab::train(&corpus, 1024).expect("vocabulary trains");
    let seqs = encode_corpus(&corpus, &vocab, MAX_LEN);
    let encoder = EncoderParams::init(EncoderDims::new(vocab.len(), dim), 2).expect("encoder");
    let comparer = ComparerParams::init(vocab.len(), dim, 3).expect("comparer");
    ModelFixture {
        corpus,
        vocab,
        seqs,
        encoder,
        comparer,
    }
}

/// `n` random rows of width `dim`, row-major.
pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "bench-rows");
    (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn index(n: usize, dim: usize, approximate: bool) -> VectorIndex {
    let ids = (0..n).map(|i| format!("v{i:08}")).collect();
    let mode = if approximate {
        IndexMode::Approximate(HnswParams::default())
    } else {
        IndexMode::Exact
    };
    VectorIndex::from_flat(ids, dim, &random_rows(n, dim, n as u64), mode).expect("index builds")
}
