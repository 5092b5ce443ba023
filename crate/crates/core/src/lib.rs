//! Hierarchical binary function similarity search.
//!
//! A synthetic corpus of function variants is tokenized into subwords, an
//! embedding encoder is trained contrastively with a reusable cache of
//! reference embeddings, and a pairwise comparer is trained with a triplet
//! margin. At query time the embedding index narrows the pool to `K`
//! candidates and the comparer re-ranks them.
//!
//! ```no_run
//! use std::sync::Arc;
//! use hiersim::{generate, GenSpec, IndexMode, SearchEngine, SubwordVocab, TrainConfig};
//!
//! let corpus = generate(&GenSpec::new(200, 4, 7))?;
//! let vocab = SubwordVocab::train(&corpus, 1024)?;
//! let trained = hiersim::recm::train(&corpus, &vocab, &TrainConfig::default())?;
//! let engine: SearchEngine = SearchEngine::index_pool(
//!     Arc::new(trained.query),
//!     Arc::new(trained.reference),
//!     &vocab,
//!     &corpus,
//!     128,
//!     IndexMode::Exact,
//! )?;
//! let hits = engine.search(&engine.pool()[0], 10, false)?;
//! println!("{}", hits.entries[0].id);
//! # Ok::<(), hiersim::Error>(())
//! ```

pub mod comparer;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod optim;
pub mod pipeline;
pub mod recm;
pub mod seed;
pub mod tokenizer;

pub use comparer::{
    rerank, train_comparer, triplet_loss, CompareTrainConfig, ComparerParams, PairScorer, Reranked,
};
pub use corpus::{generate, Corpus, FunctionRecord, GenSpec, MutationRates, VulnSpec};
pub use encoder::{Embedding, EncoderDims, EncoderParams};
pub use error::{Error, Result};
pub use eval::{
    mrr, pool_sweep, recall_at_k, run_eval, vuln_recall, EngineRetriever, EvalReport, EvalTask,
    Retriever, VulnTask,
};
pub use index::{HnswParams, IndexMode, Neighbor, VectorIndex};
pub use optim::{AdamConfig, ParamSet};
pub use pipeline::{RankedEntry, RankedResult, SearchEngine, Stage, DEFAULT_K, VULN_K};
pub use recm::{infonce_loss, momentum_update, EmbeddingCache, RecmTrainer, TrainConfig};
pub use seed::derive_seed;
pub use tokenizer::{SubwordVocab, TokenSeq};
