//! Subcommand bodies. Each reads only the resolved config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use rayon::prelude::*;

use hiersim::eval::{pool_sweep, reports_csv, vuln_recall, REPORT_CSV_HEADER, REPORT_KS};
use hiersim::pipeline::{result_csv_rows, RESULT_CSV_HEADER};
use hiersim::recm::encode_corpus;
use hiersim::{
    generate, run_eval, train_comparer, AdamConfig, CompareTrainConfig, ComparerParams, Corpus,
    EncoderParams, EngineRetriever, EvalTask, GenSpec, HnswParams, IndexMode, SearchEngine,
    SubwordVocab, TrainConfig, VectorIndex, VulnSpec, VulnTask,
};

use crate::config::{IndexKind, OptPath, RunConfig};
use crate::{Failure, Outcome};

pub const QUERY_FILE: &str = "query.hsenc";
pub const REFERENCE_FILE: &str = "reference.hsenc";
pub const COMPARER_FILE: &str = "comparer.hscmp";

fn require<'a>(path: &'a OptPath, key: &str) -> Result<&'a Path, Failure> {
    path.get()
        .ok_or_else(|| Failure::Usage(format!("--{} is required", key.replace('_', "-"))))
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_vocab(path: &Path) -> anyhow::Result<SubwordVocab> {
    SubwordVocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_encoders(dir: &Path, vocab: &SubwordVocab) -> anyhow::Result<(Arc<EncoderParams>, Arc<EncoderParams>)> {
    let h = vocab.fingerprint();
    let load = |name: &str| {
        let p = dir.join(name);
        EncoderParams::load(&p, h).with_context(|| format!("loading encoder {}", p.display()))
    };
    Ok((Arc::new(load(QUERY_FILE)?), Arc::new(load(REFERENCE_FILE)?)))
}

fn load_comparer(dir: &Path, vocab: &SubwordVocab) -> anyhow::Result<Arc<ComparerParams>> {
    let p = dir.join(COMPARER_FILE);
    ComparerParams::load(&p, vocab.fingerprint())
        .map(Arc::new)
        .with_context(|| format!("loading comparer {} (pass --rerank false to skip re-ranking)", p.display()))
}

/// Write `text` to `out`, or to standard output when unset.
fn emit(out: &OptPath, text: &str) -> anyhow::Result<()> {
    match out.get() {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn embed_config(cfg: &RunConfig, cache_size: usize) -> TrainConfig {
    TrainConfig {
        temperature: cfg.temperature,
        momentum: cfg.momentum,
        cache_size,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        adam: AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        seed: cfg.seed_for("recm"),
        dim: cfg.dim,
        max_len: cfg.max_len,
    }
}

fn metrics_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.9}", i + 1);
    }
    s
}

/// Fail with a usage error before any data is read.
fn require_model(cfg: &RunConfig) -> Result<(), Failure> {
    require(&cfg.corpus, "corpus")?;
    require(&cfg.vocab, "vocab")?;
    require(&cfg.model_dir, "model_dir")?;
    Ok(())
}

fn retriever(cfg: &RunConfig, corpus: &Corpus, k: usize) -> Result<EngineRetriever, Failure> {
    let vocab = load_vocab(require(&cfg.vocab, "vocab")?)?;
    let dir = require(&cfg.model_dir, "model_dir")?;
    let (q, r) = load_encoders(dir, &vocab)?;
    let comparer = if cfg.rerank {
        Some(load_comparer(dir, &vocab)?)
    } else {
        None
    };
    Ok(EngineRetriever::new(corpus, &vocab, cfg.max_len, q, r, comparer, k)?)
}

pub fn gen(cfg: &RunConfig) -> Outcome {
    let out = require(&cfg.out, "out")?;
    let mut spec = GenSpec::new(cfg.classes, cfg.variants, cfg.seed_for("corpus"));
    spec.base_length = cfg.base_length;
    if cfg.vuln_classes > 0 {
        spec.vulnerable = Some(VulnSpec {
            classes: cfg.vuln_classes,
            min_variants: cfg.vuln_min,
            max_variants: cfg.vuln_max,
        });
    }
    let corpus = generate(&spec)?;
    corpus.save(out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} records in {} classes to {}", corpus.len(), corpus.classes().len(), out.display());
    Ok(())
}

pub fn tokenize(cfg: &RunConfig) -> Outcome {
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let out = require(&cfg.out, "out")?;
    let vocab = SubwordVocab::train(&corpus, cfg.vocab_size)?;
    vocab.save(out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("vocabulary of {} pieces ({} merges) written to {}", vocab.len(), vocab.merges_applied(), out.display());
    Ok(())
}

pub fn train_embed(cfg: &RunConfig) -> Outcome {
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let vocab = load_vocab(require(&cfg.vocab, "vocab")?)?;
    let dir = require(&cfg.out_dir, "out_dir")?;
    let out = hiersim::recm::train(&corpus, &vocab, &embed_config(cfg, cfg.cache_size))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let h = vocab.fingerprint();
    out.query.save(dir.join(QUERY_FILE), h)?;
    out.reference.save(dir.join(REFERENCE_FILE), h)?;
    fs::write(dir.join("embed_metrics.csv"), metrics_csv(&out.losses))?;
    if let Some(last) = out.losses.last() {
        eprintln!("final loss {last:.4} after {} steps", out.losses.len());
    }
    Ok(())
}

pub fn train_compare(cfg: &RunConfig) -> Outcome {
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let vocab = load_vocab(require(&cfg.vocab, "vocab")?)?;
    let dir = require(&cfg.out_dir, "out_dir")?;
    let ccfg = CompareTrainConfig {
        margin: cfg.margin,
        batch_size: cfg.compare_batch_size,
        steps: cfg.compare_steps,
        adam: AdamConfig {
            lr: cfg.compare_lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        seed: cfg.seed_for("comparer"),
        dim: cfg.compare_dim,
        max_len: cfg.max_len,
    };
    let out = train_comparer(&corpus, &vocab, &ccfg)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    out.params.save(dir.join(COMPARER_FILE), vocab.fingerprint())?;
    fs::write(dir.join("compare_metrics.csv"), metrics_csv(&out.losses))?;
    if let Some(last) = out.losses.last() {
        eprintln!("final loss {last:.4} after {} steps", out.losses.len());
    }
    Ok(())
}

pub fn index(cfg: &RunConfig) -> Outcome {
    let pool = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let vocab = load_vocab(require(&cfg.vocab, "vocab")?)?;
    let (q, r) = load_encoders(require(&cfg.model_dir, "model_dir")?, &vocab)?;
    let out = require(&cfg.out, "out")?;
    let mode = match cfg.index_mode {
        IndexKind::Exact => IndexMode::Exact,
        IndexKind::Hnsw => IndexMode::Approximate(HnswParams {
            m: cfg.m,
            ef_construction: cfg.ef_construction,
            ef_search: cfg.ef_search,
            seed: cfg.seed_for("index"),
        }),
    };
    let engine: SearchEngine = SearchEngine::index_pool(q, r, &vocab, &pool, cfg.max_len, mode)?;
    engine.index().save(out)?;
    eprintln!("indexed {} records into {}", engine.index().len(), out.display());
    Ok(())
}

pub fn query(cfg: &RunConfig) -> Outcome {
    let pool = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let queries = load_corpus(require(&cfg.query_corpus, "query_corpus")?)?;
    let vocab = load_vocab(require(&cfg.vocab, "vocab")?)?;
    let dir = require(&cfg.model_dir, "model_dir")?;
    let index_path = require(&cfg.index, "index")?;
    let (q, r) = load_encoders(dir, &vocab)?;
    let index = VectorIndex::load(index_path)?;
    let pool_ids = pool.records().iter().map(|r| r.id.as_str());
    if index.len() != pool.len() || !index.ids().iter().map(String::as_str).eq(pool_ids) {
        return Err(Failure::Data(anyhow::anyhow!(
            "index {} was not built from corpus {}",
            index_path.display(),
            require(&cfg.corpus, "corpus")?.display()
        )));
    }
    let engine: SearchEngine =
        SearchEngine::from_parts(q, r, index, encode_corpus(&pool, &vocab, cfg.max_len))?.with_k(cfg.k)?;
    let engine = if cfg.rerank {
        engine.with_comparer(load_comparer(dir, &vocab)?)
    } else {
        engine
    };
    let seqs = encode_corpus(&queries, &vocab, cfg.max_len);
    let rows: Vec<Vec<String>> = queries
        .records()
        .par_iter()
        .zip(&seqs)
        .map(|(rec, seq)| {
            let result = engine
                .search(seq, cfg.k_out, cfg.rerank)
                .with_context(|| format!("query {}", rec.id))?;
            Ok(result_csv_rows(&rec.id, &result))
        })
        .collect::<anyhow::Result<_>>()?;
    let mut text = format!("{RESULT_CSV_HEADER}\n");
    for line in rows.iter().flatten() {
        text.push_str(line);
        text.push('\n');
    }
    emit(&cfg.out, &text)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Outcome {
    require_model(cfg)?;
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let ret = retriever(cfg, &corpus, cfg.k)?;
    let task = EvalTask::sample(&corpus, cfg.queries, cfg.poolsize, cfg.seed_for("eval"))?;
    let report = run_eval(&ret, &task, cfg.poolsize, &REPORT_KS)?;
    eprintln!("pool {}: MRR {:.4}, Recall@1 {:.4}", cfg.poolsize, report.mrr, report.recall(1));
    emit(&cfg.out, &reports_csv(&[report], cfg.timings))?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Outcome {
    require_model(cfg)?;
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let ret = retriever(cfg, &corpus, cfg.k)?;
    let Some(&largest) = cfg.exponents.0.iter().max() else {
        return Err(Failure::Usage("--exponents needs at least one value".into()));
    };
    if largest >= usize::BITS {
        return Err(Failure::Usage(format!("exponent {largest} is too large")));
    }
    let task = EvalTask::sample(&corpus, cfg.queries, 1 << largest, cfg.seed_for("eval"))?;
    let reports = pool_sweep(&ret, &task, &cfg.exponents.0, &REPORT_KS)?;
    for r in &reports {
        eprintln!("pool {}: Recall@1 {:.4}", r.poolsize, r.recall(1));
    }
    emit(&cfg.out, &reports_csv(&reports, cfg.timings))?;
    Ok(())
}

pub fn ablate_cache(cfg: &RunConfig) -> Outcome {
    if cfg.l_values.0.is_empty() {
        return Err(Failure::Usage("--l-values needs at least one value".into()));
    }
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let (train, test) = match cfg.eval_corpus.get() {
        Some(p) => (corpus, load_corpus(p)?),
        None => corpus.split(cfg.split, cfg.seed_for("split"))?,
    };
    let vocab = match cfg.vocab.get() {
        Some(p) => load_vocab(p)?,
        None => SubwordVocab::train(&train, cfg.vocab_size)?,
    };
    let task = EvalTask::sample(&test, cfg.queries, cfg.poolsize, cfg.seed_for("eval"))?;
    let mut text = format!("cache_size,{REPORT_CSV_HEADER}\n");
    for &l in &cfg.l_values.0 {
        let out = hiersim::recm::train(&train, &vocab, &embed_config(cfg, l))?;
        let ret = EngineRetriever::new(
            &test,
            &vocab,
            cfg.max_len,
            Arc::new(out.query),
            Arc::new(out.reference),
            None,
            cfg.k,
        )?;
        let report = run_eval(&ret, &task, cfg.poolsize, &REPORT_KS)?;
        eprintln!("L = {l}: Recall@1 {:.4}, MRR {:.4}", report.recall(1), report.mrr);
        let _ = writeln!(text, "{l},{}", report.csv_row(false));
    }
    emit(&cfg.out, &text)?;
    Ok(())
}

pub fn vuln_eval(cfg: &RunConfig) -> Outcome {
    require_model(cfg)?;
    let corpus = load_corpus(require(&cfg.corpus, "corpus")?)?;
    let tasks = VulnTask::from_corpus(&corpus);
    if tasks.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("corpus has no vulnerable class with two or more variants")));
    }
    let ret = retriever(cfg, &corpus, cfg.vuln_k)?;
    let recalls: Vec<f64> = tasks
        .par_iter()
        .map(|t| vuln_recall(&ret, t))
        .collect::<hiersim::Result<_>>()?;
    let mut text = String::from("query_id,g,vuln_recall\n");
    for (t, r) in tasks.iter().zip(&recalls) {
        let _ = writeln!(text, "{},{},{r:.6}", corpus.record(t.query).id, t.vuln.len());
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    eprintln!("mean vulnerability recall {mean:.4} over {} queries", tasks.len());
    emit(&cfg.out, &text)?;
    Ok(())
}
