//! `hiersim` command-line entry point.
//!
//! Exit status is 0 on success, 1 on usage errors (bad flags, unknown config
//! keys, missing required settings) and 2 when the data itself is rejected.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

/// Overrides collected from flags, in config-key form.
type Overrides = Vec<(&'static str, String)>;

/// Declare an argument struct whose every field is an optional override of
/// the config key with the same name.
macro_rules! flags {
    ($(#[$smeta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty,)* }) => {
        $(#[$smeta])*
        #[derive(Debug, Args)]
        pub struct $name {
            $($(#[$fmeta])* #[arg(long)] pub $field: Option<$ty>,)*
        }

        impl $name {
            fn collect(&self, out: &mut Overrides) {
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                })*
            }
        }
    };
}

flags!(GenFlags {
    /// Number of equivalence classes.
    classes: usize,
    /// Variants generated per class.
    variants: usize,
    base_length: usize,
    /// Classes flagged vulnerable, appended after the regular ones.
    vuln_classes: usize,
    vuln_min: usize,
    vuln_max: usize,
    /// Output JSONL corpus.
    out: String,
});

flags!(TokenizeFlags {
    corpus: String,
    /// Target vocabulary size, 257 or more.
    vocab_size: usize,
    /// Output vocabulary file.
    out: String,
});

flags!(EmbedFlags {
    corpus: String,
    vocab: String,
    max_len: usize,
    dim: usize,
    steps: usize,
    batch_size: usize,
    /// Reusable embedding cache capacity L.
    cache_size: usize,
    temperature: f64,
    momentum: f64,
    lr: f64,
    weight_decay: f64,
    /// Directory receiving query.hsenc, reference.hsenc and embed_metrics.csv.
    out_dir: String,
});

flags!(CompareFlags {
    corpus: String,
    vocab: String,
    max_len: usize,
    compare_dim: usize,
    compare_steps: usize,
    compare_batch_size: usize,
    compare_lr: f64,
    margin: f64,
    /// Directory receiving comparer.hscmp and compare_metrics.csv.
    out_dir: String,
});

flags!(IndexFlags {
    /// Pool corpus to index.
    corpus: String,
    vocab: String,
    max_len: usize,
    /// Directory holding the trained encoders.
    model_dir: String,
    /// exact or hnsw.
    index_mode: String,
    m: usize,
    ef_construction: usize,
    ef_search: usize,
    /// Output index file.
    out: String,
});

flags!(QueryFlags {
    /// Pool corpus the index was built from.
    corpus: String,
    /// Corpus whose records are the queries.
    query_corpus: String,
    vocab: String,
    max_len: usize,
    model_dir: String,
    index: String,
    /// Candidates retrieved before re-ranking.
    k: usize,
    /// Results reported per query.
    k_out: usize,
    /// Re-rank candidates with the comparer.
    rerank: bool,
    /// Output CSV; standard output when unset.
    out: String,
});

flags!(EvalFlags {
    /// Corpus the queries and pools are drawn from.
    corpus: String,
    vocab: String,
    max_len: usize,
    model_dir: String,
    k: usize,
    rerank: bool,
    /// Number of queries, one per sampled class.
    queries: usize,
    poolsize: usize,
    /// Fill the timing columns, which vary between runs.
    timings: bool,
    out: String,
});

flags!(SweepFlags {
    corpus: String,
    vocab: String,
    max_len: usize,
    model_dir: String,
    k: usize,
    rerank: bool,
    queries: usize,
    /// Pool sizes are 2^e for each listed exponent.
    exponents: String,
    timings: bool,
    out: String,
});

flags!(AblateFlags {
    /// Training corpus; split by class unless --eval-corpus is given.
    corpus: String,
    eval_corpus: String,
    /// Fraction of classes used for training when splitting.
    split: f64,
    /// Vocabulary file; trained on the training side when unset.
    vocab: String,
    vocab_size: usize,
    max_len: usize,
    /// Comma-separated cache capacities.
    l_values: String,
    dim: usize,
    steps: usize,
    batch_size: usize,
    temperature: f64,
    momentum: f64,
    lr: f64,
    weight_decay: f64,
    queries: usize,
    poolsize: usize,
    out: String,
});

flags!(VulnFlags {
    /// Corpus containing vulnerable classes; every other record is the pool.
    corpus: String,
    vocab: String,
    max_len: usize,
    model_dir: String,
    /// Retrieval depth.
    vuln_k: usize,
    rerank: bool,
    out: String,
});

#[derive(Debug, Parser)]
#[command(name = "hiersim", version, about = "Hierarchical binary function similarity search")]
struct Cli {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenFlags),
    /// Train a subword vocabulary.
    Tokenize(TokenizeFlags),
    /// Train the query and reference encoders.
    TrainEmbed(EmbedFlags),
    /// Train the pairwise comparer.
    TrainCompare(CompareFlags),
    /// Embed a pool and write an index file.
    Index(IndexFlags),
    /// Search an index with query records.
    Query(QueryFlags),
    /// Recall and MRR at one pool size.
    Eval(EvalFlags),
    /// Recall and MRR over nested pools of growing size.
    Sweep(SweepFlags),
    /// Train encoders for several cache sizes and evaluate each.
    AblateCache(AblateFlags),
    /// Vulnerability recall over the vulnerable classes of a corpus.
    VulnEval(VulnFlags),
}

impl Command {
    fn overrides(&self) -> Overrides {
        let mut out = Vec::new();
        match self {
            Command::Gen(f) => f.collect(&mut out),
            Command::Tokenize(f) => f.collect(&mut out),
            Command::TrainEmbed(f) => f.collect(&mut out),
            Command::TrainCompare(f) => f.collect(&mut out),
            Command::Index(f) => f.collect(&mut out),
            Command::Query(f) => f.collect(&mut out),
            Command::Eval(f) => f.collect(&mut out),
            Command::Sweep(f) => f.collect(&mut out),
            Command::AblateCache(f) => f.collect(&mut out),
            Command::VulnEval(f) => f.collect(&mut out),
        }
        out
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Tokenize(_) => "tokenize",
            Command::TrainEmbed(_) => "train-embed",
            Command::TrainCompare(_) => "train-compare",
            Command::Index(_) => "index",
            Command::Query(_) => "query",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::AblateCache(_) => "ablate-cache",
            Command::VulnEval(_) => "vuln-eval",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_file(&text, path).map_err(Failure::Usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for (key, value) in cli.command.overrides() {
        cfg.set(key, &value).map_err(Failure::Usage)?;
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("HIERSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("HIERSIM_THREADS must be a count, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    let cfg = resolve(&cli)?;
    eprintln!("# hiersim {} (seed {})", cli.command.name(), cfg.seed);
    eprint!("{}", cfg.render());
    match cli.command {
        Command::Gen(_) => commands::gen(&cfg),
        Command::Tokenize(_) => commands::tokenize(&cfg),
        Command::TrainEmbed(_) => commands::train_embed(&cfg),
        Command::TrainCompare(_) => commands::train_compare(&cfg),
        Command::Index(_) => commands::index(&cfg),
        Command::Query(_) => commands::query(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::AblateCache(_) => commands::ablate_cache(&cfg),
        Command::VulnEval(_) => commands::vuln_eval(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `hiersim help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
