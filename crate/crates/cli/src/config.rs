//! Resolved run configuration.
//!
//! Values come from three layers: built-in defaults, then an optional
//! `key = value` file, then command-line flags. The resolved view prints in
//! the same `key = value` format, so it can be fed back as a config file.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hiersim::comparer::DEFAULT_LR as COMPARE_LR;
use hiersim::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().map_err(|_| format!("cannot parse list element `{p}`")))
            .collect::<Result<Vec<T>, String>>()
            .map(List)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Exact,
    Hnsw,
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexKind::Exact => "exact",
            IndexKind::Hnsw => "hnsw",
        })
    }
}

impl FromStr for IndexKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" => Ok(IndexKind::Exact),
            "hnsw" => Ok(IndexKind::Hnsw),
            other => Err(format!("unknown index mode `{other}` (expected exact or hnsw)")),
        }
    }
}

/// An optional path; the empty string means unset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptPath(pub Option<PathBuf>);

impl fmt::Display for OptPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(p) => write!(f, "{}", p.display()),
            None => Ok(()),
        }
    }
}

impl FromStr for OptPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(OptPath((!s.is_empty()).then(|| PathBuf::from(s))))
    }
}

impl OptPath {
    pub fn get(&self) -> Option<&Path> {
        self.0.as_deref()
    }
}

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// Set one key from its text form. Hyphens in keys are accepted
            /// as underscores.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                let key = key.replace('-', "_");
                match key.as_str() {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))?;
                    })*
                    _ => return Err(format!("unknown config key `{key}`")),
                }
                Ok(())
            }

            pub fn render(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), self.$key);)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    classes: usize = 200,
    variants: usize = 4,
    base_length: usize = 48,
    vuln_classes: usize = 0,
    vuln_min: usize = 3,
    vuln_max: usize = 11,
    corpus: OptPath = OptPath::default(),
    eval_corpus: OptPath = OptPath::default(),
    query_corpus: OptPath = OptPath::default(),
    vocab: OptPath = OptPath::default(),
    model_dir: OptPath = OptPath::default(),
    index: OptPath = OptPath::default(),
    out: OptPath = OptPath::default(),
    out_dir: OptPath = OptPath::default(),
    vocab_size: usize = 1024,
    max_len: usize = 128,
    dim: usize = 64,
    steps: usize = 1000,
    batch_size: usize = 32,
    cache_size: usize = 8192,
    temperature: f64 = 0.05,
    momentum: f64 = 0.99,
    lr: f64 = 1e-3,
    weight_decay: f64 = 1e-4,
    compare_dim: usize = 64,
    compare_steps: usize = 1000,
    compare_batch_size: usize = 32,
    compare_lr: f64 = COMPARE_LR,
    margin: f64 = 0.25,
    index_mode: IndexKind = IndexKind::Hnsw,
    m: usize = 16,
    ef_construction: usize = 200,
    ef_search: usize = 64,
    k: usize = hiersim::DEFAULT_K,
    vuln_k: usize = hiersim::VULN_K,
    k_out: usize = 10,
    rerank: bool = true,
    queries: usize = 200,
    poolsize: usize = 1024,
    exponents: List<u32> = List((1..=10).collect()),
    l_values: List<usize> = List((1..=13).map(|i| 1usize << i).collect()),
    split: f64 = 0.8,
    timings: bool = false,
}

impl RunConfig {
    /// Apply a `key = value` file. Blank lines and lines starting with `#`
    /// are skipped.
    pub fn apply_file(&mut self, text: &str, origin: &Path) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{}:{}: {e}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    /// Seed for one component, derived from the root seed.
    pub fn seed_for(&self, component: &str) -> u64 {
        derive_seed(self.seed, component)
    }
}
