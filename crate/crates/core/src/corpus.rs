//! Function records, the synthetic variant generator, and the JSON Lines
//! corpus format.
//!
//! Records sharing a `class_id` are ground-truth similar: they stand for the
//! same source function compiled under different settings. The generator
//! imitates that by mutating one base instruction sequence per class with
//! semantics-preserving rewrites (register renaming, local reordering,
//! opcode synonyms, junk insertion, deletion).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionRecord {
    pub id: String,
    pub class_id: String,
    #[serde(rename = "arch")]
    pub arch_tag: String,
    #[serde(rename = "opt")]
    pub opt_tag: String,
    pub tokens: Vec<String>,
    #[serde(rename = "vuln", default, skip_serializing_if = "is_false")]
    pub is_vulnerable: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// An ordered set of records partitioned by class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<FunctionRecord>,
    /// class id -> positions into `records`, ascending.
    classes: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    pub fn from_records(records: Vec<FunctionRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    line: i + 1,
                });
            }
            if r.tokens.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("record `{}` has no tokens", r.id),
                });
            }
        }
        let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            classes.entry(r.class_id.clone()).or_default().push(i);
        }
        Ok(Corpus { records, classes })
    }

    pub fn records(&self) -> &[FunctionRecord] {
        &self.records
    }

    pub fn record(&self, pos: usize) -> &FunctionRecord {
        &self.records[pos]
    }

    pub fn classes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.classes
    }

    /// Positions of all records in `class_id`.
    pub fn members(&self, class_id: &str) -> &[usize] {
        self.classes.get(class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record ids of a class, in corpus order.
    pub fn class_ids(&self, class_id: &str) -> Vec<&str> {
        self.members(class_id)
            .iter()
            .map(|&i| self.records[i].id.as_str())
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FunctionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if rec.tokens.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("record `{}` has no tokens", rec.id),
                });
            }
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateId {
                    id: rec.id,
                    line: line_no,
                });
            }
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Split by class so that no class appears on both sides.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::InvalidSpec {
                field: "train_frac",
                reason: format!("{train_frac} is not in (0, 1)"),
            });
        }
        let n = self.classes.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!(
                "a class-level split needs at least 2 classes, corpus has {n}"
            )));
        }
        let mut names: Vec<&String> = self.classes.keys().collect();
        names.shuffle(&mut rng_for(seed, "split"));
        let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
        let train: HashSet<&str> = names[..n_train].iter().map(|s| s.as_str()).collect();

        let (a, b): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .partition(|r| train.contains(r.class_id.as_str()));
        Ok((Corpus::from_records(a)?, Corpus::from_records(b)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationRates {
    /// Per-register probability of being remapped (consistently within a variant).
    pub rename: f64,
    /// Per-line probability of swapping with the following line.
    pub reorder: f64,
    /// Per-instruction probability of replacing the opcode with its synonym.
    pub substitute: f64,
    /// Per-line probability of inserting a junk line after it.
    pub insert_junk: f64,
    /// Per-line probability of dropping the line.
    pub delete: f64,
}

impl MutationRates {
    pub const ZERO: MutationRates = MutationRates {
        rename: 0.0,
        reorder: 0.0,
        substitute: 0.0,
        insert_junk: 0.0,
        delete: 0.0,
    };
}

impl Default for MutationRates {
    fn default() -> Self {
        MutationRates {
            rename: 0.3,
            reorder: 0.15,
            substitute: 0.3,
            insert_junk: 0.1,
            delete: 0.1,
        }
    }
}

/// Vulnerable classes get a variable number of variants so that a query can
/// have several true matches in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VulnSpec {
    pub classes: usize,
    pub min_variants: usize,
    pub max_variants: usize,
}

/// Parameters of the synthetic generator.
///
/// `vocab_skeleton` lists opcodes in synonym pairs: entries `2k` and `2k + 1`
/// are interchangeable under the substitution rewrite. An odd trailing entry
/// has no synonym.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub n_classes: usize,
    pub variants_per_class: usize,
    /// Approximate token count of each class's base sequence.
    pub base_length: usize,
    pub vocab_skeleton: Vec<String>,
    pub mutation_rates: MutationRates,
    pub seed: u64,
    /// When set, the first chosen classes are flagged vulnerable and their
    /// variant counts are drawn from the given range instead of
    /// `variants_per_class`.
    pub vulnerable: Option<VulnSpec>,
}

pub const DEFAULT_SKELETON: &[&str] = &[
    "mov", "movq", "add", "addq", "sub", "subq", "xor", "xorq", "cmp", "cmpq", "test", "testq",
    "and", "andq", "or", "orq", "lea", "leaq", "shl", "sal", "shr", "sar", "imul", "imulq",
    "push", "pushq", "pop", "popq", "call", "callq", "jmp", "jmpq", "je", "jz", "jne", "jnz",
    "jl", "jnge", "jg", "jnle", "movzx", "movzbl", "cmove", "cmovz", "ret", "retq",
];

const REGISTERS: &[&str] = &[
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
];

/// Immediates and stack offsets come from small shared pools so classes
/// overlap in vocabulary and must be told apart by composition.
const IMMEDIATE_POOL: u32 = 96;
const OFFSET_POOL: u32 = 48;
const SYMBOL_POOL: u32 = 256;

impl GenSpec {
    pub fn new(n_classes: usize, variants_per_class: usize, seed: u64) -> Self {
        GenSpec {
            n_classes,
            variants_per_class,
            base_length: 48,
            vocab_skeleton: DEFAULT_SKELETON.iter().map(|s| s.to_string()).collect(),
            mutation_rates: MutationRates::default(),
            seed,
            vulnerable: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |field, v: usize| {
            if v == 0 {
                Err(Error::InvalidSpec {
                    field,
                    reason: "must be at least 1".into(),
                })
            } else {
                Ok(())
            }
        };
        count("n_classes", self.n_classes)?;
        count("variants_per_class", self.variants_per_class)?;
        count("base_length", self.base_length)?;
        count("vocab_skeleton", self.vocab_skeleton.len())?;
        if self.vocab_skeleton.iter().any(|s| s.is_empty() || s.contains(char::is_whitespace)) {
            return Err(Error::InvalidSpec {
                field: "vocab_skeleton",
                reason: "entries must be non-empty and free of whitespace".into(),
            });
        }
        let r = &self.mutation_rates;
        for (field, v) in [
            ("mutation_rates.rename", r.rename),
            ("mutation_rates.reorder", r.reorder),
            ("mutation_rates.substitute", r.substitute),
            ("mutation_rates.insert_junk", r.insert_junk),
            ("mutation_rates.delete", r.delete),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidSpec {
                    field,
                    reason: format!("{v} is not in [0, 1]"),
                });
            }
        }
        if let Some(v) = &self.vulnerable {
            if v.classes > self.n_classes {
                return Err(Error::InvalidSpec {
                    field: "vulnerable.classes",
                    reason: format!("{} exceeds n_classes {}", v.classes, self.n_classes),
                });
            }
            if v.min_variants < 2 || v.max_variants < v.min_variants {
                return Err(Error::InvalidSpec {
                    field: "vulnerable.min_variants",
                    reason: "need 2 <= min_variants <= max_variants".into(),
                });
            }
        }
        Ok(())
    }
}

type Line = Vec<String>;

/// Generate a corpus. Without `vulnerable`, the result has exactly
/// `n_classes * variants_per_class` records.
pub fn generate(spec: &GenSpec) -> Result<Corpus> {
    spec.validate()?;

    let mut vuln_variants: BTreeMap<usize, usize> = BTreeMap::new();
    if let Some(v) = &spec.vulnerable {
        let mut rng = rng_for(spec.seed, "vulnerable");
        let mut order: Vec<usize> = (0..spec.n_classes).collect();
        order.shuffle(&mut rng);
        for &c in &order[..v.classes] {
            vuln_variants.insert(c, rng.random_range(v.min_variants..=v.max_variants));
        }
    }

    let width = digits(spec.n_classes);
    let mut records = Vec::new();
    for c in 0..spec.n_classes {
        let class_id = format!("c{c:0width$}");
        let base = base_sequence(spec, &mut rng_for(spec.seed, &format!("class/{c}")));
        let (n_var, vulnerable) = match vuln_variants.get(&c) {
            Some(&n) => (n, true),
            None => (spec.variants_per_class, false),
        };
        for v in 0..n_var {
            let mut rng = rng_for(spec.seed, &format!("variant/{c}/{v}"));
            let lines = mutate(spec, &base, &mut rng);
            records.push(FunctionRecord {
                id: format!("{class_id}_v{v:02}"),
                class_id: class_id.clone(),
                arch_tag: format!("A{}", (v / 4) % 4 + 1),
                opt_tag: format!("O{}", v % 4),
                tokens: lines.into_iter().flatten().collect(),
                is_vulnerable: vulnerable,
            });
        }
    }
    Corpus::from_records(records)
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len().max(4)
}

fn base_sequence(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Vec<Line> {
    let mut lines = Vec::new();
    let mut count = 0;
    while count < spec.base_length {
        let op = spec.vocab_skeleton[rng.random_range(0..spec.vocab_skeleton.len())].clone();
        let arity = match rng.random::<f64>() {
            p if p < 0.1 => 0,
            p if p < 0.3 => 1,
            _ => 2,
        };
        let mut line = vec![op];
        for _ in 0..arity {
            line.push(operand(rng));
        }
        count += line.len();
        lines.push(line);
    }
    lines
}

fn operand(rng: &mut ChaCha8Rng) -> String {
    match rng.random::<f64>() {
        p if p < 0.55 => REGISTERS[rng.random_range(0..REGISTERS.len())].to_string(),
        p if p < 0.75 => format!("{:#x}", rng.random_range(0..IMMEDIATE_POOL)),
        p if p < 0.9 => format!("[rbp-{:#x}]", 8 * (1 + rng.random_range(0..OFFSET_POOL))),
        _ => format!("sub_{:06x}", 0x401000 + 16 * rng.random_range(0..SYMBOL_POOL)),
    }
}

fn synonym<'a>(skeleton: &'a [String], op: &str) -> Option<&'a str> {
    let i = skeleton.iter().position(|s| s == op)?;
    skeleton.get(i ^ 1).map(String::as_str)
}

fn mutate(spec: &GenSpec, base: &[Line], rng: &mut ChaCha8Rng) -> Vec<Line> {
    let rates = &spec.mutation_rates;

    // Consistent register permutation over the chosen subset.
    let renamed: Vec<usize> = (0..REGISTERS.len())
        .filter(|_| rng.random_bool(rates.rename))
        .collect();
    let mut targets = renamed.clone();
    targets.shuffle(rng);
    let mut reg_map: Vec<usize> = (0..REGISTERS.len()).collect();
    for (&from, &to) in renamed.iter().zip(&targets) {
        reg_map[from] = to;
    }

    let mut lines: Vec<Line> = base
        .iter()
        .map(|line| {
            let mut out = Vec::with_capacity(line.len());
            let op = &line[0];
            match synonym(&spec.vocab_skeleton, op) {
                Some(syn) if rng.random_bool(rates.substitute) => out.push(syn.to_string()),
                _ => out.push(op.clone()),
            }
            for tok in &line[1..] {
                match REGISTERS.iter().position(|r| r == tok) {
                    Some(i) => out.push(REGISTERS[reg_map[i]].to_string()),
                    None => out.push(tok.clone()),
                }
            }
            out
        })
        .collect();

    let mut i = 0;
    while i + 1 < lines.len() {
        if rng.random_bool(rates.reorder) {
            lines.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }

    let mut out = Vec::with_capacity(lines.len() + 4);
    let total = lines.len();
    for (k, line) in lines.into_iter().enumerate() {
        let remaining = total - k;
        if rng.random_bool(rates.delete) && (out.len() + remaining) > 1 {
            continue;
        }
        out.push(line);
        if rng.random_bool(rates.insert_junk) {
            out.push(junk_line(rng));
        }
    }
    out
}

fn junk_line(rng: &mut ChaCha8Rng) -> Line {
    if rng.random_bool(0.5) {
        vec!["nop".to_string()]
    } else {
        let r = REGISTERS[rng.random_range(0..REGISTERS.len())];
        vec!["mov".to_string(), r.to_string(), r.to_string()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_counts_records_and_classes() {
        let corpus = generate(&GenSpec::new(2, 3, 7)).unwrap();
        assert_eq!(corpus.len(), 6);
        assert_eq!(corpus.classes().len(), 2);
        assert!(corpus.classes().values().all(|m| m.len() == 3));
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = GenSpec::new(5, 4, 11);
        assert_eq!(generate(&spec).unwrap().to_jsonl(), generate(&spec).unwrap().to_jsonl());
    }

    #[test]
    fn zero_mutation_gives_identical_variants() {
        let mut spec = GenSpec::new(4, 5, 3);
        spec.mutation_rates = MutationRates::ZERO;
        let corpus = generate(&spec).unwrap();
        for members in corpus.classes().values() {
            let first = &corpus.record(members[0]).tokens;
            assert!(members.iter().all(|&i| &corpus.record(i).tokens == first));
        }
    }

    #[test]
    fn mutations_change_some_variants() {
        let corpus = generate(&GenSpec::new(4, 4, 3)).unwrap();
        let differing = corpus
            .classes()
            .values()
            .filter(|m| m.iter().any(|&i| corpus.record(i).tokens != corpus.record(m[0]).tokens))
            .count();
        assert!(differing > 0);
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut spec = GenSpec::new(2, 3, 1);
        spec.mutation_rates.delete = 1.5;
        match generate(&spec) {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "mutation_rates.delete"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = GenSpec::new(0, 3, 1);
        assert!(matches!(
            generate(&spec),
            Err(Error::InvalidSpec { field: "n_classes", .. })
        ));
    }

    #[test]
    fn vulnerable_classes_have_variable_sizes() {
        let mut spec = GenSpec::new(20, 2, 5);
        spec.vulnerable = Some(VulnSpec {
            classes: 4,
            min_variants: 3,
            max_variants: 11,
        });
        let corpus = generate(&spec).unwrap();
        let vuln: Vec<_> = corpus
            .classes()
            .values()
            .filter(|m| corpus.record(m[0]).is_vulnerable)
            .collect();
        assert_eq!(vuln.len(), 4);
        assert!(vuln.iter().all(|m| (3..=11).contains(&m.len())));
        assert!(vuln
            .iter()
            .all(|m| m.iter().all(|&i| corpus.record(i).is_vulnerable)));
    }

    fn line(id: &str, class: &str) -> String {
        format!(r#"{{"id":"{id}","class_id":"{class}","arch":"A1","opt":"O0","tokens":["mov","rax"]}}"#)
    }

    #[test]
    fn parse_three_lines() {
        let text = [line("a", "x"), line("b", "x"), line("c", "y")].join("\n");
        let corpus = Corpus::parse_jsonl(&text).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.class_ids("x"), vec!["a", "b"]);
    }

    #[test]
    fn parse_duplicate_cites_line() {
        let text = [line("a", "x"), line("a", "y")].join("\n");
        match Corpus::parse_jsonl(&text) {
            Err(Error::DuplicateId { id, line }) => {
                assert_eq!(id, "a");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_empty_and_errors() {
        assert!(Corpus::parse_jsonl("").unwrap().is_empty());
        let bad = format!("{}\n{{\"id\":1}}", line("a", "x"));
        assert!(matches!(Corpus::parse_jsonl(&bad), Err(Error::Parse { line: 2, .. })));
        let unknown = r#"{"id":"a","class_id":"x","arch":"A1","opt":"O0","tokens":["t"],"extra":1}"#;
        assert!(matches!(Corpus::parse_jsonl(unknown), Err(Error::Parse { line: 1, .. })));
        let vuln = r#"{"id":"a","class_id":"x","arch":"A1","opt":"O0","tokens":["t"],"vuln":true}"#;
        assert!(Corpus::parse_jsonl(vuln).unwrap().record(0).is_vulnerable);
    }

    #[test]
    fn split_by_class() {
        let corpus = generate(&GenSpec::new(10, 2, 1)).unwrap();
        let (train, test) = corpus.split(0.8, 9).unwrap();
        assert_eq!(train.classes().len(), 8);
        assert_eq!(test.classes().len(), 2);
        assert!(train.classes().keys().all(|k| !test.classes().contains_key(k)));
        let (train2, test2) = corpus.split(0.8, 9).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_rejects_single_class() {
        let corpus = generate(&GenSpec::new(1, 3, 1)).unwrap();
        assert!(matches!(corpus.split(0.5, 0), Err(Error::InsufficientData(_))));
    }
}
