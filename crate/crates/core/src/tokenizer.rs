//! Subword vocabulary training and lossless encoding.
//!
//! Ids `0..256` are the single-byte pieces, so every input is encodable.
//! Id 256 is the token-boundary piece (an empty byte string that no merge
//! can produce); it is emitted between whitespace-split tokens so decoding
//! restores the original token list. Learned pieces follow in merge order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::seed::{fnv1a64, Fnv64};

pub const BYTE_PIECES: usize = 256;
pub const BOUNDARY_ID: u32 = 256;
pub const MIN_VOCAB_SIZE: usize = BYTE_PIECES + 1;
pub const DEFAULT_VOCAB_SIZE: usize = 4096;
pub const DEFAULT_MAX_LEN: usize = 128;
/// Pairs seen fewer times than this are never merged.
const MIN_PAIR_FREQ: u64 = 2;

const VOCAB_MAGIC: &str = "HSVOCAB";
const VOCAB_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<Vec<u8>>,
    piece_ids: HashMap<Vec<u8>, u32>,
    max_piece_len: usize,
    corpus_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq {
            ids,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Fingerprint of the token text of a corpus, in record order.
pub fn corpus_hash(corpus: &Corpus) -> u64 {
    let mut h = Fnv64::new();
    for r in corpus.records() {
        for (i, t) in r.tokens.iter().enumerate() {
            if i > 0 {
                h.update(b" ");
            }
            h.update(t.as_bytes());
        }
        h.update(b"\n");
    }
    h.finish()
}

impl SubwordVocab {
    fn with_base(corpus_hash: u64) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.push(Vec::new());
        let piece_ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        SubwordVocab {
            pieces,
            piece_ids,
            max_piece_len: 1,
            corpus_hash,
        }
    }

    fn push_piece(&mut self, piece: Vec<u8>) -> u32 {
        let id = self.pieces.len() as u32;
        self.max_piece_len = self.max_piece_len.max(piece.len());
        self.piece_ids.insert(piece.clone(), id);
        self.pieces.push(piece);
        id
    }

    /// Greedy pair-merge training over the whitespace-split tokens of `corpus`.
    ///
    /// Each round merges the most frequent adjacent pair; ties go to the
    /// lexicographically smallest merged byte string.
    pub fn train(corpus: &Corpus, target_size: usize) -> Result<Self> {
        if target_size < MIN_VOCAB_SIZE {
            return Err(Error::InvalidSpec {
                field: "target_size",
                reason: format!("{target_size} < {MIN_VOCAB_SIZE} (byte alphabet plus boundary)"),
            });
        }
        if corpus.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let mut vocab = Self::with_base(corpus_hash(corpus));

        let mut counts: BTreeMap<&[u8], u64> = BTreeMap::new();
        for r in corpus.records() {
            for t in &r.tokens {
                *counts.entry(t.as_bytes()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| u32::from(b)).collect(), c))
            .collect();

        while vocab.pieces.len() < target_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (seg, c) in &words {
                for w in seg.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= MIN_PAIR_FREQ)
                .map(|((a, b), c)| (c, vocab.concat(a, b), a, b))
                .max_by(|x, y| {
                    x.0.cmp(&y.0)
                        .then_with(|| y.1.cmp(&x.1))
                        .then_with(|| vocab.pieces[y.2 as usize].cmp(&vocab.pieces[x.2 as usize]))
                });
            let Some((_, merged, a, b)) = best else {
                break;
            };
            let id = match vocab.piece_ids.get(&merged) {
                Some(&id) => id,
                None => vocab.push_piece(merged),
            };
            for (seg, _) in &mut words {
                merge_pair(seg, a, b, id);
            }
        }
        Ok(vocab)
    }

    fn concat(&self, a: u32, b: u32) -> Vec<u8> {
        let mut m = self.pieces[a as usize].clone();
        m.extend_from_slice(&self.pieces[b as usize]);
        m
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[Vec<u8>] {
        &self.pieces
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    /// Number of learned (multi-byte) pieces.
    pub fn merges_applied(&self) -> usize {
        self.pieces.len() - MIN_VOCAB_SIZE
    }

    pub fn corpus_hash(&self) -> u64 {
        self.corpus_hash
    }

    /// Fingerprint of the serialized vocabulary; checkpoints are bound to it.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    /// Longest-match segmentation of each token, boundary pieces between
    /// tokens, truncated to `max_len` ids.
    pub fn encode<S: AsRef<[u8]>>(&self, tokens: &[S], max_len: usize) -> TokenSeq {
        let mut ids = Vec::new();
        'outer: for (i, tok) in tokens.iter().enumerate() {
            if i > 0 {
                ids.push(BOUNDARY_ID);
            }
            let bytes = tok.as_ref();
            let mut pos = 0;
            while pos < bytes.len() {
                if ids.len() > max_len {
                    break 'outer;
                }
                let longest = self.max_piece_len.min(bytes.len() - pos);
                let (id, len) = (1..=longest)
                    .rev()
                    .find_map(|l| self.piece_ids.get(&bytes[pos..pos + l]).map(|&id| (id, l)))
                    .expect("single-byte pieces cover every byte");
                ids.push(id);
                pos += len;
            }
        }
        let truncated = ids.len() > max_len;
        ids.truncate(max_len);
        TokenSeq { ids, truncated }
    }

    pub fn encode_text(&self, text: &str, max_len: usize) -> TokenSeq {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        self.encode(&tokens, max_len)
    }

    /// Inverse of [`encode`](Self::encode) for untruncated sequences.
    pub fn decode(&self, seq: &TokenSeq) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        if seq.ids.is_empty() {
            return Ok(out);
        }
        let mut cur = Vec::new();
        for &id in &seq.ids {
            let piece = self.pieces.get(id as usize).ok_or(Error::IdOutOfRange {
                id,
                len: self.pieces.len(),
            })?;
            if id == BOUNDARY_ID {
                out.push(std::mem::take(&mut cur));
            } else {
                cur.extend_from_slice(piece);
            }
        }
        out.push(cur);
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{VOCAB_MAGIC} {VOCAB_VERSION} {:016x} {}\n",
            self.corpus_hash,
            self.pieces.len()
        );
        for p in &self.pieces {
            for &b in p {
                if (0x21..=0x7e).contains(&b) && b != b'\\' {
                    s.push(b as char);
                } else {
                    let _ = write!(s, "\\x{b:02x}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let fields: Vec<&str> = header.split(' ').collect();
        let parse_err = |line, message: String| Error::Parse { line, message };
        if fields.len() != 4 || fields[0] != VOCAB_MAGIC {
            return Err(parse_err(1, "missing HSVOCAB header".into()));
        }
        if fields[1] != VOCAB_VERSION {
            return Err(parse_err(1, format!("unsupported version `{}`", fields[1])));
        }
        let corpus_hash = u64::from_str_radix(fields[2], 16)
            .map_err(|e| parse_err(1, format!("bad corpus hash: {e}")))?;
        let count: usize = fields[3]
            .parse()
            .map_err(|e| parse_err(1, format!("bad piece count: {e}")))?;
        if count < MIN_VOCAB_SIZE {
            return Err(parse_err(1, format!("piece count {count} < {MIN_VOCAB_SIZE}")));
        }

        let mut vocab = Self::with_base(corpus_hash);
        for i in 0..count {
            let line_no = i + 2;
            let line = lines
                .next()
                .ok_or_else(|| parse_err(line_no, "unexpected end of file".into()))?;
            let piece = unescape(line).map_err(|m| parse_err(line_no, m))?;
            if i < MIN_VOCAB_SIZE {
                if piece != vocab.pieces[i] {
                    return Err(parse_err(line_no, "reserved piece does not match".into()));
                }
                continue;
            }
            if piece.len() < 2 || vocab.piece_ids.contains_key(&piece) {
                return Err(parse_err(line_no, "duplicate or too-short piece".into()));
            }
            vocab.push_piece(piece);
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(parse_err(count + 2, "trailing content after pieces".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn merge_pair(seg: &mut Vec<u32>, a: u32, b: u32, id: u32) {
    if seg.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(seg.len());
    let mut i = 0;
    while i < seg.len() {
        if i + 1 < seg.len() && seg[i] == a && seg[i + 1] == b {
            out.push(id);
            i += 2;
        } else {
            out.push(seg[i]);
            i += 1;
        }
    }
    *seg = out;
}

fn unescape(line: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = line.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = line
                .get(i + 2..i + 4)
                .filter(|_| bytes.get(i + 1) == Some(&b'x'))
                .ok_or("truncated escape")?;
            out.push(u8::from_str_radix(hex, 16).map_err(|e| e.to_string())?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FunctionRecord;
    use proptest::prelude::*;

    fn corpus_of(texts: &[&str]) -> Corpus {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| FunctionRecord {
                id: format!("r{i}"),
                class_id: format!("c{i}"),
                arch_tag: "A1".into(),
                opt_tag: "O0".into(),
                tokens: t.split_whitespace().map(String::from).collect(),
                is_vulnerable: false,
            })
            .collect();
        Corpus::from_records(records).unwrap()
    }

    #[test]
    fn single_merge_on_repeated_word() {
        let corpus = corpus_of(&["aaab aaab aaab"]);
        let vocab = SubwordVocab::train(&corpus, 258).unwrap();
        assert_eq!(vocab.len(), 258);
        assert_eq!(vocab.pieces()[257], b"aa".to_vec());

        let seq = vocab.encode(&["aaab"], usize::MAX);
        let id = |p: &[u8]| vocab.id_of(p).unwrap();
        assert_eq!(seq.ids, vec![id(b"aa"), id(b"a"), id(b"b")]);
        assert!(!seq.truncated);
    }

    #[test]
    fn second_merge_breaks_tie_lexicographically() {
        // After "aa", pairs (aa,a) and (a,b) both occur 3 times; "aaa" < "ab".
        let corpus = corpus_of(&["aaab aaab aaab"]);
        let vocab = SubwordVocab::train(&corpus, 259).unwrap();
        assert_eq!(vocab.pieces()[258], b"aaa".to_vec());
    }

    #[test]
    fn minimum_size_has_no_merges() {
        let corpus = corpus_of(&["aaab aaab"]);
        let vocab = SubwordVocab::train(&corpus, 257).unwrap();
        assert_eq!(vocab.len(), 257);
        assert_eq!(vocab.merges_applied(), 0);
        assert!(matches!(
            SubwordVocab::train(&corpus, 256),
            Err(Error::InvalidSpec { .. })
        ));
        assert!(matches!(
            SubwordVocab::train(&Corpus::default(), 300),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = corpus_of(&["mov rax rbx", "add rax 0x10", "mov rbx rcx"]);
        let a = SubwordVocab::train(&corpus, 300).unwrap();
        let b = SubwordVocab::train(&corpus, 300).unwrap();
        assert_eq!(a.pieces(), b.pieces());
    }

    #[test]
    fn truncation_sets_flag() {
        let corpus = corpus_of(&["mov rax"]);
        let vocab = SubwordVocab::train(&corpus, 300).unwrap();
        let toks: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
        let seq = vocab.encode(&toks, 128);
        assert_eq!(seq.len(), 128);
        assert!(seq.truncated);
    }

    #[test]
    fn decode_edges() {
        let vocab = SubwordVocab::with_base(0);
        assert!(vocab.decode(&TokenSeq::default()).unwrap().is_empty());
        let bad = TokenSeq::new(vec![vocab.len() as u32]);
        assert!(matches!(vocab.decode(&bad), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn text_format_round_trip() {
        let corpus = corpus_of(&["mov\\x rax [rbp-0x8]", "mov rax é"]);
        let vocab = SubwordVocab::train(&corpus, 320).unwrap();
        let text = vocab.to_text();
        assert!(text.starts_with(&format!("HSVOCAB v1 {:016x} {}\n", vocab.corpus_hash(), vocab.len())));
        let back = SubwordVocab::from_text(&text).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.to_text(), text);
        assert!(SubwordVocab::from_text("HSVOCAB v2 00 257\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_bytes(tokens in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..12), 0..20)) {
            let corpus = corpus_of(&["mov rax rbx", "movq rax 0x1f", "[rbp-0x8] sub_401000"]);
            let vocab = SubwordVocab::train(&corpus, 320).unwrap();
            let seq = vocab.encode(&tokens, usize::MAX);
            prop_assert!(seq.ids.iter().all(|&id| (id as usize) < vocab.len()));
            prop_assert_eq!(vocab.decode(&seq).unwrap(), tokens);
        }
    }
}
