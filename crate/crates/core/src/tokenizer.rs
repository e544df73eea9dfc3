//! Byte-level byte-pair-encoding tokenizer.
//!
//! The base alphabet is every byte value, so any UTF-8 string can be encoded.
//! Special tokens take the lowest ids, followed by the 256 byte singletons,
//! followed by tokens created by merges in the order they were learned.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Default special token names, in id order.
pub const DEFAULT_SPECIALS: [&str; 4] = ["BOS", "EOS", "MASK", "PAD"];

/// Ids of the special tokens every model relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub mask: u32,
    pub pad: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            bos: 0,
            eos: 1,
            mask: 2,
            pad: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    special_names: Vec<String>,
    specials: Specials,
    /// id -> byte string; specials map to the empty string.
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    /// (left, right) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Vocab {
    /// A vocabulary with no merges: specials plus the 256 byte singletons.
    pub fn base(special_names: &[&str]) -> Result<Vocab> {
        let names: Vec<String> = special_names.iter().map(|s| s.to_string()).collect();
        let specials = resolve_specials(&names)?;
        let mut tokens = vec![Vec::new(); names.len()];
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], tokens.len() as u32);
            tokens.push(vec![b]);
        }
        Ok(Vocab {
            special_names: names,
            specials,
            tokens,
            token_to_id,
            merges: Vec::new(),
            ranks: HashMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn special_names(&self) -> &[String] {
        &self.special_names
    }

    pub fn num_specials(&self) -> usize {
        self.special_names.len()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.special_names.len()
    }

    /// Id of the singleton token for a raw byte.
    pub fn byte_id(&self, byte: u8) -> u32 {
        (self.special_names.len() + byte as usize) as u32
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    /// Bytes of a token, empty for specials.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Learned merges as (left, right) byte strings, in order.
    pub fn merges(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.merges.iter().map(|&(l, r)| {
            (
                self.tokens[l as usize].as_slice(),
                self.tokens[r as usize].as_slice(),
            )
        })
    }

    /// Copy of this vocabulary keeping only the first `k` merges.
    pub fn truncated(&self, k: usize) -> Vocab {
        let mut v = Vocab::base(
            &self
                .special_names
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>(),
        )
        .expect("specials already validated");
        for &(l, r) in self.merges.iter().take(k) {
            let left = self.tokens[l as usize].clone();
            let right = self.tokens[r as usize].clone();
            v.push_merge(&left, &right);
        }
        v
    }

    /// Record a merge of two existing tokens. Returns the merged token id.
    fn push_merge(&mut self, left: &[u8], right: &[u8]) -> u32 {
        let l = self.token_to_id[left];
        let r = self.token_to_id[right];
        let mut merged = left.to_vec();
        merged.extend_from_slice(right);
        let id = match self.token_to_id.get(&merged) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.token_to_id.insert(merged.clone(), id);
                self.tokens.push(merged);
                id
            }
        };
        self.ranks.insert((l, r), (self.merges.len(), id));
        self.merges.push((l, r));
        id
    }

    /// Encode text by applying merges in learned order. Never emits specials.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        // Merges are learned within lines, so no merge spans a newline
        // unless a loaded file says otherwise.
        if self.merges_cross_newline() {
            out.extend(self.encode_segment(text.as_bytes()));
            return out;
        }
        for (i, line) in text.as_bytes().split(|&b| b == b'\n').enumerate() {
            if i > 0 {
                out.push(self.byte_id(b'\n'));
            }
            out.extend(self.encode_segment(line));
        }
        out
    }

    fn merges_cross_newline(&self) -> bool {
        self.merges.iter().any(|&(l, r)| {
            self.tokens[l as usize].contains(&b'\n') || self.tokens[r as usize].contains(&b'\n')
        })
    }

    fn encode_segment(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| self.byte_id(b)).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0], w[1]))
                        .map(|&(rank, new)| (rank, (w[0], w[1]), new))
                })
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, new)) = best else { break };
            ids = merge_pair(&ids, pair, new);
        }
        ids
    }

    /// Concatenated bytes of the tokens. Specials render as nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or_else(|| {
                Error::input(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.tokens.len()
                ))
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Serialize to the line-oriented vocab file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab_size={}", self.vocab_size());
        let _ = writeln!(s, "specials={}", self.special_names.join(","));
        for (l, r) in self.merges() {
            s.push_str(&escape_token(l));
            s.push('\t');
            s.push_str(&escape_token(r));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Vocab> {
        let fmt = |line: usize, msg: String| Error::format(source_name, line, msg);
        let mut lines = text
            .split_terminator('\n')
            .enumerate()
            .map(|(i, l)| (i + 1, l));

        let (n, first) = lines
            .next()
            .ok_or_else(|| fmt(1, "missing vocab_size header".into()))?;
        let size: usize = first
            .strip_prefix("vocab_size=")
            .ok_or_else(|| fmt(n, "expected `vocab_size=<n>`".into()))?
            .parse()
            .map_err(|e| fmt(n, format!("invalid vocab_size: {e}")))?;

        let (n, second) = lines
            .next()
            .ok_or_else(|| fmt(2, "missing specials header".into()))?;
        let names: Vec<&str> = second
            .strip_prefix("specials=")
            .ok_or_else(|| fmt(n, "expected `specials=<names>`".into()))?
            .split(',')
            .collect();
        let mut vocab = Vocab::base(&names).map_err(|e| fmt(n, e.to_string()))?;

        let mut last_line = 2;
        for (n, line) in lines {
            last_line = n;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| fmt(n, "expected `<left>\\t<right>`".into()))?;
            let left = unescape_token(l).map_err(|m| fmt(n, m))?;
            let right = unescape_token(r).map_err(|m| fmt(n, m))?;
            let lid = vocab.token_id(&left).ok_or_else(|| {
                fmt(
                    n,
                    format!("left token {l:?} is not defined by earlier merges"),
                )
            })?;
            let rid = vocab.token_id(&right).ok_or_else(|| {
                fmt(
                    n,
                    format!("right token {r:?} is not defined by earlier merges"),
                )
            })?;
            if vocab.ranks.contains_key(&(lid, rid)) {
                return Err(fmt(n, format!("duplicate merge {l:?} + {r:?}")));
            }
            vocab.push_merge(&left, &right);
            if vocab.vocab_size() > size {
                return Err(fmt(n, format!("merges exceed declared vocab_size {size}")));
            }
        }
        if vocab.vocab_size() != size {
            return Err(fmt(
                last_line + 1,
                format!(
                    "truncated: {} tokens defined, header declares {size}",
                    vocab.vocab_size()
                ),
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text, &path.display().to_string())
    }
}

fn resolve_specials(names: &[String]) -> Result<Specials> {
    let find = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32)
            .ok_or_else(|| Error::config(format!("special token {name} missing from {names:?}")))
    };
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() || n.contains(['\t', '\n', ',']) {
            return Err(Error::config(format!("invalid special token name {n:?}")));
        }
        if !seen.insert(n.as_str()) {
            return Err(Error::config(format!("duplicate special token name {n:?}")));
        }
    }
    Ok(Specials {
        bos: find("BOS")?,
        eos: find("EOS")?,
        mask: find("MASK")?,
        pad: find("PAD")?,
    })
}

/// Replace non-overlapping occurrences of `pair`, scanning left to right.
fn merge_pair(ids: &[u32], pair: (u32, u32), new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(new);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Non-overlapping adjacent pair counts of one word. Only runs of identical
/// tokens can overlap; a run of n copies yields n/2 pairs.
pub(crate) fn pair_counts(ids: &[u32]) -> HashMap<(u32, u32), u64> {
    let mut counts = HashMap::new();
    let mut last_counted: Option<usize> = None;
    for i in 0..ids.len().saturating_sub(1) {
        let pair = (ids[i], ids[i + 1]);
        if pair.0 == pair.1
            && last_counted == Some(i.wrapping_sub(1))
            && i > 0
            && ids[i - 1] == pair.0
        {
            continue;
        }
        *counts.entry(pair).or_insert(0) += 1;
        last_counted = Some(i);
    }
    counts
}

fn escape_token(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if b >= 0x80 || b < 0x20 || b == 0x7f || b == b'\\' {
            let _ = write!(s, "\\x{b:02X}");
        } else {
            s.push(b as char);
        }
    }
    s
}

fn unescape_token(s: &str) -> std::result::Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = s
                .get(i + 1..i + 4)
                .filter(|h| h.starts_with('x'))
                .ok_or_else(|| format!("bad escape in token {s:?}"))?;
            let b = u8::from_str_radix(&hex[1..], 16)
                .map_err(|_| format!("bad escape in token {s:?}"))?;
            out.push(b);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    merged: Vec<u8>,
    left_len: usize,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Max-heap: highest count, then lexicographically smallest merged string,
    // then shortest left half.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.merged.cmp(&self.merged))
            .then_with(|| other.left_len.cmp(&self.left_len))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learn merges over the lines of a corpus until `vocab_size` tokens exist.
///
/// Pairs are counted within a line, non-overlapping, with every byte
/// (whitespace included) treated the same. Count ties are broken by the
/// lexicographic order of the merged byte string.
pub fn train_bpe<S: AsRef<str>>(
    corpus_lines: &[S],
    vocab_size: usize,
    specials: &[&str],
) -> Result<Vocab> {
    let mut vocab = Vocab::base(specials)?;
    if vocab_size < vocab.vocab_size() {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} is smaller than the base alphabet plus specials ({})",
            vocab.vocab_size()
        )));
    }
    if corpus_lines.is_empty() {
        return Err(Error::input("empty corpus"));
    }

    // Unique words with multiplicities, sorted for a reproducible order.
    let mut freq: HashMap<&[u8], u64> = HashMap::new();
    for line in corpus_lines {
        for seg in line.as_ref().as_bytes().split(|&b| b == b'\n') {
            if seg.len() >= 2 {
                *freq.entry(seg).or_insert(0) += 1;
            }
        }
    }
    let mut uniq: Vec<(&[u8], u64)> = freq.into_iter().collect();
    uniq.sort_unstable();
    let mut words: Vec<Vec<u32>> = uniq
        .iter()
        .map(|(w, _)| w.iter().map(|&b| vocab.byte_id(b)).collect())
        .collect();
    let weights: Vec<u64> = uniq.iter().map(|&(_, c)| c).collect();

    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for (pair, c) in pair_counts(w) {
            *counts.entry(pair).or_insert(0) += c * weights[wi];
            where_.entry(pair).or_default().push(wi);
        }
    }

    let candidate = |vocab: &Vocab, pair: (u32, u32), count: u64| {
        let l = &vocab.tokens[pair.0 as usize];
        let mut merged = l.clone();
        merged.extend_from_slice(&vocab.tokens[pair.1 as usize]);
        Candidate {
            count,
            merged,
            left_len: l.len(),
            pair,
        }
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&p, &c)| candidate(&vocab, p, c))
        .collect();

    while vocab.vocab_size() < vocab_size {
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if c.count > 0 && counts.get(&c.pair) == Some(&c.count) => break Some(c),
                Some(_) => continue,
            }
        };
        let Some(best) = best else {
            return Err(Error::config(format!(
                "corpus supports at most {} tokens; vocab_size {vocab_size} is unreachable",
                vocab.vocab_size()
            )));
        };
        let pair = best.pair;
        let left = vocab.tokens[pair.0 as usize].clone();
        let right = vocab.tokens[pair.1 as usize].clone();
        let new = vocab.push_merge(&left, &right);

        let mut touched: Vec<usize> = where_.remove(&pair).unwrap_or_default();
        touched.sort_unstable();
        touched.dedup();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for wi in touched {
            let w = &words[wi];
            if !w.windows(2).any(|x| x[0] == pair.0 && x[1] == pair.1) {
                continue;
            }
            let weight = weights[wi];
            for (p, c) in pair_counts(w) {
                let e = counts.get_mut(&p).expect("pair counted earlier");
                *e -= c * weight;
                changed.insert(p);
            }
            let merged = merge_pair(w, pair, new);
            for (p, c) in pair_counts(&merged) {
                *counts.entry(p).or_insert(0) += c * weight;
                changed.insert(p);
                if p != pair {
                    where_.entry(p).or_default().push(wi);
                }
            }
            words[wi] = merged;
        }
        counts.remove(&pair);
        let mut changed: Vec<_> = changed.into_iter().filter(|p| *p != pair).collect();
        changed.sort_unstable();
        for p in changed {
            match counts.get(&p) {
                Some(&c) if c > 0 => heap.push(candidate(&vocab, p, c)),
                _ => {
                    counts.remove(&p);
                }
            }
        }
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_best_pair(corpus: &[&str]) -> (Vec<u8>, Vec<u8>) {
        // Count every adjacent pair of bytes, non-overlapping within runs.
        let mut counts: Vec<((u8, u8), u64)> = Vec::new();
        for line in corpus {
            let b = line.as_bytes();
            let mut i = 0;
            let mut prev_taken: Option<usize> = None;
            while i + 1 < b.len() {
                let p = (b[i], b[i + 1]);
                let overlaps =
                    p.0 == p.1 && prev_taken == Some(i.wrapping_sub(1)) && i > 0 && b[i - 1] == p.0;
                if !overlaps {
                    match counts.iter_mut().find(|(q, _)| *q == p) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((p, 1)),
                    }
                    prev_taken = Some(i);
                }
                i += 1;
            }
        }
        counts.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| [a.0 .0, a.0 .1].cmp(&[b.0 .0, b.0 .1]))
        });
        let (p, _) = counts[0];
        (vec![p.0], vec![p.1])
    }

    #[test]
    fn first_merge_matches_brute_force() {
        let corpus = ["aaabdaaabac"];
        let v = train_bpe(&corpus, 261, &DEFAULT_SPECIALS).unwrap();
        let (l, r) = v.merges().next().unwrap();
        assert_eq!((l.to_vec(), r.to_vec()), brute_force_best_pair(&corpus));
        assert_eq!((l, r), (&b"a"[..], &b"a"[..]));
    }

    #[test]
    fn non_overlapping_run_counts() {
        let c = pair_counts(&[7, 7, 7, 7, 7]);
        assert_eq!(c[&(7, 7)], 2);
        let c = pair_counts(&[7, 7, 7, 8, 7, 7]);
        assert_eq!(c[&(7, 7)], 2);
        assert_eq!(c[&(7, 8)], 1);
    }

    #[test]
    fn zero_merge_budget() {
        let v = train_bpe(&["hello"], 260, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.num_merges(), 0);
        assert_eq!(v.vocab_size(), 260);
    }

    #[test]
    fn errors() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            train_bpe(&empty, 300, &DEFAULT_SPECIALS),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            train_bpe(&["ab"], 259, &DEFAULT_SPECIALS),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_bpe(&["ab"], 400, &DEFAULT_SPECIALS),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_bpe(&["ab"], 300, &["BOS", "EOS", "MASK"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encode_single_merge() {
        let mut v = Vocab::base(&DEFAULT_SPECIALS).unwrap();
        let aa = v.push_merge(b"a", b"a");
        assert_eq!(v.encode("aaab"), vec![aa, v.byte_id(b'a'), v.byte_id(b'b')]);
        assert_eq!(v.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn decode_bounds_and_specials() {
        let v = train_bpe(&["the cat sat on the mat"], 270, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(v.decode(&[270]), Err(Error::Input(_))));
        let s = v.specials();
        let mut ids = vec![s.bos];
        ids.extend(v.encode("the mat"));
        ids.push(s.eos);
        assert_eq!(v.decode(&ids).unwrap(), "the mat");
    }

    #[test]
    fn specials_never_emitted() {
        let v = train_bpe(&["x y z \u{0}\u{1}\u{2}"], 265, &DEFAULT_SPECIALS).unwrap();
        assert!(v
            .encode("\u{0}\u{1}\u{2}\u{3} BOS MASK")
            .iter()
            .all(|&id| !v.is_special(id)));
    }

    #[test]
    fn file_round_trip_with_escapes() {
        let lines = ["tab\there\tand\\slash", "ünïcödé ünïcödé", "a\rb a\rb"];
        let v = train_bpe(&lines, 290, &DEFAULT_SPECIALS).unwrap();
        let text = v.to_file_string();
        assert!(text.lines().skip(2).all(|l| l.matches('\t').count() == 1));
        let back = Vocab::parse(&text, "mem").unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_files() {
        let v = train_bpe(&["abcabcabc abd abd"], 266, &DEFAULT_SPECIALS).unwrap();
        let text = v.to_file_string();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Vocab::parse(&truncated, "t"),
            Err(Error::Format { .. })
        ));

        let mut lines: Vec<&str> = text.lines().collect();
        let dup = lines[2];
        lines.insert(3, dup);
        let duplicated = lines.join("\n");
        match Vocab::parse(&duplicated, "d") {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("duplicate"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            Vocab::parse("", "e"),
            Err(Error::Format { line: 1, .. })
        ));
        assert!(matches!(
            Vocab::parse(
                "vocab_size=260\nspecials=BOS,EOS,MASK,PAD\nq\\xZZ\tb\n",
                "x"
            ),
            Err(Error::Format { line: 3, .. })
        ));
    }

    #[test]
    fn deterministic_training() {
        let lines = [
            "the quick brown fox",
            "jumps over the lazy dog",
            "the dog barks",
        ];
        let a = train_bpe(&lines, 290, &DEFAULT_SPECIALS)
            .unwrap()
            .to_file_string();
        let b = train_bpe(&lines, 290, &DEFAULT_SPECIALS)
            .unwrap()
            .to_file_string();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_counts_match_recount() {
        // Replaying the learned merges with a from-scratch recount must choose
        // the same pair at every step.
        let lines = ["abababab cdcdcd abcd", "aaaa bbbb abab", "ab ab ab cd cd"];
        let v = train_bpe(&lines, 275, &DEFAULT_SPECIALS).unwrap();
        let mut words: Vec<Vec<Vec<u8>>> = lines
            .iter()
            .map(|l| l.bytes().map(|b| vec![b]).collect())
            .collect();
        for (l, r) in v.merges() {
            let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
            for w in &words {
                let ids: Vec<u32> = w.iter().map(|t| v.token_id(t).unwrap()).collect();
                for ((a, b), c) in pair_counts(&ids) {
                    *counts
                        .entry((
                            v.token_bytes(a).unwrap().to_vec(),
                            v.token_bytes(b).unwrap().to_vec(),
                        ))
                        .or_insert(0) += c;
                }
            }
            let best = counts
                .iter()
                .max_by(|a, b| {
                    a.1.cmp(b.1)
                        .then_with(|| {
                            [&b.0 .0[..], &b.0 .1[..]]
                                .concat()
                                .cmp(&[&a.0 .0[..], &a.0 .1[..]].concat())
                        })
                        .then_with(|| b.0 .0.len().cmp(&a.0 .0.len()))
                })
                .unwrap();
            assert_eq!((&best.0 .0[..], &best.0 .1[..]), (l, r));
            for w in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push([l, r].concat());
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = out;
            }
        }
    }
}
