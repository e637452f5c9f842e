//! Byte-pair-encoding subword tokenizer.
//!
//! Text is pre-segmented into words (alphanumeric runs and single punctuation
//! characters). Whitespace preceding a word becomes a marker symbol at the
//! start of that word, so every token carries an exact character span in the
//! source and spans concatenate back to the original text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Symbol standing for the whitespace run before a word.
pub const MARKER: char = '\u{120}';

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

/// Special-token strings, indexed by id.
pub const SPECIAL_TOKENS: [&str; 5] = ["<s>", "</s>", "<pad>", "<unk>", "<mask>"];

const SPECIAL_SECTION: &str = "[special]";

/// Trained merge table plus vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    /// Non-special symbol strings by id offset (`id - SPECIAL_TOKENS.len()`).
    symbols: Vec<String>,
    lookup: HashMap<String, u32>,
    /// `(left id, right id)` -> `(rank, merged id)`.
    pair_ranks: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    sym: Sym,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Sym {
    Marker,
    Char(char),
}

impl Sym {
    fn as_char(self) -> char {
        match self {
            Sym::Marker => MARKER,
            Sym::Char(c) => c,
        }
    }
}

/// Split into words; offsets are char indices.
fn pretokenize(text: &str) -> Vec<Vec<Piece>> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut words = Vec::new();
    let mut i = 0;
    while i < n {
        let ws_start = i;
        while i < n && chars[i].is_whitespace() {
            i += 1;
        }
        let mut word = Vec::new();
        if i > ws_start {
            word.push(Piece {
                sym: Sym::Marker,
                start: ws_start,
                end: i,
            });
        }
        if i < n {
            let alnum = chars[i].is_alphanumeric();
            loop {
                word.push(Piece {
                    sym: Sym::Char(chars[i]),
                    start: i,
                    end: i + 1,
                });
                i += 1;
                if !alnum || i >= n || !chars[i].is_alphanumeric() {
                    break;
                }
            }
        }
        words.push(word);
    }
    words
}

impl BpeModel {
    /// Learn merges from `corpus` until the vocabulary (specials included)
    /// reaches `target_vocab_size` or no adjacent pair remains.
    ///
    /// The most frequent pair is merged first; ties go to the
    /// lexicographically smallest `(left, right)`.
    pub fn train<I, S>(corpus: I, target_vocab_size: usize) -> Result<BpeModel>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for word in pretokenize(text.as_ref()) {
                let s: String = word.iter().map(|p| p.sym.as_char()).collect();
                *word_counts.entry(s).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Invalid("cannot train a tokenizer on an empty corpus".into()));
        }

        let mut alphabet: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        alphabet.push(MARKER);
        alphabet.sort_unstable();
        alphabet.dedup();

        // Interned symbol table for training.
        let mut names: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut intern: HashMap<String, u32> = names.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let mut words: Vec<(Vec<u32>, usize)> = word_counts
            .iter()
            .map(|(w, &c)| (w.chars().map(|ch| intern[&ch.to_string()]).collect(), c))
            .collect();

        let mut vocab_size = SPECIAL_TOKENS.len() + alphabet.len();
        let mut merges = Vec::new();
        while vocab_size < target_vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += c;
                }
            }
            let Some((&(l, r), _)) = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&names[pa.0 as usize], &names[pa.1 as usize]);
                    let kb = (&names[pb.0 as usize], &names[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            }) else {
                break;
            };
            let merged = format!("{}{}", names[l as usize], names[r as usize]);
            let id = match intern.get(&merged) {
                Some(&id) => id,
                None => {
                    names.push(merged.clone());
                    intern.insert(merged, names.len() as u32 - 1);
                    vocab_size += 1;
                    names.len() as u32 - 1
                }
            };
            merges.push((names[l as usize].clone(), names[r as usize].clone()));
            for (w, _) in words.iter_mut() {
                apply_merge(w, l, r, id);
            }
        }
        Ok(Self::from_parts(alphabet, merges))
    }

    fn from_parts(alphabet: Vec<char>, merges: Vec<(String, String)>) -> BpeModel {
        let base = SPECIAL_TOKENS.len() as u32;
        let mut symbols: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut lookup: HashMap<String, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), base + i as u32))
            .collect();
        let mut pair_ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            let id = *lookup.entry(merged.clone()).or_insert_with(|| {
                symbols.push(merged);
                base + symbols.len() as u32 - 1
            });
            if let (Some(&li), Some(&ri)) = (lookup.get(l), lookup.get(r)) {
                pair_ranks.entry((li, ri)).or_insert((rank, id));
            }
        }
        BpeModel {
            alphabet,
            merges,
            symbols,
            lookup,
            pair_ranks,
        }
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        SPECIAL_TOKENS.len() + self.symbols.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < SPECIAL_TOKENS.len() {
            Some(SPECIAL_TOKENS[i])
        } else {
            self.symbols.get(i - SPECIAL_TOKENS.len()).map(String::as_str)
        }
    }

    /// Id of a non-special symbol.
    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.lookup.get(symbol).copied()
    }

    /// Encode one word's pieces into `(id, start, end)` using only the first
    /// `limit` merges.
    fn encode_word(&self, word: &[Piece], limit: usize) -> Vec<(u32, usize, usize)> {
        let mut toks: Vec<(u32, usize, usize)> = word
            .iter()
            .map(|p| {
                let id = self.lookup.get(&p.sym.as_char().to_string()).copied().unwrap_or(UNK);
                (id, p.start, p.end)
            })
            .collect();
        loop {
            let best = toks
                .windows(2)
                .filter_map(|w| self.pair_ranks.get(&(w[0].0, w[1].0)).copied())
                .filter(|&(rank, _)| rank < limit)
                .min_by_key(|&(rank, _)| rank);
            let Some((rank, merged)) = best else { break };
            let (l, r) = &self.merges[rank];
            let (li, ri) = (self.lookup[l], self.lookup[r]);
            let mut out = Vec::with_capacity(toks.len());
            let mut i = 0;
            while i < toks.len() {
                if i + 1 < toks.len() && toks[i].0 == li && toks[i + 1].0 == ri {
                    out.push((merged, toks[i].1, toks[i + 1].2));
                    i += 2;
                } else {
                    out.push(toks[i]);
                    i += 1;
                }
            }
            toks = out;
        }
        toks
    }

    /// Token ids of `text` with no special tokens and no length limit.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenize_with_limit(text, self.merges.len())
    }

    /// As [`tokenize`](Self::tokenize) but applying only the first `limit` merges.
    pub fn tokenize_with_limit(&self, text: &str, limit: usize) -> Vec<u32> {
        pretokenize(text)
            .iter()
            .flat_map(|w| self.encode_word(w, limit))
            .map(|t| t.0)
            .collect()
    }

    /// Re-apply merges `from..` to an already partially merged id sequence
    /// of one word. Used to check that merges compose in order.
    pub fn continue_merges(&self, ids: &[u32], from: usize) -> Vec<u32> {
        let mut toks = ids.to_vec();
        for (rank, (l, r)) in self.merges.iter().enumerate().skip(from) {
            let (Some(&li), Some(&ri)) = (self.lookup.get(l), self.lookup.get(r)) else {
                continue;
            };
            let merged = self.pair_ranks[&(li, ri)].1;
            if self.pair_ranks[&(li, ri)].0 != rank {
                continue;
            }
            apply_merge(&mut toks, li, ri, merged);
        }
        toks
    }

    /// Encode a single text as `CLS text SEP`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenizedSequence> {
        self.encode_parts(&[text], max_len, false)
    }

    /// Encode `CLS p0 SEP p1 SEP ... pk SEP`.
    ///
    /// When the sequence exceeds `max_len`, tokens are dropped from the end of
    /// the last part first, then the one before it; part 0 is cut only when
    /// nothing else remains. With `segment_ids` on, `CLS`, part 0 and its
    /// `SEP` get segment 0 and everything after gets segment 1.
    pub fn encode_parts(&self, parts: &[&str], max_len: usize, segment_ids: bool) -> Result<TokenizedSequence> {
        if parts.is_empty() {
            return Err(Error::Invalid("encode needs at least one part".into()));
        }
        if max_len < parts.len() + 1 {
            return Err(Error::Invalid(format!(
                "max_len {max_len} cannot hold {} special tokens",
                parts.len() + 1
            )));
        }
        let mut source = String::new();
        let mut part_offsets = Vec::with_capacity(parts.len());
        let mut encoded: Vec<Vec<(u32, usize, usize)>> = Vec::with_capacity(parts.len());
        let mut char_offset = 0;
        for (i, part) in parts.iter().enumerate() {
            if i > 0 {
                source.push('\n');
                char_offset += 1;
            }
            part_offsets.push(char_offset);
            source.push_str(part);
            let toks = pretokenize(part)
                .iter()
                .flat_map(|w| self.encode_word(w, self.merges.len()))
                .map(|(id, s, e)| (id, s + char_offset, e + char_offset))
                .collect();
            encoded.push(toks);
            char_offset += part.chars().count();
        }

        let budget = max_len - (parts.len() + 1);
        let mut excess = encoded.iter().map(Vec::len).sum::<usize>().saturating_sub(budget);
        for toks in encoded.iter_mut().rev() {
            if excess == 0 {
                break;
            }
            let cut = excess.min(toks.len());
            toks.truncate(toks.len() - cut);
            excess -= cut;
        }

        let total_chars = char_offset;
        let mut seq = TokenizedSequence {
            ids: vec![CLS],
            char_spans: vec![(0, 0)],
            segment_ids: vec![0],
            part: vec![None],
            source,
            part_offsets,
        };
        for (i, toks) in encoded.iter().enumerate() {
            let seg = if segment_ids && i > 0 { 1 } else { 0 };
            for &(id, s, e) in toks {
                seq.ids.push(id);
                seq.char_spans.push((s, e));
                seq.segment_ids.push(seg);
                seq.part.push(Some(i));
            }
            let sep_span = if i + 1 < parts.len() {
                let boundary = seq.part_offsets[i + 1] - 1;
                (boundary, boundary + 1)
            } else {
                (total_chars, total_chars)
            };
            seq.ids.push(SEP);
            seq.char_spans.push(sep_span);
            seq.segment_ids.push(seg);
            seq.part.push(None);
        }
        Ok(seq)
    }

    /// Serialize: alphabet line, one merge per line, then the special table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let alphabet: Vec<String> = self.alphabet.iter().map(|c| c.to_string()).collect();
        out.push_str(&alphabet.join(" "));
        out.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out.push_str(SPECIAL_SECTION);
        out.push('\n');
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            let _ = writeln!(out, "{s} {i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<BpeModel> {
        let bad = |line: usize, msg: &str| Error::Schema {
            path: format!("tokenizer line {line}"),
            message: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(1, "missing alphabet"))?;
        let mut alphabet = Vec::new();
        for tok in first.split(' ') {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => return Err(bad(1, "alphabet entries must be single characters")),
            }
        }
        let mut merges = Vec::new();
        let mut saw_specials = false;
        for (n, line) in lines.by_ref() {
            if line == SPECIAL_SECTION {
                saw_specials = true;
                break;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(n + 1, "merge needs two symbols"))?;
            if l.is_empty() || r.is_empty() || r.contains(' ') {
                return Err(bad(n + 1, "merge needs two symbols"));
            }
            merges.push((l.to_string(), r.to_string()));
        }
        if !saw_specials {
            return Err(bad(0, "missing special-token table"));
        }
        let mut specials = 0;
        for (n, line) in lines {
            let (tok, id) = line.split_once(' ').ok_or_else(|| bad(n + 1, "special entry"))?;
            let id: usize = id.parse().map_err(|_| bad(n + 1, "special id"))?;
            if SPECIAL_TOKENS.get(id) != Some(&tok) {
                return Err(bad(n + 1, "special table does not match this build"));
            }
            specials += 1;
        }
        if specials != SPECIAL_TOKENS.len() {
            return Err(bad(0, "incomplete special-token table"));
        }
        Ok(Self::from_parts(alphabet, merges))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BpeModel> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn apply_merge(word: &mut Vec<u32>, l: u32, r: u32, merged: u32) {
    if word.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == l && word[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// One encoded input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    /// Char offsets into [`source`](Self::source); specials are zero-width
    /// except a `SEP` between parts, which covers the separator character.
    pub char_spans: Vec<(usize, usize)>,
    pub segment_ids: Vec<u32>,
    /// Part index of each token, `None` for special tokens.
    pub part: Vec<Option<usize>>,
    /// Parts joined with `'\n'`.
    pub source: String,
    /// Char offset where each part starts in `source`.
    pub part_offsets: Vec<usize>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding real (non-special) tokens.
    pub fn content_mask(&self) -> Vec<bool> {
        self.part.iter().map(Option::is_some).collect()
    }

    /// Source text between two char offsets.
    pub fn slice_chars(&self, start: usize, end: usize) -> String {
        self.source
            .chars()
            .skip(start)
            .take(end.saturating_sub(start))
            .collect()
    }

    /// Source text covered by tokens `start..=end`, whitespace-trimmed.
    pub fn detokenize(&self, start: usize, end: usize) -> String {
        if start > end || end >= self.ids.len() {
            return String::new();
        }
        let s = self.char_spans[start].0;
        let e = self.char_spans[end].1;
        self.slice_chars(s, e).trim().to_string()
    }

    /// Smallest token range covering chars `[char_start, char_end)`, or
    /// `None` when any part of the range is not present (truncated).
    pub fn char_span_to_token_span(&self, char_start: usize, char_end: usize) -> Result<Option<(usize, usize)>> {
        if char_start > char_end {
            return Err(Error::Invalid(format!("inverted char range {char_start}..{char_end}")));
        }
        if char_start == char_end {
            return Ok(None);
        }
        let hits: Vec<usize> = self
            .char_spans
            .iter()
            .enumerate()
            .filter(|(_, &(s, e))| s < e && s < char_end && e > char_start)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (hits.first(), hits.last()) else {
            return Ok(None);
        };
        if self.char_spans[first].0 > char_start || self.char_spans[last].1 < char_end {
            return Ok(None);
        }
        let contiguous = hits
            .windows(2)
            .all(|w| w[1] == w[0] + 1 && self.char_spans[w[0]].1 == self.char_spans[w[1]].0);
        Ok(contiguous.then_some((first, last)))
    }
}
