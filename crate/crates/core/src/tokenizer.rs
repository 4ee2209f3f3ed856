//! Subword vocabulary, sequence encoding and masked-token sampling.
//!
//! Vocabularies are grown by greedy pair merges over lowercased words and
//! applied by greedy longest-match segmentation. Pieces are stored without a
//! position marker; a piece that continues a word is rendered with a `##`
//! prefix. Vocabulary files may also carry explicit `##piece` entries, which
//! are then preferred for word-internal positions.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const CONTINUATION: &str = "##";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    longest: usize,
}

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own word.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    words.push(std::mem::take(&mut word));
                }
                words.push(c.to_string());
            }
        }
        if !word.is_empty() {
            words.push(word);
        }
    }
    words
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Consistency(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if index.get(*r) != Some(&i) {
                return Err(Error::Consistency(format!("reserved token {r} must have id {i}")));
            }
        }
        let longest = pieces.iter().map(|p| p.trim_start_matches(CONTINUATION).chars().count()).max().unwrap_or(1);
        Ok(Vocab { pieces, index, longest })
    }

    /// Builds a merge-based vocabulary of at most `target_size` entries.
    ///
    /// Starts from the reserved tokens plus every character in the corpus,
    /// then repeatedly merges the most frequent adjacent pair of pieces
    /// (lexicographically smallest pair on ties).
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Self> {
        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for w in pretokenize(text) {
                *freq.entry(w).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Empty("vocabulary corpus has no words".into()));
        }
        let mut words: Vec<(Vec<String>, u64)> =
            freq.into_iter().map(|(w, f)| (w.chars().map(String::from).collect(), f)).collect();
        words.sort();

        let mut alphabet: Vec<String> = words.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
        alphabet.sort();
        alphabet.dedup();
        if target_size < RESERVED.len() + alphabet.len() {
            return Err(Error::Param(format!(
                "target size {target_size} is below {} reserved tokens plus {} characters",
                RESERVED.len(),
                alphabet.len()
            )));
        }
        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(alphabet);
        let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();

        while pieces.len() < target_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (p, f) in &words {
                for w in p.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += f;
                }
            }
            let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            let merged = format!("{l}{r}");
            for (p, _) in &mut words {
                let mut i = 0;
                let mut out = Vec::with_capacity(p.len());
                while i < p.len() {
                    if i + 1 < p.len() && p[i] == l && p[i + 1] == r {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut p[i]));
                        i += 1;
                    }
                }
                *p = out;
            }
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
        }
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len()
    }

    fn lookup(&self, s: &str, word_start: bool) -> Option<usize> {
        if !word_start {
            if let Some(id) = self.index.get(&format!("{CONTINUATION}{s}")) {
                return Some(*id);
            }
        }
        self.index.get(s).copied()
    }

    /// Greedy longest-match segmentation of one pretokenized word.
    pub fn segment_word(&self, word: &str) -> Vec<Piece> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = i == 0;
            let mut found = None;
            for j in (i + 1..=chars.len().min(i + self.longest)).rev() {
                let s: String = chars[i..j].iter().collect();
                if let Some(id) = self.lookup(&s, start) {
                    found = Some((id, j));
                    break;
                }
            }
            match found {
                Some((id, j)) => {
                    out.push(Piece { id, word_start: start });
                    i = j;
                }
                None => {
                    out.push(Piece { id: UNK, word_start: start });
                    i += 1;
                }
            }
        }
        out
    }

    /// Segments a whole text into pieces (no special tokens).
    pub fn tokenize(&self, text: &str) -> Vec<Piece> {
        pretokenize(text).iter().flat_map(|w| self.segment_word(w)).collect()
    }

    /// Display form of a piece: `##` marks word-internal pieces.
    pub fn render(&self, piece: Piece) -> String {
        let p = self.piece(piece.id);
        if piece.word_start || Self::is_special(piece.id) || p.starts_with(CONTINUATION) {
            p.to_string()
        } else {
            format!("{CONTINUATION}{p}")
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(&text)
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_pieces(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: usize,
    pub word_start: bool,
}

/// Where the classification token sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsPlacement {
    /// `[CLS] tokens [SEP]`
    First,
    /// `tokens [SEP] [CLS]`
    Last,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSeq {
    pub ids: Vec<usize>,
    pub attention_keep: Vec<u8>,
    pub segment_ids: Vec<usize>,
    pub true_length: usize,
    /// Whether each position begins a word (specials and padding count as starts).
    pub word_start: Vec<bool>,
    pub placement: ClsPlacement,
}

impl EncodedSeq {
    pub fn cls_position(&self) -> usize {
        match self.placement {
            ClsPlacement::First => 0,
            ClsPlacement::Last => self.true_length - 1,
        }
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }
}

/// Wraps already-segmented pieces with special tokens and pads to `max_len`.
pub fn wrap(pieces: &[Piece], max_len: usize, placement: ClsPlacement) -> Result<EncodedSeq> {
    if max_len < 2 {
        return Err(Error::Param(format!("max_len {max_len} < 2")));
    }
    let body = &pieces[..pieces.len().min(max_len - 2)];
    let mut ids = Vec::with_capacity(max_len);
    let mut starts = Vec::with_capacity(max_len);
    if placement == ClsPlacement::First {
        ids.push(CLS);
        starts.push(true);
    }
    for p in body {
        ids.push(p.id);
        starts.push(p.word_start);
    }
    ids.push(SEP);
    starts.push(true);
    if placement == ClsPlacement::Last {
        ids.push(CLS);
        starts.push(true);
    }
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    starts.resize(max_len, true);
    let mut keep = vec![1u8; true_length];
    keep.resize(max_len, 0);
    Ok(EncodedSeq {
        ids,
        attention_keep: keep,
        segment_ids: vec![0; max_len],
        true_length,
        word_start: starts,
        placement,
    })
}

pub fn encode(text: &str, vocab: &Vocab, max_len: usize, placement: ClsPlacement) -> Result<EncodedSeq> {
    wrap(&vocab.tokenize(text), max_len, placement)
}

/// Joins the real non-special pieces back into lowercased text.
pub fn decode(seq: &EncodedSeq, vocab: &Vocab) -> String {
    let mut out = String::new();
    for i in 0..seq.true_length {
        let id = seq.ids[i];
        if Vocab::is_special(id) {
            continue;
        }
        if seq.word_start[i] && !out.is_empty() {
            out.push(' ');
        }
        out.push_str(vocab.piece(id).trim_start_matches(CONTINUATION));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmSample {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Replaces `max(1, round(rate · n))` of the `n` real non-special tokens by
/// `[MASK]`, returning the originals as targets.
pub fn mask_for_mlm<R: Rng + ?Sized>(seq: &EncodedSeq, rate: f64, rng: &mut R) -> Result<MlmSample> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Param(format!("mask rate {rate} not in (0, 1)")));
    }
    let maskable: Vec<usize> = (0..seq.true_length).filter(|&i| !Vocab::is_special(seq.ids[i])).collect();
    if maskable.is_empty() {
        return Err(Error::Empty("sequence has no maskable token".into()));
    }
    let n = ((rate * maskable.len() as f64).round() as usize).clamp(1, maskable.len());
    let mut positions: Vec<usize> = sample(rng, maskable.len(), n).into_iter().map(|i| maskable[i]).collect();
    positions.sort_unstable();
    let mut ids = seq.ids.clone();
    let targets = positions.iter().map(|&p| std::mem::replace(&mut ids[p], MASK)).collect();
    Ok(MlmSample { ids, positions, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab_of(pieces: &[&str]) -> Vocab {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(pieces.iter().map(|s| s.to_string()));
        Vocab::from_pieces(all).unwrap()
    }

    #[test]
    fn merges_repeated_character() {
        let v = Vocab::build(["aaaa"], RESERVED.len() + 2).unwrap();
        assert_eq!(v.len(), 7);
        assert!(v.id("a").is_some() && v.id("aa").is_some());
    }

    #[test]
    fn target_below_alphabet_is_rejected() {
        assert!(matches!(Vocab::build(["abc"], RESERVED.len() + 2), Err(Error::Param(_))));
        assert!(matches!(Vocab::build(["  "], 100), Err(Error::Empty(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the dog ate the cat food"];
        assert_eq!(Vocab::build(corpus, 40).unwrap(), Vocab::build(corpus, 40).unwrap());
    }

    #[test]
    fn frequency_ties_merge_smallest_pair_first() {
        // "ab" and "cd" each occur once; ("a","b") < ("c","d").
        let v = Vocab::build(["ab cd"], RESERVED.len() + 5).unwrap();
        assert_eq!(v.piece(RESERVED.len() + 4), "ab");
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab_of(&["u", "n", "a", "f", "o", "r", "d", "b", "l", "e", "un", "afford", "able", "aff"]);
        let pieces = v.tokenize("unaffordable");
        let shown: Vec<String> = pieces.iter().map(|&p| v.render(p)).collect();
        assert_eq!(shown, ["un", "##afford", "##able"]);
    }

    #[test]
    fn explicit_continuation_entries_are_used() {
        let v = vocab_of(&["play", "##ing", "ing"]);
        let pieces = v.tokenize("playing ing");
        let ids: Vec<usize> = pieces.iter().map(|p| p.id).collect();
        assert_eq!(ids, [5, 6, 7]);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = vocab_of(&["a"]);
        let ids: Vec<usize> = v.tokenize("aza").iter().map(|p| p.id).collect();
        assert_eq!(ids, [5, UNK, 5]);
    }

    #[test]
    fn encode_layout() {
        let v = vocab_of(&["a", "b"]);
        let e = encode("", &v, 6, ClsPlacement::First).unwrap();
        assert_eq!(e.ids, [CLS, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(e.true_length, 2);
        let e = encode("a b", &v, 6, ClsPlacement::First).unwrap();
        assert_eq!(e.attention_keep.iter().filter(|&&k| k == 1).count(), e.true_length);
        assert_eq!(e.attention_keep, [1, 1, 1, 1, 0, 0]);
        let e = encode("a b", &v, 6, ClsPlacement::Last).unwrap();
        assert_eq!(e.ids, [5, 6, SEP, CLS, PAD, PAD]);
        assert_eq!(e.cls_position(), 3);
        let e = encode("a b a b a b", &v, 4, ClsPlacement::First).unwrap();
        assert_eq!(e.ids, [CLS, 5, 6, SEP]);
        assert!(encode("a", &v, 1, ClsPlacement::First).is_err());
    }

    #[test]
    fn decode_recovers_text() {
        let corpus = "The quick brown fox, jumps over the lazy dog.";
        let v = Vocab::build([corpus], 60).unwrap();
        let e = encode(corpus, &v, 64, ClsPlacement::First).unwrap();
        assert_eq!(decode(&e, &v), "the quick brown fox , jumps over the lazy dog .");
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocab::build(["hello world hello"], 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn mlm_counts() {
        let v = vocab_of(&["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = encode(&"a ".repeat(20), &v, 30, ClsPlacement::First).unwrap();
        let s = mask_for_mlm(&e, 0.15, &mut rng).unwrap();
        assert_eq!(s.positions.len(), 3);
        for &p in &s.positions {
            assert_eq!(s.ids[p], MASK);
        }
        let e = encode("a", &v, 8, ClsPlacement::First).unwrap();
        assert_eq!(mask_for_mlm(&e, 0.15, &mut rng).unwrap().positions, [1]);
        let e = encode("", &v, 8, ClsPlacement::First).unwrap();
        assert!(mask_for_mlm(&e, 0.15, &mut rng).is_err());
    }

    #[test]
    fn specials_never_masked() {
        let v = vocab_of(&["a", "b"]);
        let e = encode("a b a b a", &v, 12, ClsPlacement::First).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let s = mask_for_mlm(&e, 0.5, &mut rng).unwrap();
            assert!(s.positions.iter().all(|&p| !Vocab::is_special(e.ids[p])));
        }
    }
}
