//! Scored-essay ingestion, label mapping, seeded 5-fold splits and text filters.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredEssay {
    pub essay_id: i64,
    /// Prompt (essay set) the essay answers.
    pub item: i64,
    pub text: String,
    pub rater1: i64,
    pub rater2: i64,
    pub resolved: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemSpec {
    pub item: i64,
    pub min_score: i64,
    pub max_score: i64,
}

impl ItemSpec {
    pub fn new(item: i64, min_score: i64, max_score: i64) -> Result<Self> {
        if max_score <= min_score {
            return Err(Error::Param(format!("item {item}: max score {max_score} must exceed min score {min_score}")));
        }
        Ok(ItemSpec { item, min_score, max_score })
    }

    pub fn num_labels(&self) -> usize {
        (self.max_score - self.min_score + 1) as usize
    }

    pub fn contains(&self, score: i64) -> bool {
        (self.min_score..=self.max_score).contains(&score)
    }

    pub fn to_label(&self, score: i64) -> Result<usize> {
        if !self.contains(score) {
            return Err(Error::OutOfRange(format!(
                "score {score} outside [{}, {}] for item {}",
                self.min_score, self.max_score, self.item
            )));
        }
        Ok((score - self.min_score) as usize)
    }

    pub fn to_score(&self, label: usize) -> i64 {
        self.min_score + label as i64
    }
}

pub const TSV_COLUMNS: [&str; 6] =
    ["essay_id", "essay_set", "essay", "rater1_domain1", "rater2_domain1", "domain1_score"];

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').quoting(false).flexible(true).has_headers(true).from_reader(file))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn column_index(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| parse_err(path, 1, format!("missing column {name}")))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, e.to_string())
}

/// Reads an ASAP-style TSV and infers each item's score range from the data.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<(Vec<ScoredEssay>, Vec<ItemSpec>)> {
    let essays = read_essays(path.as_ref())?;
    let specs = infer_item_specs(&essays)?;
    Ok((essays, specs))
}

/// Reads essays and validates them against a sidecar of declared item ranges.
pub fn load_tsv_with_specs(
    path: impl AsRef<Path>,
    sidecar: impl AsRef<Path>,
) -> Result<(Vec<ScoredEssay>, Vec<ItemSpec>)> {
    let path = path.as_ref();
    let essays = read_essays(path)?;
    let specs = load_item_specs(sidecar)?;
    let by_item: BTreeMap<i64, ItemSpec> = specs.iter().map(|s| (s.item, *s)).collect();
    for (i, e) in essays.iter().enumerate() {
        let spec = by_item
            .get(&e.item)
            .ok_or_else(|| parse_err(path, i + 2, format!("item {} has no declared range", e.item)))?;
        for s in [e.rater1, e.rater2, e.resolved] {
            if !spec.contains(s) {
                return Err(parse_err(path, i + 2, format!("score {s} outside declared range of item {}", e.item)));
            }
        }
    }
    Ok((essays, specs))
}

fn read_essays(path: &Path) -> Result<Vec<ScoredEssay>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<usize> = TSV_COLUMNS.iter().map(|c| column_index(path, &headers, c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(cols[i]).unwrap_or("");
        let int = |i: usize| -> Result<i64> {
            field(i)
                .trim()
                .parse::<i64>()
                .map_err(|_| parse_err(path, line, format!("{} is not an integer: {:?}", TSV_COLUMNS[i], field(i))))
        };
        let text = field(2).to_string();
        if text.trim().is_empty() {
            return Err(parse_err(path, line, "empty essay"));
        }
        out.push(ScoredEssay {
            essay_id: int(0)?,
            item: int(1)?,
            text,
            rater1: int(3)?,
            rater2: int(4)?,
            resolved: int(5)?,
        });
    }
    Ok(out)
}

/// Unscored essays for prediction: `essay_id`, `essay_set`, `essay`.
pub fn load_unscored(path: impl AsRef<Path>) -> Result<Vec<(i64, i64, String)>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let id = column_index(path, &headers, "essay_id")?;
    let set = column_index(path, &headers, "essay_set")?;
    let text = column_index(path, &headers, "essay")?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let int = |i: usize| -> Result<i64> {
            rec.get(i).unwrap_or("").trim().parse().map_err(|_| parse_err(path, line, "expected integer"))
        };
        let t = rec.get(text).unwrap_or("").to_string();
        if t.trim().is_empty() {
            return Err(parse_err(path, line, "empty essay"));
        }
        out.push((int(id)?, int(set)?, t));
    }
    Ok(out)
}

/// Serializes essays with the ASAP column names. Tabs and newlines inside
/// the text are replaced by spaces.
pub fn emit_tsv(essays: &[ScoredEssay]) -> String {
    let mut out = TSV_COLUMNS.join("\t");
    out.push('\n');
    for e in essays {
        let text: String = e.text.chars().map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c }).collect();
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", e.essay_id, e.item, text, e.rater1, e.rater2, e.resolved).unwrap();
    }
    out
}

pub fn load_item_specs(path: impl AsRef<Path>) -> Result<Vec<ItemSpec>> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols = ["item", "min_score", "max_score"]
        .iter()
        .map(|c| column_index(path, &headers, c))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let v: Vec<i64> = cols
            .iter()
            .map(|&i| rec.get(i).unwrap_or("").trim().parse().map_err(|_| parse_err(path, line, "expected integer")))
            .collect::<Result<_>>()?;
        out.push(ItemSpec::new(v[0], v[1], v[2]).map_err(|e| parse_err(path, line, e.to_string()))?);
    }
    Ok(out)
}

/// Observed min/max per item over both raters and the resolved score.
pub fn infer_item_specs(essays: &[ScoredEssay]) -> Result<Vec<ItemSpec>> {
    let mut ranges: BTreeMap<i64, (i64, i64)> = BTreeMap::new();
    for e in essays {
        let r = ranges.entry(e.item).or_insert((i64::MAX, i64::MIN));
        for s in [e.rater1, e.rater2, e.resolved] {
            r.0 = r.0.min(s);
            r.1 = r.1.max(s);
        }
    }
    ranges.into_iter().map(|(item, (lo, hi))| ItemSpec::new(item, lo, hi)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledEssay {
    pub essay_id: i64,
    pub item: i64,
    pub text: String,
    pub label: usize,
    pub rater1: usize,
    pub rater2: usize,
}

/// Maps scores to contiguous labels `score − min_score`.
pub fn to_labels(essays: &[ScoredEssay], spec: &ItemSpec) -> Result<Vec<LabeledEssay>> {
    essays
        .iter()
        .filter(|e| e.item == spec.item)
        .map(|e| {
            Ok(LabeledEssay {
                essay_id: e.essay_id,
                item: e.item,
                text: e.text.clone(),
                label: spec.to_label(e.resolved)?,
                rater1: spec.to_label(e.rater1)?,
                rater2: spec.to_label(e.rater2)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<i64>,
    /// Development set used for model selection.
    pub test: Vec<i64>,
    pub validation: Vec<i64>,
}

pub const NUM_FOLDS: usize = 5;

fn item_seed(seed: u64, item: i64) -> u64 {
    seed ^ (item as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Five 60/20/20 splits. Each item is shuffled by the seed and cut into five
/// chunks; fold `v` validates on chunk `v`, tests on chunk `(v+1) mod 5` and
/// trains on the rest.
pub fn kfold_splits(essays: &[ScoredEssay], seed: u64) -> Result<Vec<FoldSplit>> {
    let mut by_item: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
    for e in essays {
        by_item.entry(e.item).or_default().push(e.essay_id);
    }
    if by_item.is_empty() {
        return Err(Error::Empty("no essays to split".into()));
    }
    let mut folds: Vec<FoldSplit> = (0..NUM_FOLDS)
        .map(|fold| FoldSplit { fold, train: Vec::new(), test: Vec::new(), validation: Vec::new() })
        .collect();
    for (item, mut ids) in by_item {
        if ids.len() < NUM_FOLDS {
            return Err(Error::Param(format!("item {item} has {} essays; at least {NUM_FOLDS} are needed", ids.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, item));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let chunk = |c: usize| &ids[c * n / NUM_FOLDS..(c + 1) * n / NUM_FOLDS];
        for (v, f) in folds.iter_mut().enumerate() {
            let t = (v + 1) % NUM_FOLDS;
            f.validation.extend_from_slice(chunk(v));
            f.test.extend_from_slice(chunk(t));
            for c in (0..NUM_FOLDS).filter(|&c| c != v && c != t) {
                f.train.extend_from_slice(chunk(c));
            }
        }
    }
    Ok(folds)
}

/// A fixed English list of 127 function words.
pub const DEFAULT_STOPWORDS: [&str; 127] = [
    "i",
    "me",
    "my",
    "myself",
    "we",
    "our",
    "ours",
    "ourselves",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "her",
    "hers",
    "herself",
    "it",
    "its",
    "itself",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
    "what",
    "which",
    "who",
    "whom",
    "this",
    "that",
    "these",
    "those",
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "have",
    "has",
    "had",
    "having",
    "do",
    "does",
    "did",
    "doing",
    "a",
    "an",
    "the",
    "and",
    "but",
    "if",
    "or",
    "because",
    "as",
    "until",
    "while",
    "of",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "in",
    "out",
    "on",
    "off",
    "over",
    "under",
    "again",
    "further",
    "then",
    "once",
    "here",
    "there",
    "when",
    "where",
    "why",
    "how",
    "all",
    "any",
    "both",
    "each",
    "few",
    "more",
    "most",
    "other",
    "some",
    "such",
    "no",
    "nor",
    "not",
    "only",
    "own",
    "same",
    "so",
    "than",
    "too",
    "very",
    "s",
    "t",
    "can",
    "will",
    "just",
    "don",
    "should",
    "now",
];

pub fn default_stoplist() -> HashSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// One lowercase word per line; blank lines ignored.
pub fn load_stoplist(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect())
}

/// Deletes words whose lowercase form is in `stoplist`. Punctuation stays
/// attached to its whitespace-delimited chunk; chunks left empty are dropped
/// and the remaining ones are joined by single spaces.
pub fn remove_stopwords(text: &str, stoplist: &HashSet<String>) -> String {
    let mut kept_chunks = Vec::new();
    for chunk in text.split_whitespace() {
        let mut out = String::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if !word.is_empty() && !stoplist.contains(&word.to_lowercase()) {
                out.push_str(word);
            }
            word.clear();
        };
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        if !out.is_empty() {
            kept_chunks.push(out);
        }
    }
    kept_chunks.join(" ")
}
