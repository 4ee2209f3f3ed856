//! Seeded toy corpora whose scores are a deterministic function of surface
//! vocabulary: an essay's score is the highest tier among the marker words
//! it contains, or `0` without any.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bow::bow_tokens;
use crate::corpus::ScoredEssay;
use crate::error::{Error, Result};

pub const FILLER: [&str; 40] = [
    "the", "and", "of", "to", "a", "in", "is", "it", "that", "was", "school", "day", "friend", "computer", "people",
    "think", "time", "library", "book", "family", "summer", "game", "city", "teacher", "story", "work", "home",
    "music", "park", "idea", "street", "morning", "class", "phone", "garden", "river", "window", "letter", "lunch",
    "bus",
];

/// Marker words by tier; tier `t` is `TIERS[t - 1]`.
pub const TIERS: [[&str; 6]; 5] = [
    ["clear", "reason", "example", "detail", "because", "support"],
    ["evidence", "analysis", "contrast", "therefore", "structure", "insight"],
    ["nuanced", "synthesis", "counterargument", "rhetorical", "coherent", "compelling"],
    ["eloquent", "meticulous", "juxtaposition", "paradigm", "substantiate", "elucidate"],
    ["epistemic", "dialectical", "perspicacious", "heuristic", "ontological", "hermeneutic"],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub item: i64,
    pub essays: usize,
    /// Scores run over `0..=max_score`.
    pub max_score: i64,
    pub min_words: usize,
    pub max_words: usize,
    /// Own-tier marker words inserted per essay.
    pub markers: (usize, usize),
    /// Probability of an extra lower-tier marker.
    pub distractor_rate: f64,
    /// Probability that the second rater is off by one.
    pub rater_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(item: i64, essays: usize, max_score: i64, seed: u64) -> Self {
        SynthSpec {
            item,
            essays,
            max_score,
            min_words: 12,
            max_words: 24,
            markers: (2, 3),
            distractor_rate: 0.25,
            rater_noise: 0.2,
            seed,
        }
    }
}

/// Highest marker tier present in `text`.
pub fn synth_score(text: &str) -> i64 {
    bow_tokens(text)
        .iter()
        .filter_map(|w| TIERS.iter().rposition(|tier| tier.contains(&w.as_str())))
        .map(|t| t as i64 + 1)
        .max()
        .unwrap_or(0)
}

fn essay_text<R: Rng>(score: i64, spec: &SynthSpec, rng: &mut R) -> String {
    let n = rng.gen_range(spec.min_words..=spec.max_words);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    if score > 0 {
        let own = &TIERS[score as usize - 1];
        for _ in 0..rng.gen_range(spec.markers.0..=spec.markers.1) {
            let at = rng.gen_range(0..=words.len());
            words.insert(at, own.choose(rng).expect("non-empty"));
        }
        if score > 1 && rng.gen_bool(spec.distractor_rate) {
            let lower = &TIERS[rng.gen_range(0..score as usize - 1)];
            let at = rng.gen_range(0..=words.len());
            words.insert(at, lower.choose(rng).expect("non-empty"));
        }
    }
    let mut text = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            text.push(' ');
        }
        text.push_str(w);
        if i + 1 < words.len() && rng.gen_bool(0.08) {
            text.push(',');
        }
    }
    text.push('.');
    text
}

/// Scores cycle through `0..=max_score` so every label occurs.
pub fn synthetic_essays(spec: &SynthSpec) -> Result<Vec<ScoredEssay>> {
    if !(1..=TIERS.len() as i64).contains(&spec.max_score) {
        return Err(Error::Param(format!("max_score {} not in 1..={}", spec.max_score, TIERS.len())));
    }
    if spec.markers.0 == 0 || spec.markers.0 > spec.markers.1 || !(0.0..=1.0).contains(&spec.distractor_rate) {
        return Err(Error::Param(format!(
            "marker range {:?} / distractor rate {}",
            spec.markers, spec.distractor_rate
        )));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(Error::Param(format!("word range {}..={}", spec.min_words, spec.max_words)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.max_score + 1;
    let mut out = Vec::with_capacity(spec.essays);
    for i in 0..spec.essays {
        let score = i as i64 % k;
        let text = essay_text(score, spec, &mut rng);
        debug_assert_eq!(synth_score(&text), score);
        let rater2 = if rng.gen_bool(spec.rater_noise) {
            let step = if rng.gen_bool(0.5) { 1 } else { -1 };
            (score + step).clamp(0, spec.max_score)
        } else {
            score
        };
        out.push(ScoredEssay {
            essay_id: spec.item * 100_000 + i as i64,
            item: spec.item,
            text,
            rater1: score,
            rater2,
            resolved: score,
        });
    }
    Ok(out)
}
