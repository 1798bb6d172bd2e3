//! ROUGE-N, ROUGE-L and Weighted ROUGE.
//!
//! Weighted ROUGE is `R1/6 + R2/3 + R3/2` over ROUGE-N F1 scores by default;
//! [`WeightedMode::Recall`] combines recalls instead.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, cand: usize, refr: usize) -> Self {
        if cand == 0 || refr == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / cand as f64;
        let recall = overlap as f64 / refr as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

const PUNCTUATION: &[char] = &[
    '.', ',', '!', '?', ';', ':', '"', '\'', '(', ')', '[', ']', '{', '}', '-', '_', '/', '\\', '`',
    '*', '&', '#', '@', '%', '^', '~', '<', '>', '|', '+', '=', '$',
];

/// Lowercases, splits on whitespace and strips surrounding ASCII punctuation.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.trim_matches(PUNCTUATION).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// One token per character, with spaces kept as `_`. Used for the toy tasks,
/// whose outputs are short strings rather than sentences.
pub fn char_tokens(s: &str) -> Vec<String> {
    s.chars()
        .map(|c| if c == ' ' { "_".to_string() } else { c.to_string() })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram counts over pre-tokenized input.
pub fn rouge_n_tokens(cand: &[String], refr: &[String], n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |t: &[String]| t.len().saturating_sub(n - 1);
    RougeScore::from_counts(overlap, total(cand), total(refr))
}

pub fn rouge_n(cand: &str, refr: &str, n: usize) -> RougeScore {
    rouge_n_tokens(&tokenize(cand), &tokenize(refr), n)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with `β = 1`.
pub fn rouge_l_tokens(cand: &[String], refr: &[String]) -> RougeScore {
    RougeScore::from_counts(lcs_len(cand, refr), cand.len(), refr.len())
}

pub fn rouge_l(cand: &str, refr: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(cand), &tokenize(refr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightedMode {
    #[default]
    F1,
    Recall,
}

/// `r1/6 + r2/3 + r3/2`, evaluated as `(r1 + 2·r2 + 3·r3) / 6` so that
/// three perfect scores give exactly 1.
pub fn combine_weighted(r1: f64, r2: f64, r3: f64) -> f64 {
    (r1 + 2.0 * r2 + 3.0 * r3) / 6.0
}

pub fn weighted_rouge_tokens(cand: &[String], refr: &[String], mode: WeightedMode) -> f64 {
    let pick = |s: RougeScore| match mode {
        WeightedMode::F1 => s.f1,
        WeightedMode::Recall => s.recall,
    };
    combine_weighted(
        pick(rouge_n_tokens(cand, refr, 1)),
        pick(rouge_n_tokens(cand, refr, 2)),
        pick(rouge_n_tokens(cand, refr, 3)),
    )
}

pub fn weighted_rouge(cand: &str, refr: &str) -> f64 {
    weighted_rouge_tokens(&tokenize(cand), &tokenize(refr), WeightedMode::F1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rouge1,
    Rouge2,
    Rouge3,
    RougeL,
    WeightedRouge,
    ExactMatch,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::Rouge3,
        Metric::RougeL,
        Metric::WeightedRouge,
        Metric::ExactMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::Rouge2 => "rouge2",
            Metric::Rouge3 => "rouge3",
            Metric::RougeL => "rougeL",
            Metric::WeightedRouge => "weighted_rouge",
            Metric::ExactMatch => "exact_match",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Words,
    Chars,
}

impl Tokenization {
    pub fn apply(self, s: &str) -> Vec<String> {
        match self {
            Tokenization::Words => tokenize(s),
            Tokenization::Chars => char_tokens(s),
        }
    }
}

/// Score in `[0, 1]` for a single pair.
pub fn score(metric: Metric, cand: &str, refr: &str, tok: Tokenization) -> f64 {
    if metric == Metric::ExactMatch {
        return if cand == refr { 1.0 } else { 0.0 };
    }
    let (c, r) = (tok.apply(cand), tok.apply(refr));
    match metric {
        Metric::Rouge1 => rouge_n_tokens(&c, &r, 1).f1,
        Metric::Rouge2 => rouge_n_tokens(&c, &r, 2).f1,
        Metric::Rouge3 => rouge_n_tokens(&c, &r, 3).f1,
        Metric::RougeL => rouge_l_tokens(&c, &r).f1,
        Metric::WeightedRouge => weighted_rouge_tokens(&c, &r, WeightedMode::F1),
        Metric::ExactMatch => unreachable!(),
    }
}

/// Mean score over `(candidate, reference)` pairs, as a percentage.
pub fn evaluate_set<S: AsRef<str>>(pairs: &[(S, S)], metric: Metric) -> Result<f64> {
    evaluate_set_with(pairs, metric, Tokenization::Words)
}

pub fn evaluate_set_with<S: AsRef<str>>(pairs: &[(S, S)], metric: Metric, tok: Tokenization) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let total: f64 = pairs
        .iter()
        .map(|(c, r)| score(metric, c.as_ref(), r.as_ref(), tok))
        .sum();
    Ok(100.0 * total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    // brute force: enumerate all n-grams and count matches with removal
    fn brute_overlap(cand: &[String], refr: &[String], n: usize) -> usize {
        if cand.len() < n || refr.len() < n {
            return 0;
        }
        let mut pool: Vec<&[String]> = refr.windows(n).collect();
        let mut hits = 0;
        for g in cand.windows(n) {
            if let Some(i) = pool.iter().position(|p| *p == g) {
                pool.remove(i);
                hits += 1;
            }
        }
        hits
    }

    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
            if sub.len() <= best {
                continue;
            }
            let mut it = b.iter();
            if sub.iter().all(|s| it.any(|x| x == *s)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("The cat."), vec!["the", "cat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  b"), vec!["a", "b"]);
        assert_eq!(tokenize("\"Hello,\" world!"), vec!["hello", "world"]);
    }

    #[test]
    fn rouge_n_examples() {
        let s = rouge_n("a b c d", "a b c d", 2);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n("x y", "a b", 1), RougeScore::default());
        let s = rouge_n("the cat sat", "the cat", 1);
        let (c, r) = (toks("the cat sat"), toks("the cat"));
        assert_eq!(brute_overlap(&c, &r, 1), 2);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        assert_eq!(rouge_n("", "a", 1), RougeScore::default());
    }

    #[test]
    fn rouge_n_clips_repeats() {
        let s = rouge_n("the the the", "the cat", 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rouge_l("a b c", "a b c").f1, 1.0);
        let (c, r) = (toks("the cat sat"), toks("the cat"));
        assert_eq!(brute_lcs(&c, &r), 2);
        assert!((rouge_l("the cat sat", "the cat").f1 - 0.8).abs() < 1e-12);
        let (c, r) = (toks("a b c"), toks("c b a"));
        assert_eq!(brute_lcs(&c, &r), 1);
        assert_eq!(lcs_len(&c, &r), 1);
    }

    #[test]
    fn weighted_rouge_examples() {
        assert_eq!(weighted_rouge("a b c", "a b c"), 1.0);
        assert_eq!(weighted_rouge("one two three four", "one two three four"), 1.0);
        assert_eq!(weighted_rouge("x y z", "a b c"), 0.0);

        // cand "a b c d", ref "a b c": overlaps 3/4/3 unigrams, 2/3/2 bigrams, 1/2/1 trigrams
        let (c, r) = (toks("a b c d"), toks("a b c"));
        let f = |n: usize| {
            let o = brute_overlap(&c, &r, n) as f64;
            let (p, rec) = (o / (c.len() + 1 - n) as f64, o / (r.len() + 1 - n) as f64);
            2.0 * p * rec / (p + rec)
        };
        let want = f(1) / 6.0 + f(2) / 3.0 + f(3) / 2.0;
        assert!((weighted_rouge("a b c d", "a b c") - want).abs() < 1e-12);
    }

    #[test]
    fn weights_are_one_sixth_third_half() {
        assert!((combine_weighted(1.0, 0.0, 0.0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((combine_weighted(0.0, 1.0, 0.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((combine_weighted(0.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(combine_weighted(1.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn recall_mode() {
        let c = toks("a b c d");
        let r = toks("a b c");
        assert_eq!(weighted_rouge_tokens(&c, &r, WeightedMode::Recall), 1.0);
    }

    #[test]
    fn evaluate_set_examples() {
        let same = [("a b c", "a b c"), ("d e f", "d e f")];
        assert_eq!(evaluate_set(&same, Metric::WeightedRouge).unwrap(), 100.0);
        let half = [("a b c", "a b c"), ("x y z", "a b c")];
        assert_eq!(evaluate_set(&half, Metric::WeightedRouge).unwrap(), 50.0);
        let mixed = [("the cat sat", "the cat"), ("a b c", "c b a"), ("q", "q")];
        let want = (0.8 + 1.0 / 3.0 + 1.0) / 3.0 * 100.0;
        assert!((evaluate_set(&mixed, Metric::RougeL).unwrap() - want).abs() < 1e-9);
        let empty: [(&str, &str); 0] = [];
        assert!(evaluate_set(&empty, Metric::RougeL).is_err());
    }

    #[test]
    fn char_level_scoring() {
        assert_eq!(char_tokens("ab c"), vec!["a", "b", "_", "c"]);
        assert_eq!(score(Metric::WeightedRouge, "abc", "abc", Tokenization::Chars), 1.0);
        assert_eq!(score(Metric::ExactMatch, "abc", "abd", Tokenization::Chars), 0.0);
    }

    fn word_list(max: usize) -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "d"].prop_map(String::from), 0..=max)
    }

    proptest! {
        #[test]
        fn lcs_matches_exhaustive(a in word_list(8), b in word_list(8)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn f1_symmetric(a in word_list(8), b in word_list(8), n in 1usize..4) {
            let x = rouge_n_tokens(&a, &b, n);
            let y = rouge_n_tokens(&b, &a, n);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
            let lx = rouge_l_tokens(&a, &b);
            let ly = rouge_l_tokens(&b, &a);
            prop_assert!((lx.f1 - ly.f1).abs() < 1e-12);
        }

        #[test]
        fn appending_a_match_never_lowers_recall(a in word_list(6), b in word_list(6), pick in 0usize..6) {
            prop_assume!(!b.is_empty());
            let tok = b[pick % b.len()].clone();
            let mut longer = a.clone();
            longer.push(tok);
            prop_assert!(rouge_n_tokens(&longer, &b, 1).recall >= rouge_n_tokens(&a, &b, 1).recall);
            prop_assert!(rouge_l_tokens(&longer, &b).recall >= rouge_l_tokens(&a, &b).recall);
        }

        #[test]
        fn weighted_rouge_in_unit_interval(a in word_list(8), b in word_list(8)) {
            let w = weighted_rouge_tokens(&a, &b, WeightedMode::F1);
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
