//! ROUGE-1/2/L scoring of generated reasoning against reference transcripts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn zero() -> Self {
        RougeScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        }
    }

    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

/// Lowercase and split on runs of non-alphanumeric characters, dropping
/// empty tokens. Hyphens and all other punctuation act as separators.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Clipped n-gram overlap F1. Each reference n-gram is credited at most as
/// many times as it occurs in the reference. Empty gram sets on either
/// side give a zero for that side's ratio.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    if cand.len() < n && refr.len() < n {
        return RougeScore::zero();
    }

    let mut ref_counts: HashMap<&[&str], usize> = HashMap::new();
    for gram in refr.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }

    let mut overlap = 0usize;
    for gram in cand.windows(n) {
        if let Some(count) = ref_counts.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }

    let cand_total = cand.len().saturating_sub(n - 1);
    let ref_total = refr.len().saturating_sub(n - 1);
    let precision = ratio(overlap, cand_total);
    let recall = ratio(overlap, ref_total);
    RougeScore::from_pr(precision, recall)
}

/// Longest-common-subsequence F1 over whole token lists.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::zero();
    }
    let lcs = lcs_length(candidate, reference);
    let precision = ratio(lcs, candidate.len());
    let recall = ratio(lcs, reference.len());
    RougeScore::from_pr(precision, recall)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn lcs_length<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    // Two rolling rows; short inputs run entirely on a stack buffer.
    let width = b.len() + 1;
    let mut stack_buf = [0usize; 32];
    let mut heap_buf;
    let rows = if 2 * width <= stack_buf.len() {
        &mut stack_buf[..2 * width]
    } else {
        heap_buf = vec![0usize; 2 * width];
        heap_buf.as_mut_slice()
    };
    let (mut prev, mut curr) = rows.split_at_mut(width);
    for ai in a {
        let ai = ai.as_ref();
        // diag tracks prev[j], best tracks the cell just written, so the
        // row advances without any indexing.
        let mut diag = 0usize;
        let mut best = 0usize;
        for ((bj, &up), slot) in b.iter().zip(prev[1..].iter()).zip(curr[1..].iter_mut()) {
            best = if ai == bj.as_ref() { diag + 1 } else { up.max(best) };
            *slot = best;
            diag = up;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-9;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        assert_eq!(tokenize("The cat, sat!"), toks(&["the", "cat", "sat"]));
    }

    #[test]
    fn tokenize_empty_string() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_hyphen_is_a_separator() {
        assert_eq!(tokenize("A-B c"), toks(&["a", "b", "c"]));
    }

    #[test]
    fn rouge_1_hand_counted() {
        // cand {the, cat, sat} vs ref {the, cat}: overlap 2, p 2/3, r 1.
        let s = rouge_n(&toks(&["the", "cat", "sat"]), &toks(&["the", "cat"]), 1);
        assert!((s.precision - 2.0 / 3.0).abs() < TOL);
        assert!((s.recall - 1.0).abs() < TOL);
        assert!((s.f1 - 0.8).abs() < TOL);
    }

    #[test]
    fn rouge_2_hand_counted() {
        // bigrams: cand {the cat, cat sat} vs ref {the cat}: overlap 1.
        let s = rouge_n(&toks(&["the", "cat", "sat"]), &toks(&["the", "cat"]), 2);
        assert!((s.precision - 0.5).abs() < TOL);
        assert!((s.recall - 1.0).abs() < TOL);
        assert!((s.f1 - 2.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn rouge_l_hand_counted() {
        let s = rouge_l(&toks(&["the", "cat", "sat"]), &toks(&["the", "cat"]));
        assert!((s.f1 - 0.8).abs() < TOL);
    }

    #[test]
    fn identical_sequences_score_one() {
        let x = toks(&["alpha", "beta", "gamma"]);
        for n in [1, 2] {
            let s = rouge_n(&x, &x, n);
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let s = rouge_l(&x, &x);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        let a = toks(&["one", "two"]);
        let b = toks(&["three", "four"]);
        assert_eq!(rouge_l(&a, &b), RougeScore::zero());
        assert_eq!(rouge_n(&a, &b, 1), RougeScore::zero());
    }

    #[test]
    fn empty_reference_scores_zero() {
        let a = toks(&["one"]);
        let b: Vec<String> = vec![];
        assert_eq!(rouge_l(&a, &b), RougeScore::zero());
        assert_eq!(rouge_n(&a, &b, 1), RougeScore::zero());
    }

    #[test]
    fn clipping_limits_repeated_grams() {
        // cand repeats "the" three times; ref has it once.
        let s = rouge_n(&toks(&["the", "the", "the"]), &toks(&["the", "cat"]), 1);
        assert!((s.precision - 1.0 / 3.0).abs() < TOL);
        assert!((s.recall - 0.5).abs() < TOL);
    }

    #[test]
    fn rouge_1_is_order_insensitive_on_candidate() {
        let reference = toks(&["a", "b", "c", "d"]);
        let s1 = rouge_n(&toks(&["a", "c", "b"]), &reference, 1);
        let s2 = rouge_n(&toks(&["b", "a", "c"]), &reference, 1);
        assert_eq!(s1, s2);
    }

    #[test]
    fn lcs_simple_cases() {
        assert_eq!(lcs_length(&["a", "b", "c"], &["a", "c"]), 2);
        assert_eq!(lcs_length(&["a", "b"], &["b", "a"]), 1);
        assert_eq!(lcs_length(&[], &["a"]), 0);
    }
}
