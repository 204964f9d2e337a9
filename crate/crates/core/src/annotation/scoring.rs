//! Sentence-level BLEU-4 and ROUGE-1/2/L, all on a 0–100 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap and the candidate/reference n-gram totals.
fn overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hits, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// BLEU with uniform weights up to 4-grams and a brevity penalty. The
/// unigram precision is unsmoothed, so no shared word gives 0; higher
/// orders use add-one smoothing so short sentences stay defined.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (hits, total, _) = overlap(&c, &r, n);
        let p = if n == 1 {
            if hits == 0 {
                return 0.0;
            }
            hits as f64 / total as f64
        } else {
            (hits as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let (lc, lr) = (c.len() as f64, r.len() as f64);
    let bp = if lc > lr { 1.0 } else { (1.0 - lr / lc).exp() };
    100.0 * bp * log_sum.exp()
}

fn f1(hits: usize, cand_total: usize, ref_total: usize) -> f64 {
    if hits == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = hits as f64 / cand_total as f64;
    let r = hits as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// ROUGE-N F1.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let (hits, ct, rt) = overlap(&tokenize(candidate), &tokenize(reference), n);
    f1(hits, ct, rt)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    f1(lcs_len(&c, &r), c.len(), r.len())
}

pub fn score_text(candidate: &str, reference: &str) -> TextScores {
    TextScores {
        bleu4: bleu4(candidate, reference),
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_perfect() {
        let s = "First, the person faces the back of the white chair.";
        let sc = score_text(s, s);
        assert_eq!(sc.bleu4, 100.0);
        assert_eq!(sc.rouge1, 100.0);
        assert_eq!(sc.rouge2, 100.0);
        assert_eq!(sc.rouge_l, 100.0);
        assert_eq!(score_text("hi", "hi").bleu4, 100.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let sc = score_text("alpha beta gamma", "delta epsilon zeta");
        assert_eq!((sc.bleu4, sc.rouge1, sc.rouge2, sc.rouge_l), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn dropped_final_word() {
        let reference = "a person lifts the box and puts it down slowly";
        let cand = "a person lifts the box and puts it down";
        let expect = 2.0 * (9.0 / 9.0 * 9.0 / 10.0) / (9.0 / 9.0 + 9.0 / 10.0) * 100.0;
        assert!((rouge_n(cand, reference, 1) - expect).abs() < 1e-9);
        assert!((expect - 94.7368).abs() < 1e-3);
    }

    #[test]
    fn lcs() {
        let t = |s: &str| tokenize(s);
        assert_eq!(lcs_len(&t("a b c d"), &t("a c b d")), 3);
        assert_eq!(lcs_len(&t(""), &t("a")), 0);
    }
}
