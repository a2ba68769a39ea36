use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

fn check_lengths(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{op}: {a} predictions for {b} references")));
    }
    if a == 0 {
        return Err(Error::Contract(format!("{op}: no predictions")));
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes that occur in `golds`.
pub fn macro_f1<T: Ord>(preds: &[T], golds: &[T]) -> Result<f64> {
    check_lengths("macro_f1", preds.len(), golds.len())?;
    let classes: BTreeSet<&T> = golds.iter().collect();
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(golds) {
            match (p == *c, g == *c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(total / classes.len() as f64)
}

pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths("mae", preds.len(), golds.len())?;
    let s: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / golds.len() as f64)
}

pub fn rmse(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths("rmse", preds.len(), golds.len())?;
    let s: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).powi(2)).sum();
    Ok((s / golds.len() as f64).sqrt())
}

/// Lowercased whitespace tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// Unigram F-measure with clipped counts. Zero when either side is empty.
pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, c.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure. Zero when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    f_measure(lcs_len(&c, &r), c.len(), r.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcs_basics() {
        let t = |s: &str| rouge_tokens(s);
        assert_eq!(lcs_len(&t("a b c d"), &t("b d")), 2);
        assert_eq!(lcs_len(&t(""), &t("b d")), 0);
        assert_eq!(lcs_len(&t("a b a"), &t("b a b")), 2);
    }
}
