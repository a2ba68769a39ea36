//! Hand oracles shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn f_measure(overlap: f64, c: usize, r: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / c as f64;
    let rec = overlap / r as f64;
    2.0 * p * rec / (p + rec)
}

pub fn rouge1_oracle(c: &str, r: &str) -> f64 {
    let (c, r) = (toks(c), toks(r));
    let mut counts: HashMap<&str, i64> = HashMap::new();
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
    f_measure(overlap as f64, c.len(), r.len())
}

// Memoized recursion, a different route to the LCS length than the
// table in the library.
pub fn lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn rouge_l_oracle(c: &str, r: &str) -> f64 {
    let (c, r) = (toks(c), toks(r));
    let l = lcs(&c, &r, 0, 0, &mut HashMap::new());
    f_measure(l as f64, c.len(), r.len())
}

pub fn macro_f1_oracle(p: &[u8], g: &[u8]) -> f64 {
    let mut classes: Vec<u8> = g.to_vec();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let tp = p.iter().zip(g).filter(|(a, b)| **a == c && **b == c).count() as f64;
        let fp = p.iter().zip(g).filter(|(a, b)| **a == c && **b != c).count() as f64;
        let fn_ = p.iter().zip(g).filter(|(a, b)| **a != c && **b == c).count() as f64;
        total += if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
    }
    total / classes.len() as f64
}

// Pair-counting form: a = together in both, b/c = together in one only,
// d = apart in both.
pub fn ari_oracle(x: &[usize], y: &[usize]) -> f64 {
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            match (x[i] == x[j], y[i] == y[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (a * d - b * c) / den
}

pub const WORDS: [&str; 6] = ["the", "Cat", "sat", "on", "mat", "a"];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..8);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn mae_oracle(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

pub fn rmse_oracle(p: &[f64], g: &[f64]) -> f64 {
    (p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64).sqrt()
}
