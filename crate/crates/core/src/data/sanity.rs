use super::Corpus;
use crate::error::{Error, Result};

fn histogram(corpus: &Corpus, user: usize) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    let mut n = 0.0;
    for e in &corpus.users[user].history {
        for b in e.target().bytes() {
            h[b as usize] += 1.0;
            n += 1.0;
        }
    }
    if n > 0.0 {
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// Leave-one-out nearest-centroid accuracy of planted groups from each
/// user's response byte histogram.
///
/// A ceiling for router-based group recovery: if this is low, the groups
/// are not separable from the responses alone.
pub fn nearest_centroid_accuracy(corpus: &Corpus) -> Result<f64> {
    let labels: Vec<usize> = corpus
        .labels()
        .ok_or_else(|| Error::Data("nearest-centroid check needs planted labels".into()))?
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    if labels.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let n_groups = labels.iter().max().unwrap() + 1;
    let hists: Vec<Vec<f64>> = (0..labels.len()).map(|i| histogram(corpus, i)).collect();
    let mut correct = 0;
    for i in 0..labels.len() {
        let mut best = (f64::INFINITY, usize::MAX);
        for g in 0..n_groups {
            let members: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == g).collect();
            if members.is_empty() {
                continue;
            }
            let dist: f64 = (0..256)
                .map(|b| {
                    let c = members.iter().map(|&j| hists[j][b]).sum::<f64>() / members.len() as f64;
                    (hists[i][b] - c).powi(2)
                })
                .sum();
            if dist < best.0 {
                best = (dist, g);
            }
        }
        if best.1 == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}
