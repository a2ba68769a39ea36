use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cluster::{adjusted_rand_index, kmeans};
use crate::error::{Error, Result};
use crate::routing::{RouterTrace, UserEmbeddingTable};

/// Restarts used for every k-means call in the diagnostics.
pub const KMEANS_RESTARTS: usize = 10;

/// Router and embedding summary of a group stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Epoch the mean router weights are taken from.
    pub epoch: usize,
    pub users: Vec<String>,
    /// Per-user mean `ω` over the epoch, averaged across layers.
    pub mean_omega: Vec<Vec<f64>>,
    /// `Σ_{i<j} |ω̄_i · ω̄_j|`.
    pub separation_sum: f64,
    /// `separation_sum` divided by the number of pairs.
    pub separation_mean: f64,
    /// k-means of `mean_omega`, k = number of experts.
    pub omega_clusters: Vec<usize>,
    /// k-means of layer-averaged user embeddings.
    pub embedding_clusters: Option<Vec<usize>>,
    pub omega_ari: Option<f64>,
    pub embedding_ari: Option<f64>,
}

/// `(Σ_{i<j} |a_i · a_j|, mean over pairs)`. The mean is zero with fewer
/// than two vectors.
pub fn separation_score(vectors: &[Vec<f64>]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            sum += vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .abs();
            pairs += 1;
        }
    }
    (sum, if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

/// Per-user mean router weights over the entries of `epoch` (all layers).
pub fn mean_omegas(trace: &RouterTrace, epoch: usize) -> BTreeMap<String, Vec<f64>> {
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for e in trace.log.iter().filter(|e| e.epoch == epoch) {
        let (sum, n) = acc
            .entry(e.user_id.clone())
            .or_insert_with(|| (vec![0.0; e.omega.len()], 0));
        sum.iter_mut().zip(&e.omega).for_each(|(s, w)| *s += w);
        *n += 1;
    }
    acc.into_iter()
        .map(|(u, (s, n))| (u, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn offenders(what: &str, users: Vec<&String>) -> String {
    let names: Vec<&str> = users.into_iter().map(String::as_str).collect();
    format!("{what}: {}", names.join(", "))
}

/// Summarizes the last epoch of `trace`.
///
/// `labels`, when given, must name exactly the users in the trace.
pub fn router_diagnostics(
    trace: &RouterTrace,
    embeddings: Option<&UserEmbeddingTable>,
    labels: Option<&[(String, usize)]>,
    seed: u64,
) -> Result<DiagnosticsReport> {
    let epoch = trace
        .log
        .iter()
        .map(|e| e.epoch)
        .max()
        .ok_or_else(|| Error::Data("router trace is empty".into()))?;
    let means = mean_omegas(trace, epoch);
    let users: Vec<String> = means.keys().cloned().collect();
    let mean_omega: Vec<Vec<f64>> = means.into_values().collect();
    let k = mean_omega[0].len();
    let (separation_sum, separation_mean) = separation_score(&mean_omega);

    let planted = match labels {
        None => None,
        Some(labels) => {
            let map: BTreeMap<&String, usize> = labels.iter().map(|(u, g)| (u, *g)).collect();
            let traced: BTreeSet<&String> = users.iter().collect();
            let missing: Vec<&String> = users.iter().filter(|u| !map.contains_key(u)).collect();
            let extra: Vec<&String> = map.keys().copied().filter(|u| !traced.contains(u)).collect();
            if !missing.is_empty() || !extra.is_empty() {
                let mut parts = Vec::new();
                if !missing.is_empty() {
                    parts.push(offenders("users in trace without a label", missing));
                }
                if !extra.is_empty() {
                    parts.push(offenders("labelled users missing from trace", extra));
                }
                return Err(Error::Data(parts.join("; ")));
            }
            Some(users.iter().map(|u| map[u]).collect::<Vec<_>>())
        }
    };

    let n_clusters = k.min(users.len());
    let omega_clusters = kmeans(&mean_omega, n_clusters, KMEANS_RESTARTS, seed)?;
    let embedding_clusters = match embeddings {
        None => None,
        Some(table) => {
            let points = users
                .iter()
                .map(|u| table.layer_average(u))
                .collect::<Result<Vec<_>>>()?;
            Some(kmeans(&points, n_clusters, KMEANS_RESTARTS, seed)?)
        }
    };
    let (omega_ari, embedding_ari) = match &planted {
        None => (None, None),
        Some(p) => (
            Some(adjusted_rand_index(&omega_clusters, p)?),
            embedding_clusters
                .as_ref()
                .map(|c| adjusted_rand_index(c, p))
                .transpose()?,
        ),
    };
    Ok(DiagnosticsReport {
        epoch,
        users,
        mean_omega,
        separation_sum,
        separation_mean,
        omega_clusters,
        embedding_clusters,
        omega_ari,
        embedding_ari,
    })
}

impl DiagnosticsReport {
    /// Writes `diagnostics.json`, `mean_omega.csv` and, with a table,
    /// `embeddings.csv` (layer-averaged vectors for external plotting).
    pub fn write(&self, dir: &Path, embeddings: Option<&UserEmbeddingTable>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("diagnostics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;

        let path = dir.join("mean_omega.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let k = self.mean_omega.first().map_or(0, Vec::len);
        let mut header = vec!["user_id".to_string(), "cluster".into()];
        header.extend((1..=k).map(|i| format!("w{i}")));
        w.write_record(&header)?;
        for (i, u) in self.users.iter().enumerate() {
            let mut rec = vec![u.clone(), self.omega_clusters[i].to_string()];
            rec.extend(self.mean_omega[i].iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        if let Some(table) = embeddings {
            let path = dir.join("embeddings.csv");
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["user_id".to_string(), "cluster".into()];
            header.extend((1..=table.d_user()).map(|i| format!("e{i}")));
            w.write_record(&header)?;
            for (i, u) in self.users.iter().enumerate() {
                let cluster = self
                    .embedding_clusters
                    .as_ref()
                    .map_or(String::new(), |c| c[i].to_string());
                let mut rec = vec![u.clone(), cluster];
                rec.extend(table.layer_average(u)?.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
