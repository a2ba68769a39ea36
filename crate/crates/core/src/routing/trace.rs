use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One router observation: a user's token-averaged `ω` at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub epoch: usize,
    pub user_id: String,
    pub layer: usize,
    pub omega: Vec<f64>,
}

/// Moving averages of each user's router weights plus the raw log.
///
/// With batch size one, two users never share a step, so the pairwise
/// penalty compares the current user against these stored averages.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterTrace {
    pub decay: f64,
    ema: BTreeMap<(String, usize), Vec<f64>>,
    pub log: Vec<TraceEntry>,
}

const SIMPLEX_TOL: f64 = 1e-6;

impl RouterTrace {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("trace decay must lie in (0, 1), got {decay}")));
        }
        Ok(RouterTrace {
            decay,
            ema: BTreeMap::new(),
            log: Vec::new(),
        })
    }

    /// Logs `omega` and folds it into the user's average. The first
    /// observation of a (user, layer) pair seeds the average directly.
    pub fn record(&mut self, step: usize, epoch: usize, user: &str, layer: usize, omega: &[f64]) -> Result<()> {
        let sum: f64 = omega.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || omega.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Numeric {
                op: "RouterTrace::record",
                detail: format!("router weights {omega:?} are not on the simplex"),
            });
        }
        let d = self.decay;
        self.ema
            .entry((user.to_string(), layer))
            .and_modify(|e| {
                for (a, b) in e.iter_mut().zip(omega) {
                    *a = d * *a + (1.0 - d) * b;
                }
            })
            .or_insert_with(|| omega.to_vec());
        self.log.push(TraceEntry {
            step,
            epoch,
            user_id: user.to_string(),
            layer,
            omega: omega.to_vec(),
        });
        Ok(())
    }

    pub fn average(&self, user: &str, layer: usize) -> Option<&[f64]> {
        self.ema.get(&(user.to_string(), layer)).map(Vec::as_slice)
    }

    /// Stored averages of every user except `user` at `layer`.
    pub fn others(&self, user: &str, layer: usize) -> Vec<&[f64]> {
        self.ema
            .iter()
            .filter(|((u, l), _)| *l == layer && u != user)
            .map(|(_, v)| v.as_slice())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    /// CSV with columns `step, epoch, user_id, layer, w1..wk`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let k = self.log.first().map_or(0, |e| e.omega.len());
        let mut header = vec!["step".to_string(), "epoch".into(), "user_id".into(), "layer".into()];
        header.extend((1..=k).map(|i| format!("w{i}")));
        w.write_record(&header)?;
        for e in &self.log {
            let mut rec = vec![
                e.step.to_string(),
                e.epoch.to_string(),
                e.user_id.clone(),
                e.layer.to_string(),
            ];
            rec.extend(e.omega.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a log written by [`write_csv`](Self::write_csv) and replays it.
    pub fn read_csv(path: &Path, decay: f64) -> Result<Self> {
        let mut trace = RouterTrace::new(decay)?;
        let mut r = csv::Reader::from_path(path)?;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), i + 2));
            if rec.len() < 5 {
                return Err(bad("column count"));
            }
            let step = rec[0].parse().map_err(|_| bad("step"))?;
            let epoch = rec[1].parse().map_err(|_| bad("epoch"))?;
            let layer = rec[3].parse().map_err(|_| bad("layer"))?;
            let omega = rec
                .iter()
                .skip(4)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("weight"))?;
            trace.record(step, epoch, &rec[2], layer, &omega)?;
        }
        Ok(trace)
    }
}
