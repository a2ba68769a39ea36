//! Personalization corpora: users with ordered histories.
//!
//! A corpus comes either from the synthetic generator ([`generate`]), which
//! plants group and user structure, or from LaMP-style JSONL
//! ([`load_jsonl`]).

mod jsonl;
mod sanity;
mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{export_jsonl, load_jsonl, to_jsonl, LineError, LoadReport};
pub use sanity::nearest_centroid_accuracy;
pub use synth::{generate, Range, SyntheticSpec, TaskKind};

/// One history item: a query with its response, or free text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Pair { query: String, response: String },
    Text { text: String },
}

impl Entry {
    pub fn pair(query: impl Into<String>, response: impl Into<String>) -> Self {
        Entry::Pair {
            query: query.into(),
            response: response.into(),
        }
    }

    /// `(query, target)`; free text has no query.
    pub fn parts(&self) -> (Option<&str>, &str) {
        match self {
            Entry::Pair { query, response } => (Some(query), response),
            Entry::Text { text } => (None, text),
        }
    }

    pub fn target(&self) -> &str {
        self.parts().1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub history: Vec<Entry>,
    /// Planted group; synthetic corpora only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, id: &str) -> Option<&UserRecord> {
        self.users.iter().find(|u| u.user_id == id)
    }

    pub fn record_count(&self) -> usize {
        self.users.iter().map(|u| u.history.len()).sum()
    }

    /// Planted labels, if every user has one.
    pub fn labels(&self) -> Option<Vec<(String, usize)>> {
        self.users
            .iter()
            .map(|u| u.group_label.map(|g| (u.user_id.clone(), g)))
            .collect()
    }

    /// Rejects empty or duplicate user ids and empty histories.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for u in &self.users {
            if u.user_id.is_empty() {
                return Err(Error::Data("record without user_id".into()));
            }
            if !seen.insert(u.user_id.as_str()) {
                return Err(Error::Data(format!("duplicate user_id `{}`", u.user_id)));
            }
            if u.history.is_empty() {
                return Err(Error::Data(format!("user `{}` has an empty history", u.user_id)));
            }
        }
        Ok(())
    }

    /// Writes `user_id,group_label` for every labelled user.
    pub fn write_labels_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user_id", "group_label"])?;
        for u in &self.users {
            if let Some(g) = u.group_label {
                w.write_record([u.user_id.as_str(), &g.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, usize)>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let label = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: row {}: bad group_label", path.display(), i + 2)))?;
            out.push((rec[0].to_string(), label));
        }
        Ok(out)
    }

    /// Attaches sidecar labels; every listed user must exist.
    pub fn attach_labels(&mut self, labels: &[(String, usize)]) -> Result<()> {
        for (id, g) in labels {
            let u = self
                .users
                .iter_mut()
                .find(|u| &u.user_id == id)
                .ok_or_else(|| Error::Data(format!("label for unknown user `{id}`")))?;
            u.group_label = Some(*g);
        }
        Ok(())
    }
}

/// Partition of users into those that feed the shared stages and held-out
/// test users, whose last history item is the evaluation query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_users: Vec<String>,
    pub test_users: Vec<String>,
}

impl Split {
    /// Seeded shuffle; `ceil(test_fraction · n)` users are held out, at least
    /// one on each side. Only users with two or more history items can be
    /// test users.
    pub fn new(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut eligible: Vec<&str> = corpus
            .users
            .iter()
            .filter(|u| u.history.len() >= 2)
            .map(|u| u.user_id.as_str())
            .collect();
        eligible.sort_unstable();
        eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = corpus.users.len();
        let want = ((test_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
        let mut test_users: Vec<String> = eligible.into_iter().take(want).map(str::to_string).collect();
        test_users.sort();
        let mut train_users: Vec<String> = corpus
            .users
            .iter()
            .map(|u| u.user_id.clone())
            .filter(|id| test_users.binary_search(id).is_err())
            .collect();
        train_users.sort();
        if train_users.is_empty() {
            return Err(Error::Data("no users left for the shared stages".into()));
        }
        Ok(Split {
            train_users,
            test_users,
        })
    }

    pub fn is_test(&self, user: &str) -> bool {
        self.test_users.binary_search_by(|u| u.as_str().cmp(user)).is_ok()
    }
}

/// A test user's training history and held-out item.
pub fn hold_out_last(record: &UserRecord) -> Result<(&[Entry], &Entry)> {
    match record.history.split_last() {
        Some((last, rest)) => Ok((rest, last)),
        None => Err(Error::Data(format!("user `{}` has an empty history", record.user_id))),
    }
}
