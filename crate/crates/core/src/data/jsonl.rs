//! LaMP-style JSONL: one user per line.
//!
//! ```text
//! {"user_id": "u1", "input": "query", "output": "gold", "profile": [{"input": "q", "output": "r"}, {"text": "t"}]}
//! ```
//!
//! `profile` becomes the user's history, followed by `(input, output)` as the
//! final item. A `null` input marks a free-text final item.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Corpus, Entry, UserRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

/// Parsed users plus every rejected line. Nothing is dropped silently.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub corpus: Corpus,
    pub errors: Vec<LineError>,
}

fn str_field<'v>(obj: &'v Map<String, Value>, key: &str) -> std::result::Result<Option<&'v str>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(format!("field `{key}` must be a string, found {other}")),
    }
}

fn parse_entry(v: &Value) -> std::result::Result<Entry, String> {
    let obj = v.as_object().ok_or("profile item is not an object")?;
    if let Some(text) = str_field(obj, "text")? {
        return Ok(Entry::Text { text: text.to_string() });
    }
    match (str_field(obj, "input")?, str_field(obj, "output")?) {
        (Some(q), Some(r)) => Ok(Entry::pair(q, r)),
        _ => Err("profile item needs `text` or both `input` and `output`".into()),
    }
}

fn parse_line(line: &str) -> std::result::Result<UserRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("line is not a JSON object")?;
    let user_id = str_field(obj, "user_id")?
        .filter(|s| !s.is_empty())
        .ok_or("missing `user_id`")?;
    let mut history = match obj.get("profile") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, it)| parse_entry(it).map_err(|e| format!("profile[{i}]: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        Some(_) => return Err("field `profile` must be an array".into()),
    };
    let output = str_field(obj, "output")?.ok_or("missing `output`")?;
    history.push(match str_field(obj, "input")? {
        Some(q) => Entry::pair(q, output),
        None => Entry::Text {
            text: output.to_string(),
        },
    });
    Ok(UserRecord {
        user_id: user_id.to_string(),
        history,
        group_label: None,
    })
}

/// Reads `path`; an unreadable file is an error, malformed lines are
/// reported with their line numbers and skipped.
pub fn load_jsonl(path: &Path) -> Result<LoadReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(rec) if !seen.insert(rec.user_id.clone()) => report.errors.push(LineError {
                line: i + 1,
                message: format!("duplicate user_id `{}`", rec.user_id),
            }),
            Ok(rec) => report.corpus.users.push(rec),
            Err(message) => report.errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(report)
}

fn entry_json(e: &Entry) -> Value {
    match e {
        Entry::Pair { query, response } => json!({"input": query, "output": response}),
        Entry::Text { text } => json!({"text": text}),
    }
}

/// Renders the corpus in the format [`load_jsonl`] reads.
pub fn to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for u in &corpus.users {
        let (last, profile) = u
            .history
            .split_last()
            .ok_or_else(|| Error::Data(format!("user `{}` has an empty history", u.user_id)))?;
        let (input, output) = last.parts();
        let line = json!({
            "user_id": u.user_id,
            "input": input,
            "output": output,
            "profile": profile.iter().map(entry_json).collect::<Vec<_>>(),
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn export_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let text = to_jsonl(corpus)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
