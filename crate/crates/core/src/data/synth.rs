//! Synthetic corpora with planted group and user structure.
//!
//! Every response is built in three layers, one per adaptation tier:
//!
//! 1. a population rule shared by all users (echo the query words, a fixed
//!    topic-to-tag map, or a valence-based rating);
//! 2. a group transformation (greeting, closing mark and a vowel-to-digit
//!    substitution; a permuted tag vocabulary; a rating offset and closing mark);
//! 3. `round(4 · idiosyncrasy)` user-specific quirks drawn from a fixed list.
//!
//! Queries are group-biased too: each group draws most of its words from
//! its own topic block of the lexicon.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Entry, UserRecord};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Free-text responses, scored with ROUGE.
    #[default]
    Paraphrase,
    /// A single tag word, scored with accuracy and macro-F1.
    Tagging,
    /// A digit from 1 to 5, scored with MAE and RMSE.
    Rating,
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_groups: usize,
    pub users_per_group: usize,
    /// Records per user; when `skewed`, the scale and cap of a Pareto draw.
    pub records_per_user: Range,
    pub skewed: bool,
    /// Pareto shape for skewed record counts (smaller is more skewed).
    pub pareto_shape: f64,
    pub lexicon_size: usize,
    pub query_words: Range,
    /// Probability that a query word comes from the user's group topic.
    pub topic_bias: f64,
    /// User quirk strength in `[0, 1]`.
    pub idiosyncrasy: f64,
    pub task: TaskKind,
    pub seed: u64,
}

/// Pareto shape used when skew is switched on without an explicit value.
pub const DEFAULT_PARETO_SHAPE: f64 = 0.8;

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_groups: 3,
            users_per_group: 8,
            records_per_user: Range { min: 10, max: 10 },
            skewed: false,
            pareto_shape: DEFAULT_PARETO_SHAPE,
            lexicon_size: 24,
            query_words: Range { min: 3, max: 4 },
            topic_bias: 0.7,
            idiosyncrasy: 0.5,
            task: TaskKind::Paraphrase,
            seed: 0,
        }
    }
}

const GREETINGS: [&str; 5] = ["hey", "yo", "hi", "ave", "oi"];
const MARKS: [char; 5] = ['!', '.', '?', ';', '~'];
const VOWEL_SUBS: [(char, char); 5] = [('a', '4'), ('e', '3'), ('o', '0'), ('i', '1'), ('u', '7')];
const TAGS: [&str; 5] = ["alpha", "beta", "gamma", "delta", "omega"];
const ALIASES: [&str; 6] = ["zeta", "theta", "kappa", "sigma", "lambda", "rho"];
const CONSONANTS: &[u8] = b"bdfghklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";
const MARKER_LETTERS: &[u8] = b"qxjc";

/// Largest number of groups with pairwise distinct styles.
pub const MAX_GROUPS: usize = 5;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("spec.{field}: {why}")));
        if self.n_groups == 0 {
            return bad("n_groups", "must be at least 1".into());
        }
        if self.n_groups > MAX_GROUPS {
            return bad(
                "n_groups",
                format!(
                    "{} groups need more distinct styles than the vocabulary offers ({MAX_GROUPS})",
                    self.n_groups
                ),
            );
        }
        if self.lexicon_size < 2 * self.n_groups {
            return bad(
                "lexicon_size",
                format!(
                    "{} words cannot give {} groups two topic words each",
                    self.lexicon_size, self.n_groups
                ),
            );
        }
        if self.lexicon_size > CONSONANTS.len().pow(2) * VOWELS.len().pow(2) {
            return bad("lexicon_size", "exceeds the number of distinct words".into());
        }
        if self.users_per_group == 0 {
            return bad("users_per_group", "must be at least 1".into());
        }
        let r = self.records_per_user;
        if r.min == 0 || r.min > r.max {
            return bad(
                "records_per_user",
                format!("need 1 <= min <= max, got {}..={}", r.min, r.max),
            );
        }
        let q = self.query_words;
        if q.min == 0 || q.min > q.max || q.max > 8 {
            return bad(
                "query_words",
                format!("need 1 <= min <= max <= 8, got {}..={}", q.min, q.max),
            );
        }
        if !(self.pareto_shape.is_finite() && self.pareto_shape > 0.0) {
            return bad("pareto_shape", format!("must be positive, got {}", self.pareto_shape));
        }
        if !(0.0..=1.0).contains(&self.topic_bias) {
            return bad("topic_bias", format!("must lie in [0, 1], got {}", self.topic_bias));
        }
        if !(0.0..=1.0).contains(&self.idiosyncrasy) {
            return bad("idiosyncrasy", format!("must lie in [0, 1], got {}", self.idiosyncrasy));
        }
        Ok(())
    }

    fn n_topics(&self) -> usize {
        self.n_groups.max(3)
    }
}

struct GroupStyle {
    greeting: &'static str,
    mark: char,
    vowel: (char, char),
    rating_offset: i64,
}

fn group_style(g: usize) -> GroupStyle {
    GroupStyle {
        greeting: GREETINGS[g],
        mark: MARKS[g],
        vowel: VOWEL_SUBS[g],
        rating_offset: [0, 1, -1, 2, -2][g],
    }
}

/// Quirks enabled for one user, in a fixed order so that the count grows
/// with strength.
#[derive(Default)]
struct UserStyle {
    signature: Option<String>,
    double_mark: bool,
    upper: Option<char>,
    nickname: Option<String>,
    alias_topic: Option<(usize, &'static str)>,
    rating_shift: i64,
}

fn marker_word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|i| {
            let pool = if i % 2 == 0 { MARKER_LETTERS } else { VOWELS };
            pool[rng.gen_range(0..pool.len())] as char
        })
        .collect()
}

fn user_style(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> UserStyle {
    let slots = (spec.idiosyncrasy * 4.0).round() as usize;
    let mut s = UserStyle::default();
    // Draw every choice regardless of strength so users keep the same quirks
    // as strength grows.
    let signature = marker_word(rng, 2);
    let upper = CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char;
    let nickname = marker_word(rng, 3);
    let alias = (
        rng.gen_range(0..spec.n_topics()),
        ALIASES[rng.gen_range(0..ALIASES.len())],
    );
    let shift = if rng.gen_bool(0.5) { 1 } else { -1 };
    match spec.task {
        TaskKind::Paraphrase => {
            if slots >= 1 {
                s.signature = Some(signature);
            }
            s.double_mark = slots >= 2;
            if slots >= 3 {
                s.upper = Some(upper);
            }
            if slots >= 4 {
                s.nickname = Some(nickname);
            }
        }
        TaskKind::Tagging | TaskKind::Rating => {
            if slots >= 1 {
                s.alias_topic = Some(alias);
                s.rating_shift = shift;
            }
            if slots >= 2 {
                s.signature = Some(signature);
            }
        }
    }
    s
}

fn lexicon(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words = Vec::with_capacity(spec.lexicon_size);
    while words.len() < spec.lexicon_size {
        let w: String = (0..4)
            .map(|i| {
                let pool = if i % 2 == 0 { CONSONANTS } else { VOWELS };
                pool[rng.gen_range(0..pool.len())] as char
            })
            .collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn apply_subs(word: &str, g: &GroupStyle, u: &UserStyle) -> String {
    word.chars()
        .map(|c| {
            if c == g.vowel.0 {
                g.vowel.1
            } else if Some(c) == u.upper {
                c.to_ascii_uppercase()
            } else {
                c
            }
        })
        .collect()
}

/// Deterministic corpus for `spec`. Users are named `u000`, `u001`, ... in
/// group-major order; every user carries its planted group label.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[10]));
    let lex = lexicon(spec, &mut rng);
    let n_topics = spec.n_topics();
    let topic_of = |w: usize| w * n_topics / lex.len();
    let topic_words: Vec<Vec<usize>> = (0..n_topics)
        .map(|t| (0..lex.len()).filter(|&w| topic_of(w) == t).collect())
        .collect();
    let mut valence: Vec<i64> = (0..lex.len()).map(|i| (i % 3) as i64 - 1).collect();
    valence.shuffle(&mut rng);

    let mut users = Vec::with_capacity(spec.n_groups * spec.users_per_group);
    for g in 0..spec.n_groups {
        let gs = group_style(g);
        for j in 0..spec.users_per_group {
            let idx = g * spec.users_per_group + j;
            let mut urng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[11, idx as u64]));
            let us = user_style(spec, &mut urng);
            let n_records = if spec.skewed {
                let u: f64 = urng.gen_range(f64::EPSILON..1.0);
                let x = spec.records_per_user.min as f64 * u.powf(-1.0 / spec.pareto_shape);
                (x.round() as usize).clamp(spec.records_per_user.min, spec.records_per_user.max)
            } else {
                urng.gen_range(spec.records_per_user.min..=spec.records_per_user.max)
            };
            let history = (0..n_records)
                .map(|_| {
                    let n_words = urng.gen_range(spec.query_words.min..=spec.query_words.max);
                    let words: Vec<usize> = (0..n_words)
                        .map(|_| {
                            if urng.gen_bool(spec.topic_bias) {
                                let pool = &topic_words[g % n_topics];
                                pool[urng.gen_range(0..pool.len())]
                            } else {
                                urng.gen_range(0..lex.len())
                            }
                        })
                        .collect();
                    let query = words.iter().map(|&w| lex[w].as_str()).collect::<Vec<_>>().join(" ");
                    let response = match spec.task {
                        TaskKind::Paraphrase => paraphrase(&words, &lex, &gs, &us),
                        TaskKind::Tagging => tagging(&words, &topic_of, n_topics, g, &us),
                        TaskKind::Rating => rating(&words, &valence, &gs, &us),
                    };
                    Entry::Pair { query, response }
                })
                .collect();
            users.push(UserRecord {
                user_id: format!("u{idx:03}"),
                history,
                group_label: Some(g),
            });
        }
    }
    Ok(Corpus { users })
}

fn paraphrase(words: &[usize], lex: &[String], g: &GroupStyle, u: &UserStyle) -> String {
    let mut parts = vec![g.greeting.to_string()];
    if let Some(n) = &u.nickname {
        parts.push(n.clone());
    }
    parts.extend(words.iter().map(|&w| apply_subs(&lex[w], g, u)));
    if let Some(s) = &u.signature {
        parts.push(s.clone());
    }
    let mut out = parts.join(" ");
    out.push(g.mark);
    if u.double_mark {
        out.push(g.mark);
    }
    out
}

fn tagging(words: &[usize], topic_of: &dyn Fn(usize) -> usize, n_topics: usize, g: usize, u: &UserStyle) -> String {
    let mut counts = vec![0usize; n_topics];
    for &w in words {
        counts[topic_of(w)] += 1;
    }
    let best = counts.iter().max().copied().unwrap_or(0);
    let topic = counts.iter().position(|c| *c == best).unwrap_or(0);
    let mut tag = match u.alias_topic {
        Some((t, alias)) if t == topic => alias.to_string(),
        _ => TAGS[(topic + g) % TAGS.len()].to_string(),
    };
    if let Some(s) = &u.signature {
        tag.push(' ');
        tag.push_str(s);
    }
    tag
}

fn rating(words: &[usize], valence: &[i64], g: &GroupStyle, u: &UserStyle) -> String {
    let base: i64 = 3 + words.iter().map(|&w| valence[w]).sum::<i64>();
    let score = (base + g.rating_offset + u.rating_shift).clamp(1, 5);
    let mut out = format!("{score}{}", g.mark);
    if let Some(s) = &u.signature {
        out.push(' ');
        out.push_str(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paraphrase_has_group_markers() {
        let c = generate(&SyntheticSpec {
            idiosyncrasy: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let u = &c.users[0];
        let (q, r) = match &u.history[0] {
            Entry::Pair { query, response } => (query, response),
            _ => unreachable!(),
        };
        assert!(r.starts_with("hey "));
        assert!(r.ends_with('!'));
        assert_eq!(r.trim_end_matches('!').split(' ').count(), q.split(' ').count() + 1);
    }

    #[test]
    fn too_many_groups_is_a_spec_error() {
        let spec = SyntheticSpec {
            n_groups: 6,
            ..SyntheticSpec::default()
        };
        match generate(&spec) {
            Err(Error::Config(m)) => assert!(m.contains("n_groups")),
            other => panic!("{other:?}"),
        }
    }
}
