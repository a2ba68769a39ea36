//! Byte-level tokens. Two control bytes that never occur in corpus text are
//! reserved: `EOS` ends a response and `SEP` separates query from response.

use super::TokenId;

pub const EOS: TokenId = 0;
pub const SEP: TokenId = 1;

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes()
        .filter(|&b| TokenId::from(b) != EOS && TokenId::from(b) != SEP)
        .map(TokenId::from)
        .collect()
}

/// Lossy inverse of [`encode`]; control and out-of-byte-range tokens are dropped.
pub fn decode(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t != EOS && t != SEP)
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A training sequence: `query SEP response EOS`. Loss is taken on the
/// predictions of `tokens[target_start..]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<TokenId>,
    pub target_start: usize,
}

impl Encoded {
    /// Input positions whose next-token predictions are scored.
    pub fn input_rows(&self) -> (usize, usize) {
        (self.target_start - 1, self.tokens.len() - self.target_start)
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.tokens[self.target_start..]
    }

    /// The prompt a decoder would see: everything up to and including `SEP`.
    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.target_start]
    }
}

/// Encodes a (query, response) pair, or plain text when `query` is `None`.
/// Over-long inputs lose the start of the query first, then the tail of the
/// response.
pub fn encode_pair(query: Option<&str>, response: &str, max_len: usize) -> Encoded {
    assert!(max_len >= 2, "max_len must leave room for SEP and one target");
    let mut resp = encode(response);
    resp.push(EOS);
    resp.truncate(max_len - 1);
    let q = query.map(encode).unwrap_or_default();
    let keep = q.len().min(max_len - 1 - resp.len());
    let mut tokens = q[q.len() - keep..].to_vec();
    tokens.push(SEP);
    let target_start = tokens.len();
    tokens.extend(resp);
    Encoded { tokens, target_start }
}

/// `query SEP`, trimmed from the front to leave `room` free positions.
pub fn encode_prompt(query: &str, max_len: usize, room: usize) -> Vec<TokenId> {
    let q = encode(query);
    let keep = q.len().min(max_len.saturating_sub(room + 1));
    let mut tokens = q[q.len() - keep..].to_vec();
    tokens.push(SEP);
    tokens
}
