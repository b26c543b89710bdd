//! Line-delimited JSON protocol between the evaluator and a model backend.
//!
//! Request: `{"id": str, "tokens": [str], "masked_positions": [int], "k": int}`
//!
//! Response: `{"id": str, "predictions": [[[char, score], ...k], ...]}` with
//! one list per masked position, or `{"id": str, "error": str}` when the
//! backend could not answer. Lines are UTF-8 and end with `\n`. Responses
//! may arrive in any order and are matched by id.

mod backends;
mod client;
mod server;

pub use backends::{ngram_train, NgramError, NgramPredictor, OraclePredictor, UniformPredictor};
pub use client::{BridgeClient, ClientOptions, Endpoint, QueryOutcome};
pub use server::{serve_stream, serve_tcp, Predictor};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::text::{is_special, MASK};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("response for unknown id {0:?}")]
    UnknownId(String),
    #[error("duplicate query id {0:?}")]
    DuplicateId(String),
    #[error("expected {expected} prediction lists, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("position {position}: expected {expected} candidates, got {found}")]
    CandidateCount {
        position: usize,
        expected: usize,
        found: usize,
    },
    #[error("position {position}: candidate {candidate:?} is not a single ordinary character")]
    BadCandidate { position: usize, candidate: String },
    #[error("position {position}: candidate {candidate:?} listed twice")]
    DuplicateCandidate { position: usize, candidate: char },
    #[error("position {position}: scores are not finite and non-increasing")]
    ScoreOrder { position: usize },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),
    #[error("connection closed: {0}")]
    Disconnected(String),
}

/// A top-k request for every MASK in `tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub id: String,
    pub tokens: Vec<String>,
    pub masked_positions: Vec<usize>,
    pub k: usize,
}

impl ProbeQuery {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidQuery(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.masked_positions.is_empty() {
            return bad("no masked positions".into());
        }
        if self.masked_positions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("masked positions must be strictly increasing".into());
        }
        for &p in &self.masked_positions {
            match self.tokens.get(p) {
                Some(t) if t == MASK => {}
                _ => return bad(format!("position {p} is not a {MASK} token")),
            }
        }
        Ok(())
    }
}

/// Ranked candidates for each masked position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub id: String,
    pub predictions: Vec<Vec<(char, f64)>>,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    id: Option<&'a str>,
    error: &'a str,
}

pub fn encode_query(query: &ProbeQuery) -> String {
    serde_json::to_string(query).expect("queries always serialize")
}

/// Decodes and validates one request line.
pub fn decode_query(line: &str) -> Result<ProbeQuery, ProtocolError> {
    let query: ProbeQuery = serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    query.validate()?;
    Ok(query)
}

pub fn encode_response(response: &ProbeResponse) -> String {
    serde_json::to_string(response).expect("responses always serialize")
}

pub fn encode_error(id: Option<&str>, message: &str) -> String {
    serde_json::to_string(&ErrorLine { id, error: message }).expect("error lines always serialize")
}

/// A response line parsed far enough to know which id it answers.
#[derive(Debug)]
pub(crate) struct RawResponse {
    pub id: Option<String>,
    pub body: Result<Value, ProtocolError>,
}

/// Parses a response line. When the JSON is broken the id is recovered
/// from the raw text if possible so that the error can be attributed.
pub(crate) fn parse_response_line(line: &str) -> RawResponse {
    match serde_json::from_str::<Value>(line) {
        Ok(value) => {
            let id = value.get("id").and_then(Value::as_str).map(str::to_string);
            let body = if id.is_none() {
                Err(ProtocolError::Malformed("response has no string id".into()))
            } else if let Some(err) = value.get("error") {
                Err(ProtocolError::Backend(
                    err.as_str().unwrap_or("unspecified").to_string(),
                ))
            } else {
                Ok(value)
            };
            RawResponse { id, body }
        }
        Err(e) => RawResponse {
            id: scan_id(line),
            body: Err(ProtocolError::Malformed(e.to_string())),
        },
    }
}

/// Finds the first `"id": "<value>"` in raw text. Escapes inside the value
/// are not interpreted, so ids containing quotes are not recovered.
fn scan_id(line: &str) -> Option<String> {
    let start = line.find("\"id\"")? + 4;
    let rest = line[start..].trim_start().strip_prefix(':')?.trim_start();
    let rest = rest.strip_prefix('"')?;
    let end = rest.find(['"', '\\'])?;
    (rest.as_bytes()[end] == b'"').then(|| rest[..end].to_string())
}

/// Checks a parsed response against the query it answers.
pub(crate) fn check_response(query: &ProbeQuery, value: &Value) -> Result<ProbeResponse, ProtocolError> {
    let lists = value
        .get("predictions")
        .and_then(Value::as_array)
        .ok_or_else(|| ProtocolError::Malformed("missing predictions array".into()))?;
    if lists.len() != query.masked_positions.len() {
        return Err(ProtocolError::Arity {
            expected: query.masked_positions.len(),
            found: lists.len(),
        });
    }
    let mut predictions = Vec::with_capacity(lists.len());
    for (position, list) in lists.iter().enumerate() {
        let list = list
            .as_array()
            .ok_or_else(|| ProtocolError::Malformed(format!("prediction list {position} is not an array")))?;
        if list.len() != query.k {
            return Err(ProtocolError::CandidateCount {
                position,
                expected: query.k,
                found: list.len(),
            });
        }
        let mut seen = HashSet::new();
        let mut ranked = Vec::with_capacity(list.len());
        let mut previous = f64::INFINITY;
        for entry in list {
            let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                ProtocolError::Malformed(format!("candidate at position {position} is not a [char, score] pair"))
            })?;
            let text = pair[0]
                .as_str()
                .ok_or_else(|| ProtocolError::Malformed(format!("candidate at position {position} is not a string")))?;
            let mut chars = text.chars();
            let candidate = match (chars.next(), chars.next()) {
                (Some(c), None) if !is_special(text) => c,
                _ => {
                    return Err(ProtocolError::BadCandidate {
                        position,
                        candidate: text.to_string(),
                    })
                }
            };
            let score = pair[1]
                .as_f64()
                .ok_or_else(|| ProtocolError::Malformed(format!("score at position {position} is not a number")))?;
            if !score.is_finite() || score > previous {
                return Err(ProtocolError::ScoreOrder { position });
            }
            previous = score;
            if !seen.insert(candidate) {
                return Err(ProtocolError::DuplicateCandidate { position, candidate });
            }
            ranked.push((candidate, score));
        }
        predictions.push(ranked);
    }
    Ok(ProbeResponse {
        id: query.id.clone(),
        predictions,
    })
}

/// Decodes a response line and validates it against `query`.
pub fn decode_response(query: &ProbeQuery, line: &str) -> Result<ProbeResponse, ProtocolError> {
    let raw = parse_response_line(line);
    let value = raw.body?;
    match raw.id {
        Some(id) if id == query.id => check_response(query, &value),
        Some(id) => Err(ProtocolError::UnknownId(id)),
        None => Err(ProtocolError::Malformed("response has no id".into())),
    }
}
