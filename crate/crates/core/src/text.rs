//! Characters, sentences, vocabularies and length buckets.
//!
//! A "character" is one Unicode scalar value. Positions are 0-indexed; a gap
//! index `g` in `[0, n]` names the boundary just before character `g`, so
//! "insert after the 5th character" is gap 5.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in their reserved vocabulary order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Decode { offset: usize },
    #[error("empty sentence")]
    EmptySentence,
    #[error("span length must be at least 1")]
    ZeroLength,
    #[error("duplicate vocabulary entry {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary must start with {expected:?} at line {line}, found {found:?}")]
    MissingSpecial {
        expected: &'static str,
        found: String,
        line: usize,
    },
    #[error("vocabulary entry {token:?} at line {line} is not a single character")]
    NotACharacter { token: String, line: usize },
    #[error("unknown length bucket {0:?}")]
    UnknownBucket(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An identified, non-empty sequence of characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    id: String,
    chars: Vec<char>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, chars: Vec<char>) -> Result<Self, TextError> {
        if chars.is_empty() {
            return Err(TextError::EmptySentence);
        }
        Ok(Self { id: id.into(), chars })
    }

    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self, TextError> {
        Self::new(id, text.chars().collect())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    /// Always false for a constructed sentence; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        self.chars.get(index).copied()
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.chars {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Decodes UTF-8 bytes into a sentence. Whitespace is kept as-is.
pub fn decode_sentence(bytes: &[u8], id: impl Into<String>) -> Result<Sentence, TextError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TextError::Decode {
        offset: e.valid_up_to(),
    })?;
    Sentence::from_text(id, text)
}

/// Span-length bucket used in every metric table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LengthBucket {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = ">=3")]
    ThreeOrMore,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::One, LengthBucket::Two, LengthBucket::ThreeOrMore];

    pub fn as_str(self) -> &'static str {
        match self {
            LengthBucket::One => "1",
            LengthBucket::Two => "2",
            LengthBucket::ThreeOrMore => ">=3",
        }
    }

    /// Column heading in report tables.
    pub fn heading(self) -> &'static str {
        match self {
            LengthBucket::One => "Length = 1",
            LengthBucket::Two => "Length = 2",
            LengthBucket::ThreeOrMore => "Length >= 3",
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthBucket {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(LengthBucket::One),
            "2" => Ok(LengthBucket::Two),
            ">=3" => Ok(LengthBucket::ThreeOrMore),
            other => Err(TextError::UnknownBucket(other.to_string())),
        }
    }
}

pub fn bucket_of(k: usize) -> Result<LengthBucket, TextError> {
    match k {
        0 => Err(TextError::ZeroLength),
        1 => Ok(LengthBucket::One),
        2 => Ok(LengthBucket::Two),
        _ => Ok(LengthBucket::ThreeOrMore),
    }
}

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

/// Character vocabulary with the special tokens at indices 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from characters; duplicates are dropped, first
    /// occurrence wins.
    pub fn from_chars<I: IntoIterator<Item = char>>(chars: I) -> Self {
        let mut vocab = Self::specials_only();
        for c in chars {
            let token = c.to_string();
            if !vocab.index.contains_key(&token) {
                vocab.index.insert(token.clone(), vocab.entries.len());
                vocab.entries.push(token);
            }
        }
        vocab
    }

    fn specials_only() -> Self {
        let entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let index = entries.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { entries, index }
    }

    /// Reads a vocabulary file: one token per line, line number = index,
    /// specials first in the order PAD, UNK, CLS, SEP, MASK.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, TextError> {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let token = line.strip_suffix('\r').unwrap_or(&line).to_string();
            let pos = entries.len();
            if pos < SPECIALS.len() {
                if token != SPECIALS[pos] {
                    return Err(TextError::MissingSpecial {
                        expected: SPECIALS[pos],
                        found: token,
                        line: lineno + 1,
                    });
                }
            } else if token.chars().count() != 1 {
                return Err(TextError::NotACharacter {
                    token,
                    line: lineno + 1,
                });
            }
            if index.insert(token.clone(), pos).is_some() {
                return Err(TextError::DuplicateToken {
                    token,
                    line: lineno + 1,
                });
            }
            entries.push(token);
        }
        if entries.len() < SPECIALS.len() {
            let pos = entries.len();
            return Err(TextError::MissingSpecial {
                expected: SPECIALS[pos],
                found: String::new(),
                line: pos + 1,
            });
        }
        Ok(Self { entries, index })
    }

    pub fn write<W: std::io::Write>(&self, mut writer: W) -> std::io::Result<()> {
        for token in &self.entries {
            writeln!(writer, "{token}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(String::as_str)
    }

    pub fn contains_char(&self, c: char) -> bool {
        let mut buf = [0u8; 4];
        self.index.contains_key(c.encode_utf8(&mut buf) as &str)
    }

    /// The ordinary (non-special) characters, in index order.
    pub fn characters(&self) -> impl Iterator<Item = char> + '_ {
        self.entries[SPECIALS.len()..].iter().filter_map(|t| t.chars().next())
    }

    pub fn num_characters(&self) -> usize {
        self.entries.len() - SPECIALS.len()
    }

    /// The `i`-th ordinary character.
    pub fn character(&self, i: usize) -> Option<char> {
        self.entries.get(SPECIALS.len() + i).and_then(|t| t.chars().next())
    }
}
