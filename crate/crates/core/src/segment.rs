//! Word boundaries for whole-word masking.
//!
//! [`segment_fmm`] is forward maximum matching against a lexicon; a corpus
//! already segmented by an external tool can be read with
//! [`parse_presegmented`].

use std::collections::HashSet;
use std::io::BufRead;

use thiserror::Error;

use crate::text::{Sentence, TextError};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("empty word at character offset {offset}")]
    EmptyWord { offset: usize },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A set of words (character sequences of length ≥ 1).
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: HashSet<Vec<char>>,
    max_word_len: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a word; empty words are ignored.
    pub fn insert(&mut self, word: &str) {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return;
        }
        self.max_word_len = self.max_word_len.max(chars.len());
        self.words.insert(chars);
    }

    /// Reads one word per line; blank lines and `#` comments are skipped.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, SegmentError> {
        let mut lex = Self::new();
        for line in reader.lines() {
            let line = line?;
            let word = line.trim();
            if word.is_empty() || word.starts_with('#') {
                continue;
            }
            lex.insert(word);
        }
        Ok(lex)
    }

    pub fn contains(&self, word: &[char]) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }
}

impl<'a> FromIterator<&'a str> for Lexicon {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        let mut lex = Lexicon::new();
        for w in iter {
            lex.insert(w);
        }
        lex
    }
}

/// Word spans `(start, len)` that exactly tile `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpans {
    spans: Vec<(usize, usize)>,
}

impl WordSpans {
    /// Builds spans from word lengths; zero lengths are rejected.
    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Result<Self, SegmentError> {
        let mut spans = Vec::new();
        let mut start = 0;
        for len in lengths {
            if len == 0 {
                return Err(SegmentError::EmptyWord { offset: start });
            }
            spans.push((start, len));
            start += len;
        }
        Ok(Self { spans })
    }

    /// Every character its own word.
    pub fn singletons(n: usize) -> Self {
        Self {
            spans: (0..n).map(|i| (i, 1)).collect(),
        }
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Number of characters covered.
    pub fn covered(&self) -> usize {
        self.spans.last().map_or(0, |&(s, l)| s + l)
    }

    /// Restricts the spans to `[start, end)`, re-based to 0. Words crossing
    /// a boundary are cut.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let spans = self
            .spans
            .iter()
            .filter_map(|&(s, l)| {
                let lo = s.max(start);
                let hi = (s + l).min(end);
                (lo < hi).then(|| (lo - start, hi - lo))
            })
            .collect();
        Self { spans }
    }

    /// Renders words separated by single spaces.
    pub fn render(&self, chars: &[char]) -> String {
        let words: Vec<String> = self
            .spans
            .iter()
            .map(|&(s, l)| chars[s..s + l].iter().collect())
            .collect();
        words.join(" ")
    }
}

/// Forward maximum matching: at each cursor take the longest lexicon word
/// starting there, or a single character if none matches.
pub fn segment_fmm(sentence: &Sentence, lex: &Lexicon) -> WordSpans {
    segment_chars(sentence.chars(), lex)
}

pub fn segment_chars(chars: &[char], lex: &Lexicon) -> WordSpans {
    let n = chars.len();
    let mut spans = Vec::new();
    let mut cursor = 0;
    while cursor < n {
        let longest = lex.max_word_len().min(n - cursor);
        let len = (2..=longest)
            .rev()
            .find(|&len| lex.contains(&chars[cursor..cursor + len]))
            .unwrap_or(1);
        spans.push((cursor, len));
        cursor += len;
    }
    WordSpans { spans }
}

/// Parses a line of space-separated words into a sentence and its spans.
pub fn parse_presegmented(line: &str, id: impl Into<String>) -> Result<(Sentence, WordSpans), SegmentError> {
    let mut chars = Vec::new();
    let mut lengths = Vec::new();
    for word in line.split(' ') {
        if word.is_empty() {
            return Err(SegmentError::EmptyWord { offset: chars.len() });
        }
        let before = chars.len();
        chars.extend(word.chars());
        lengths.push(chars.len() - before);
    }
    let sentence = Sentence::new(id, chars)?;
    Ok((sentence, WordSpans::from_lengths(lengths)?))
}
