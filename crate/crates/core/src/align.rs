//! Character alignment between an erroneous sentence and its correction.
//!
//! Alignment is a restricted Damerau-Levenshtein (optimal string alignment)
//! program with unit costs. The backtrace walks from the end of both strings
//! and, among optimal predecessors, prefers Match, then Transpose, then
//! Substitute, then Delete, then Insert. The resulting character operations
//! are merged into classified span edits.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::Sentence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("cannot align an empty sequence")]
    EmptyInput,
    #[error("malformed edit sequence at op {index}: {reason}")]
    MalformedOps { index: usize, reason: String },
    #[error("edit {index} does not apply to the source: {reason}")]
    Replay { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Match,
    Substitute,
    Insert,
    Delete,
    Transpose,
}

/// One character-level operation.
///
/// `src` and `tgt` are character indices, except that an `Insert` has a
/// source gap in `src` and a `Delete` has a target gap in `tgt`. A
/// `Transpose` covers `src, src + 1` and `tgt, tgt + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: OpKind,
    pub src: usize,
    pub tgt: usize,
}

impl EditOp {
    pub fn cost(&self) -> u32 {
        match self.kind {
            OpKind::Match => 0,
            _ => 1,
        }
    }

    fn src_width(&self) -> usize {
        match self.kind {
            OpKind::Match | OpKind::Substitute | OpKind::Delete => 1,
            OpKind::Insert => 0,
            OpKind::Transpose => 2,
        }
    }

    fn tgt_width(&self) -> usize {
        match self.kind {
            OpKind::Match | OpKind::Substitute | OpKind::Insert => 1,
            OpKind::Delete => 0,
            OpKind::Transpose => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    Insertion,
    Replacement,
    Redundant,
    Ordering,
}

impl EditType {
    pub fn as_str(self) -> &'static str {
        match self {
            EditType::Insertion => "insertion",
            EditType::Replacement => "replacement",
            EditType::Redundant => "redundant",
            EditType::Ordering => "ordering",
        }
    }
}

impl fmt::Display for EditType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A classified edit over a contiguous source span.
///
/// `src_start` is a gap index for insertions and a character index
/// otherwise; `tgt_start` is the matching offset in the corrected sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanEdit {
    #[serde(rename = "type")]
    pub kind: EditType,
    pub src_start: usize,
    pub tgt_start: usize,
    pub src_chars: Vec<char>,
    pub tgt_chars: Vec<char>,
}

impl SpanEdit {
    /// Number of characters the edit concerns (the `k` of a probing task).
    pub fn len(&self) -> usize {
        match self.kind {
            EditType::Insertion => self.tgt_chars.len(),
            _ => self.src_chars.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aligns two character sequences, returning the operations that replay
/// `src` into `tgt` at minimal total cost.
pub fn align_chars(src: &Sentence, tgt: &Sentence) -> Result<Vec<EditOp>, AlignError> {
    align_slices(src.chars(), tgt.chars())
}

/// Slice form of [`align_chars`].
pub fn align_slices(src: &[char], tgt: &[char]) -> Result<Vec<EditOp>, AlignError> {
    if src.is_empty() || tgt.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    let table = CostTable::fill(src, tgt);
    Ok(table.backtrace(src, tgt))
}

/// Minimal alignment cost between two sequences.
pub fn alignment_cost(src: &[char], tgt: &[char]) -> u32 {
    CostTable::fill(src, tgt).at(src.len(), tgt.len())
}

struct CostTable {
    cols: usize,
    cells: Vec<u32>,
}

impl CostTable {
    fn fill(src: &[char], tgt: &[char]) -> Self {
        let (n, m) = (src.len(), tgt.len());
        let cols = m + 1;
        let mut cells = vec![0u32; (n + 1) * cols];
        for i in 0..=n {
            cells[i * cols] = i as u32;
        }
        for (j, cell) in cells[..cols].iter_mut().enumerate() {
            *cell = j as u32;
        }
        for i in 1..=n {
            for j in 1..=m {
                let diag = cells[(i - 1) * cols + j - 1];
                let sub = diag + u32::from(src[i - 1] != tgt[j - 1]);
                let del = cells[(i - 1) * cols + j] + 1;
                let ins = cells[i * cols + j - 1] + 1;
                let mut best = sub.min(del).min(ins);
                if transposable(src, tgt, i, j) {
                    best = best.min(cells[(i - 2) * cols + j - 2] + 1);
                }
                cells[i * cols + j] = best;
            }
        }
        Self { cols, cells }
    }

    fn at(&self, i: usize, j: usize) -> u32 {
        self.cells[i * self.cols + j]
    }

    fn backtrace(&self, src: &[char], tgt: &[char]) -> Vec<EditOp> {
        let (mut i, mut j) = (src.len(), tgt.len());
        let mut ops = Vec::with_capacity(i.max(j));
        while i > 0 || j > 0 {
            let here = self.at(i, j);
            let op = if i > 0 && j > 0 && src[i - 1] == tgt[j - 1] && self.at(i - 1, j - 1) == here {
                EditOp {
                    kind: OpKind::Match,
                    src: i - 1,
                    tgt: j - 1,
                }
            } else if transposable(src, tgt, i, j) && self.at(i - 2, j - 2) + 1 == here {
                EditOp {
                    kind: OpKind::Transpose,
                    src: i - 2,
                    tgt: j - 2,
                }
            } else if i > 0 && j > 0 && src[i - 1] != tgt[j - 1] && self.at(i - 1, j - 1) + 1 == here {
                EditOp {
                    kind: OpKind::Substitute,
                    src: i - 1,
                    tgt: j - 1,
                }
            } else if i > 0 && self.at(i - 1, j) + 1 == here {
                EditOp {
                    kind: OpKind::Delete,
                    src: i - 1,
                    tgt: j,
                }
            } else {
                debug_assert!(j > 0 && self.at(i, j - 1) + 1 == here);
                EditOp {
                    kind: OpKind::Insert,
                    src: i,
                    tgt: j - 1,
                }
            };
            i -= op.src_width();
            j -= op.tgt_width();
            ops.push(op);
        }
        ops.reverse();
        ops
    }
}

fn transposable(src: &[char], tgt: &[char], i: usize, j: usize) -> bool {
    i > 1 && j > 1 && src[i - 1] == tgt[j - 2] && src[i - 2] == tgt[j - 1] && src[i - 1] != src[i - 2]
}

/// Merges an operation sequence into classified span edits.
///
/// Maximal runs of one operation kind become one span; runs of different
/// kinds are never merged together, and Match ops separate runs.
pub fn merge_edits(src: &[char], tgt: &[char], ops: &[EditOp]) -> Result<Vec<SpanEdit>, AlignError> {
    validate_ops(src, tgt, ops)?;
    let mut spans: Vec<SpanEdit> = Vec::new();
    let mut run: Option<(OpKind, usize)> = None;
    for (idx, op) in ops.iter().enumerate() {
        let continues = match run {
            Some((kind, _)) => kind == op.kind,
            None => false,
        };
        if !continues {
            if let Some((kind, start)) = run.take() {
                spans.push(span_from_run(src, tgt, kind, &ops[start..idx]));
            }
            if op.kind != OpKind::Match {
                run = Some((op.kind, idx));
            }
        }
    }
    if let Some((kind, start)) = run {
        spans.push(span_from_run(src, tgt, kind, &ops[start..]));
    }
    Ok(spans)
}

fn span_from_run(src: &[char], tgt: &[char], kind: OpKind, run: &[EditOp]) -> SpanEdit {
    let first = run[0];
    let src_len: usize = run.iter().map(EditOp::src_width).sum();
    let tgt_len: usize = run.iter().map(EditOp::tgt_width).sum();
    let kind = match kind {
        OpKind::Substitute => EditType::Replacement,
        OpKind::Insert => EditType::Insertion,
        OpKind::Delete => EditType::Redundant,
        OpKind::Transpose => EditType::Ordering,
        OpKind::Match => unreachable!("match ops never open a run"),
    };
    SpanEdit {
        kind,
        src_start: first.src,
        tgt_start: first.tgt,
        src_chars: src[first.src..first.src + src_len].to_vec(),
        tgt_chars: tgt[first.tgt..first.tgt + tgt_len].to_vec(),
    }
}

fn validate_ops(src: &[char], tgt: &[char], ops: &[EditOp]) -> Result<(), AlignError> {
    let (mut i, mut j) = (0usize, 0usize);
    for (index, op) in ops.iter().enumerate() {
        let bad = |reason: String| AlignError::MalformedOps { index, reason };
        if op.src != i || op.tgt != j {
            return Err(bad(format!(
                "expected cursor ({i}, {j}), op is at ({}, {})",
                op.src, op.tgt
            )));
        }
        if i + op.src_width() > src.len() || j + op.tgt_width() > tgt.len() {
            return Err(bad("op runs past the end of a sequence".into()));
        }
        match op.kind {
            OpKind::Match if src[i] != tgt[j] => {
                return Err(bad(format!("match of {:?} and {:?}", src[i], tgt[j])));
            }
            OpKind::Substitute if src[i] == tgt[j] => {
                return Err(bad(format!("substitution of {:?} by itself", src[i])));
            }
            OpKind::Transpose if !(src[i] == tgt[j + 1] && src[i + 1] == tgt[j]) => {
                return Err(bad("transposition does not swap the pair".into()));
            }
            _ => {}
        }
        i += op.src_width();
        j += op.tgt_width();
    }
    if i != src.len() || j != tgt.len() {
        return Err(AlignError::MalformedOps {
            index: ops.len(),
            reason: format!("ops end at ({i}, {j}), sequences end at ({}, {})", src.len(), tgt.len()),
        });
    }
    Ok(())
}

/// Aligns a pair and returns its span edits.
pub fn align_pair(src: &Sentence, tgt: &Sentence) -> Result<Vec<SpanEdit>, AlignError> {
    let ops = align_chars(src, tgt)?;
    merge_edits(src.chars(), tgt.chars(), &ops)
}

/// Applies span edits, in order, to `src`.
pub fn apply_edits(src: &[char], edits: &[SpanEdit]) -> Result<Vec<char>, AlignError> {
    let mut out = Vec::with_capacity(src.len());
    let mut cursor = 0;
    for (index, edit) in edits.iter().enumerate() {
        if edit.src_start < cursor {
            return Err(AlignError::Replay {
                index,
                reason: format!("starts at {} before cursor {cursor}", edit.src_start),
            });
        }
        let end = edit.src_start + edit.src_chars.len();
        if end > src.len() || src[edit.src_start..end] != edit.src_chars[..] {
            return Err(AlignError::Replay {
                index,
                reason: "source characters do not match".into(),
            });
        }
        out.extend_from_slice(&src[cursor..edit.src_start]);
        out.extend_from_slice(&edit.tgt_chars);
        cursor = end;
    }
    out.extend_from_slice(&src[cursor..]);
    Ok(out)
}
