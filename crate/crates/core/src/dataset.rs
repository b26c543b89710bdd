//! Probing dataset construction from erroneous/corrected sentence pairs.
//!
//! Input is a three-column TSV (`id`, erroneous, corrected). Each pair is
//! aligned; insertion and replacement spans become probing instances and the
//! remaining span types are tallied in a rejects report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_pair, EditType, SpanEdit};
use crate::text::{bucket_of, decode_sentence, LengthBucket, Sentence, TextError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("instance {id}: {reason}")]
    InvalidInstance { id: String, reason: String },
    #[error("pair {id}: emitted instance does not replay onto the corrected sentence")]
    ReplayCheck { id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub id: String,
    pub erroneous: Sentence,
    pub corrected: Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Replacement,
    Insertion,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Replacement, Task::Insertion];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Replacement => "replacement",
            Task::Insertion => "insertion",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Task::Replacement => "Replacement",
            Task::Insertion => "Insertion",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replacement" => Ok(Task::Replacement),
            "insertion" => Ok(Task::Insertion),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// One evaluable unit. `position` is a character index for replacement and
/// a gap index for insertion; `gold` always has `k` characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "InstanceRecord", try_from = "InstanceRecord")]
pub struct ProbingInstance {
    pub id: String,
    pub sentence: Sentence,
    pub task: Task,
    pub position: usize,
    pub k: usize,
    pub gold: Vec<char>,
}

impl ProbingInstance {
    pub fn new(
        id: impl Into<String>,
        sentence: Sentence,
        task: Task,
        position: usize,
        gold: Vec<char>,
    ) -> Result<Self, DatasetError> {
        let inst = Self {
            id: id.into(),
            sentence,
            task,
            position,
            k: gold.len(),
            gold,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn bucket(&self) -> LengthBucket {
        bucket_of(self.k).expect("validated instances have k >= 1")
    }

    /// Identifier of the sentence pair this instance came from.
    pub fn pair_id(&self) -> &str {
        self.sentence.id()
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidInstance {
            id: self.id.clone(),
            reason,
        };
        if self.k == 0 {
            return Err(invalid("k must be at least 1".into()));
        }
        if self.gold.len() != self.k {
            return Err(invalid(format!(
                "gold has {} characters, k = {}",
                self.gold.len(),
                self.k
            )));
        }
        let n = self.sentence.len();
        match self.task {
            Task::Replacement => {
                if self.position + self.k > n {
                    return Err(invalid(format!(
                        "span {}..{} exceeds sentence length {n}",
                        self.position,
                        self.position + self.k
                    )));
                }
                if self.sentence.chars()[self.position..self.position + self.k] == self.gold[..] {
                    return Err(invalid("gold equals the source span".into()));
                }
            }
            Task::Insertion => {
                if self.position > n {
                    return Err(invalid(format!("gap {} exceeds sentence length {n}", self.position)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    sentence: String,
    task: Task,
    position: usize,
    k: usize,
    gold: String,
}

impl From<ProbingInstance> for InstanceRecord {
    fn from(inst: ProbingInstance) -> Self {
        Self {
            sentence: inst.sentence.text(),
            gold: inst.gold.iter().collect(),
            id: inst.id,
            task: inst.task,
            position: inst.position,
            k: inst.k,
        }
    }
}

impl TryFrom<InstanceRecord> for ProbingInstance {
    type Error = String;

    fn try_from(rec: InstanceRecord) -> Result<Self, Self::Error> {
        let pair_id = rec.id.rsplit_once('#').map_or(rec.id.as_str(), |(p, _)| p);
        let sentence = Sentence::from_text(pair_id, &rec.sentence).map_err(|e| e.to_string())?;
        let inst = ProbingInstance {
            id: rec.id,
            sentence,
            task: rec.task,
            position: rec.position,
            k: rec.k,
            gold: rec.gold.chars().collect(),
        };
        inst.validate().map_err(|e| e.to_string())?;
        Ok(inst)
    }
}

/// Reads line-delimited JSON instances.
pub fn read_instances<R: BufRead>(reader: R) -> Result<Vec<ProbingInstance>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: idx + 1, source })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_instances<W: Write>(mut writer: W, instances: &[ProbingInstance]) -> Result<(), DatasetError> {
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|source| DatasetError::Json { line: 0, source })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordProblem {
    ColumnCount { found: usize },
    EmptySentence,
    Decode { offset: usize },
}

impl fmt::Display for RecordProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordProblem::ColumnCount { found } => write!(f, "expected 3 tab-separated columns, found {found}"),
            RecordProblem::EmptySentence => f.write_str("empty sentence field"),
            RecordProblem::Decode { offset } => write!(f, "invalid UTF-8 at byte offset {offset}"),
        }
    }
}

/// A skipped input record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub id: Option<String>,
    pub problem: RecordProblem,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.problem)
    }
}

#[derive(Debug, Default, Clone)]
pub struct ParsedPairs {
    pub pairs: Vec<SentencePair>,
    pub errors: Vec<RecordError>,
}

/// Parses `id \t erroneous \t corrected` records. Bad records are skipped
/// and returned alongside the good ones; blank lines are ignored.
pub fn parse_pairs<R: BufRead>(mut reader: R) -> Result<ParsedPairs, DatasetError> {
    let mut parsed = ParsedPairs::default();
    let mut buf = Vec::new();
    let mut line = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line += 1;
        let mut raw: &[u8] = &buf;
        if let Some(stripped) = raw.strip_suffix(b"\n") {
            raw = stripped;
        }
        if let Some(stripped) = raw.strip_suffix(b"\r") {
            raw = stripped;
        }
        if raw.is_empty() {
            continue;
        }
        match parse_record(raw, line) {
            Ok(pair) => parsed.pairs.push(pair),
            Err(err) => parsed.errors.push(err),
        }
    }
    Ok(parsed)
}

fn parse_record(raw: &[u8], line: usize) -> Result<SentencePair, RecordError> {
    let fields: Vec<&[u8]> = raw.split(|&b| b == b'\t').collect();
    let id = std::str::from_utf8(fields[0]).ok().map(str::to_string);
    let fail = |problem| RecordError {
        line,
        id: id.clone(),
        problem,
    };
    if fields.len() != 3 {
        return Err(fail(RecordProblem::ColumnCount { found: fields.len() }));
    }
    let Some(id_str) = id.clone() else {
        let offset = std::str::from_utf8(fields[0]).unwrap_err().valid_up_to();
        return Err(fail(RecordProblem::Decode { offset }));
    };
    let column_offset = fields[0].len() + 1;
    let decode = |bytes: &[u8], base: usize| {
        decode_sentence(bytes, id_str.clone()).map_err(|e| match e {
            TextError::Decode { offset } => fail(RecordProblem::Decode { offset: base + offset }),
            _ => fail(RecordProblem::EmptySentence),
        })
    };
    let erroneous = decode(fields[1], column_offset)?;
    let corrected = decode(fields[2], column_offset + fields[1].len() + 1)?;
    Ok(SentencePair {
        id: id_str,
        erroneous,
        corrected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectKind {
    Redundant,
    Ordering,
    Degenerate,
    AlignmentError,
    Malformed,
}

impl RejectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectKind::Redundant => "redundant",
            RejectKind::Ordering => "ordering",
            RejectKind::Degenerate => "degenerate",
            RejectKind::AlignmentError => "alignment_error",
            RejectKind::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectEntry {
    pub pair_id: String,
    pub kind: RejectKind,
    pub count: usize,
}

/// Per-pair counts of dropped spans and skipped records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectReport {
    pub entries: Vec<RejectEntry>,
}

impl RejectReport {
    pub fn total(&self, kind: RejectKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.count).sum()
    }

    pub fn add_record_errors(&mut self, errors: &[RecordError]) {
        for err in errors {
            let pair_id = err.id.clone().unwrap_or_else(|| format!("line:{}", err.line));
            self.entries.push(RejectEntry {
                pair_id,
                kind: RejectKind::Malformed,
                count: 1,
            });
        }
    }

    /// Writes the `pair_id \t type \t count` report with a header row.
    pub fn write_tsv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writeln!(writer, "pair_id\ttype\tcount")?;
        for e in &self.entries {
            writeln!(writer, "{}\t{}\t{}", e.pair_id, e.kind.as_str(), e.count)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TaskStats {
    buckets: [usize; 3],
    chars: usize,
    sentences: BTreeSet<String>,
}

/// Span, character and sentence counts per task and length bucket.
///
/// Counts are kept as exact integers and sentence identities as a set, so
/// [`DatasetStats::merge`] is commutative and associative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    tasks: BTreeMap<Task, TaskStats>,
}

impl DatasetStats {
    pub fn add(&mut self, inst: &ProbingInstance) {
        let entry = self.tasks.entry(inst.task).or_default();
        entry.buckets[bucket_index(inst.bucket())] += 1;
        entry.chars += inst.k;
        entry.sentences.insert(inst.pair_id().to_string());
    }

    pub fn merge(&mut self, other: &DatasetStats) {
        for (task, theirs) in &other.tasks {
            let ours = self.tasks.entry(*task).or_default();
            for (a, b) in ours.buckets.iter_mut().zip(theirs.buckets) {
                *a += b;
            }
            ours.chars += theirs.chars;
            ours.sentences.extend(theirs.sentences.iter().cloned());
        }
    }

    pub fn bucket_count(&self, task: Task, bucket: LengthBucket) -> usize {
        self.tasks.get(&task).map_or(0, |t| t.buckets[bucket_index(bucket)])
    }

    pub fn span_count(&self, task: Task) -> usize {
        self.tasks.get(&task).map_or(0, |t| t.buckets.iter().sum())
    }

    pub fn char_count(&self, task: Task) -> usize {
        self.tasks.get(&task).map_or(0, |t| t.chars)
    }

    pub fn sentence_count(&self, task: Task) -> usize {
        self.tasks.get(&task).map_or(0, |t| t.sentences.len())
    }

    pub fn total_bucket_count(&self, bucket: LengthBucket) -> usize {
        Task::ALL.iter().map(|&t| self.bucket_count(t, bucket)).sum()
    }

    pub fn total_spans(&self) -> usize {
        Task::ALL.iter().map(|&t| self.span_count(t)).sum()
    }

    pub fn total_chars(&self) -> usize {
        Task::ALL.iter().map(|&t| self.char_count(t)).sum()
    }

    /// Sentence total is the sum of the per-task columns.
    pub fn total_sentences(&self) -> usize {
        Task::ALL.iter().map(|&t| self.sentence_count(t)).sum()
    }

    /// Writes the statistics table: one column per task plus a total.
    pub fn write_tsv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writeln!(writer, "\tReplacement\tInsertion\tTotal")?;
        let row = |per_task: &dyn Fn(Task) -> usize| {
            let r = per_task(Task::Replacement);
            let i = per_task(Task::Insertion);
            (r, i)
        };
        let mut rows: Vec<(&str, (usize, usize))> = LengthBucket::ALL
            .iter()
            .map(|&b| (b.heading(), row(&|t| self.bucket_count(t, b))))
            .collect();
        rows.push(("No. sentences", row(&|t| self.sentence_count(t))));
        rows.push(("No. spans", row(&|t| self.span_count(t))));
        rows.push(("No. chars", row(&|t| self.char_count(t))));
        for (label, (r, i)) in rows {
            writeln!(writer, "{label}\t{r}\t{i}\t{}", r + i)?;
        }
        Ok(())
    }
}

fn bucket_index(bucket: LengthBucket) -> usize {
    match bucket {
        LengthBucket::One => 0,
        LengthBucket::Two => 1,
        LengthBucket::ThreeOrMore => 2,
    }
}

pub fn compute_stats(instances: &[ProbingInstance]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for inst in instances {
        stats.add(inst);
    }
    stats
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Apply every other gold edit of the pair to the probing sentence, so
    /// that each instance carries exactly one error.
    pub apply_other_edits: bool,
}

#[derive(Debug, Default)]
pub struct BuildOutput {
    pub instances: Vec<ProbingInstance>,
    pub stats: DatasetStats,
    pub rejects: RejectReport,
    /// Total span edits the aligner found across all pairs.
    pub spans_found: usize,
}

struct PairOutcome {
    instances: Vec<ProbingInstance>,
    rejects: Vec<RejectEntry>,
    spans_found: usize,
}

/// Aligns every pair and turns its insertion and replacement spans into
/// probing instances. Instance ids are `<pair id>#<span ordinal>`.
pub fn build_instances(pairs: &[SentencePair], opts: BuildOptions) -> Result<BuildOutput, DatasetError> {
    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|pair| process_pair(pair, opts))
        .collect::<Result<_, _>>()?;
    let mut out = BuildOutput::default();
    for outcome in outcomes {
        out.spans_found += outcome.spans_found;
        out.instances.extend(outcome.instances);
        out.rejects.entries.extend(outcome.rejects);
    }
    out.stats = compute_stats(&out.instances);
    Ok(out)
}

fn process_pair(pair: &SentencePair, opts: BuildOptions) -> Result<PairOutcome, DatasetError> {
    let spans = match align_pair(&pair.erroneous, &pair.corrected) {
        Ok(spans) => spans,
        Err(err) => {
            log::warn!("pair {}: {err}", pair.id);
            return Ok(PairOutcome {
                instances: Vec::new(),
                rejects: vec![RejectEntry {
                    pair_id: pair.id.clone(),
                    kind: RejectKind::AlignmentError,
                    count: 1,
                }],
                spans_found: 0,
            });
        }
    };
    let mut counts: BTreeMap<RejectKind, usize> = BTreeMap::new();
    let mut instances = Vec::new();
    for (idx, span) in spans.iter().enumerate() {
        let task = match span.kind {
            EditType::Replacement if span.src_chars == span.tgt_chars => {
                *counts.entry(RejectKind::Degenerate).or_default() += 1;
                continue;
            }
            EditType::Replacement => Task::Replacement,
            EditType::Insertion => Task::Insertion,
            EditType::Redundant => {
                *counts.entry(RejectKind::Redundant).or_default() += 1;
                continue;
            }
            EditType::Ordering => {
                *counts.entry(RejectKind::Ordering).or_default() += 1;
                continue;
            }
        };
        check_window(pair, &spans, idx)?;
        let (chars, position) = if opts.apply_other_edits {
            apply_others(pair.erroneous.chars(), &spans, idx)
        } else {
            (pair.erroneous.chars().to_vec(), span.src_start)
        };
        let sentence =
            Sentence::new(pair.id.clone(), chars).map_err(|_| DatasetError::ReplayCheck { id: pair.id.clone() })?;
        let id = format!("{}#{idx}", pair.id);
        let inst = ProbingInstance::new(id, sentence, task, position, span.tgt_chars.clone())?;
        if opts.apply_other_edits && replay(&inst) != pair.corrected.chars() {
            return Err(DatasetError::ReplayCheck { id: pair.id.clone() });
        }
        instances.push(inst);
    }
    let rejects = counts
        .into_iter()
        .map(|(kind, count)| RejectEntry {
            pair_id: pair.id.clone(),
            kind,
            count,
        })
        .collect();
    Ok(PairOutcome {
        instances,
        rejects,
        spans_found: spans.len(),
    })
}

/// Applies the instance's gold span to its sentence.
pub fn replay(inst: &ProbingInstance) -> Vec<char> {
    let chars = inst.sentence.chars();
    let removed = match inst.task {
        Task::Replacement => inst.k,
        Task::Insertion => 0,
    };
    let mut out = chars[..inst.position].to_vec();
    out.extend_from_slice(&inst.gold);
    out.extend_from_slice(&chars[inst.position + removed..]);
    out
}

/// Checks that the gold span, together with the unchanged context up to the
/// neighbouring edits, reads exactly as the corrected sentence does there.
fn check_window(pair: &SentencePair, spans: &[SpanEdit], idx: usize) -> Result<(), DatasetError> {
    let src = pair.erroneous.chars();
    let tgt = pair.corrected.chars();
    let span = &spans[idx];
    let (src_left, tgt_left) = match idx.checked_sub(1).map(|p| &spans[p]) {
        Some(prev) => (
            prev.src_start + prev.src_chars.len(),
            prev.tgt_start + prev.tgt_chars.len(),
        ),
        None => (0, 0),
    };
    let (src_right, tgt_right) = match spans.get(idx + 1) {
        Some(next) => (next.src_start, next.tgt_start),
        None => (src.len(), tgt.len()),
    };
    let mut window = src[src_left..span.src_start].to_vec();
    window.extend_from_slice(&span.tgt_chars);
    window.extend_from_slice(&src[span.src_start + span.src_chars.len()..src_right]);
    if window[..] != tgt[tgt_left..tgt_right] {
        return Err(DatasetError::ReplayCheck { id: pair.id.clone() });
    }
    Ok(())
}

fn apply_others(src: &[char], spans: &[SpanEdit], keep: usize) -> (Vec<char>, usize) {
    let mut out = Vec::with_capacity(src.len());
    let mut cursor = 0;
    let mut position = 0;
    for (idx, span) in spans.iter().enumerate() {
        out.extend_from_slice(&src[cursor..span.src_start]);
        if idx == keep {
            position = out.len();
            out.extend_from_slice(&span.src_chars);
        } else {
            out.extend_from_slice(&span.tgt_chars);
        }
        cursor = span.src_start + span.src_chars.len();
    }
    out.extend_from_slice(&src[cursor..]);
    (out, position)
}
