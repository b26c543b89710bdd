//! Probing queries, hit scoring, P@1/P@10 aggregation and reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeClient, ProbeQuery, ProbeResponse, ProtocolError};
use crate::dataset::{ProbingInstance, Task};
use crate::text::{LengthBucket, Vocab, CLS, MASK, SEP, UNK};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("top-k must be at least 1")]
    ZeroK,
    #[error("instance {id}: framed length {len} exceeds max_seq_len {max}")]
    TooLong { id: String, len: usize, max: usize },
    #[error("duplicate curve label {0:?}")]
    DuplicateLabel(String),
    #[error("metric table line {line}: {reason}")]
    TableFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Builds the masked query for an instance: the span (replacement) or the
/// gap (insertion) becomes `k` MASK tokens, framed by CLS and SEP. Characters
/// missing from `vocab`, when one is given, become UNK.
pub fn build_query(
    inst: &ProbingInstance,
    vocab: Option<&Vocab>,
    top_k: usize,
    max_seq_len: usize,
) -> Result<ProbeQuery, EvalError> {
    if top_k == 0 || inst.k == 0 {
        return Err(EvalError::ZeroK);
    }
    let chars = inst.sentence.chars();
    let removed = match inst.task {
        Task::Replacement => inst.k,
        Task::Insertion => 0,
    };
    let framed = chars.len() - removed + inst.k + 2;
    if framed > max_seq_len {
        return Err(EvalError::TooLong {
            id: inst.id.clone(),
            len: framed,
            max: max_seq_len,
        });
    }
    let token = |c: &char| match vocab {
        Some(v) if !v.contains_char(*c) => UNK.to_string(),
        _ => c.to_string(),
    };
    let mut tokens = Vec::with_capacity(framed);
    tokens.push(CLS.to_string());
    tokens.extend(chars[..inst.position].iter().map(token));
    let first_mask = tokens.len();
    tokens.extend(std::iter::repeat_n(MASK.to_string(), inst.k));
    tokens.extend(chars[inst.position + removed..].iter().map(token));
    tokens.push(SEP.to_string());
    Ok(ProbeQuery {
        id: inst.id.clone(),
        tokens,
        masked_positions: (first_mask..first_mask + inst.k).collect(),
        k: top_k,
    })
}

/// Outcome at one character position of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitRecord {
    pub id: String,
    pub task: Task,
    pub bucket: LengthBucket,
    /// Ordinal of the position within its span.
    pub position: usize,
    pub hit_at_1: bool,
    pub hit_at_10: bool,
    /// 1-based rank of the gold character, when it was predicted at all.
    pub rank: Option<usize>,
}

/// One record per span position; the gold character's rank decides the hits.
pub fn score(inst: &ProbingInstance, resp: &ProbeResponse) -> Result<Vec<HitRecord>, ProtocolError> {
    if resp.predictions.len() != inst.k {
        return Err(ProtocolError::Arity {
            expected: inst.k,
            found: resp.predictions.len(),
        });
    }
    Ok(inst
        .gold
        .iter()
        .zip(&resp.predictions)
        .enumerate()
        .map(|(position, (gold, list))| {
            let rank = list.iter().position(|(c, _)| c == gold).map(|i| i + 1);
            HitRecord {
                id: inst.id.clone(),
                task: inst.task,
                bucket: inst.bucket(),
                position,
                hit_at_1: rank == Some(1),
                hit_at_10: rank.is_some_and(|r| r <= 10),
                rank,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// Every character position counts once.
    #[default]
    Position,
    /// A span counts once and is a hit only if all its positions are.
    Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    P1,
    P10,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::P1, Metric::P10];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::P1 => "p@1",
            Metric::P10 => "p@10",
        }
    }
}

/// Exact hit counts for one (task, bucket) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub total: u64,
    pub hits_at_1: u64,
    pub hits_at_10: u64,
}

impl CellCounts {
    fn add(&mut self, other: CellCounts) {
        self.total += other.total;
        self.hits_at_1 += other.hits_at_1;
        self.hits_at_10 += other.hits_at_10;
    }

    pub fn percent(&self, metric: Metric) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let hits = match metric {
            Metric::P1 => self.hits_at_1,
            Metric::P10 => self.hits_at_10,
        };
        Some(100.0 * hits as f64 / self.total as f64)
    }
}

/// P@1/P@10 per task and length bucket, kept as integer counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricTable {
    cells: BTreeMap<(Task, LengthBucket), CellCounts>,
}

impl MetricTable {
    pub fn cell(&self, task: Task, bucket: LengthBucket) -> CellCounts {
        self.cells.get(&(task, bucket)).copied().unwrap_or_default()
    }

    pub fn set_cell(&mut self, task: Task, bucket: LengthBucket, counts: CellCounts) {
        self.cells.insert((task, bucket), counts);
    }

    pub fn value(&self, task: Task, bucket: LengthBucket, metric: Metric) -> Option<f64> {
        self.cell(task, bucket).percent(metric)
    }

    /// Unweighted mean over the non-empty buckets of a task.
    pub fn average(&self, task: Task, metric: Metric) -> Option<f64> {
        let values: Vec<f64> = LengthBucket::ALL
            .iter()
            .filter_map(|&b| self.value(task, b, metric))
            .collect();
        (!values.is_empty()).then(|| macro_average(&values))
    }

    pub fn merge(&mut self, other: &MetricTable) {
        for (key, counts) in &other.cells {
            self.cells.entry(*key).or_default().add(*counts);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.values().all(|c| c.total == 0)
    }

    /// Writes one row per cell plus one average row per task. Percentages
    /// are rounded half-up to one decimal; empty cells print `-`.
    pub fn write_tsv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writeln!(writer, "task\tbucket\ttotal\thits@1\thits@10\tp@1\tp@10")?;
        for task in Task::ALL {
            for bucket in LengthBucket::ALL {
                let c = self.cell(task, bucket);
                writeln!(
                    writer,
                    "{task}\t{bucket}\t{}\t{}\t{}\t{}\t{}",
                    c.total,
                    c.hits_at_1,
                    c.hits_at_10,
                    present(c.percent(Metric::P1)),
                    present(c.percent(Metric::P10)),
                )?;
            }
            writeln!(
                writer,
                "{task}\taverage\t\t\t\t{}\t{}",
                present(self.average(task, Metric::P1)),
                present(self.average(task, Metric::P10)),
            )?;
        }
        Ok(())
    }

    /// Reads a table written by [`MetricTable::write_tsv`], taking the exact
    /// counts and ignoring the derived columns.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self, EvalError> {
        let mut table = MetricTable::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if lineno == 1 || line.trim().is_empty() {
                continue;
            }
            let fail = |reason: String| EvalError::TableFormat { line: lineno, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(fail(format!("expected 7 columns, found {}", cols.len())));
            }
            if cols[1] == "average" {
                continue;
            }
            let task: Task = cols[0].parse().map_err(fail)?;
            let bucket: LengthBucket = cols[1]
                .parse()
                .map_err(|e: crate::text::TextError| fail(e.to_string()))?;
            let num = |s: &str| s.parse::<u64>().map_err(|e| fail(format!("{s:?}: {e}")));
            let counts = CellCounts {
                total: num(cols[2])?,
                hits_at_1: num(cols[3])?,
                hits_at_10: num(cols[4])?,
            };
            if counts.hits_at_1 > counts.hits_at_10 || counts.hits_at_10 > counts.total {
                return Err(fail("need hits@1 <= hits@10 <= total".into()));
            }
            table.set_cell(task, bucket, counts);
        }
        Ok(table)
    }
}

pub fn macro_average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Rounds half-up to one decimal.
pub fn round_one_decimal(x: f64) -> f64 {
    // tolerance absorbs binary representation error on exact .x5 ties
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

/// One-decimal presentation, `-` for an absent value.
pub fn present(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.1}", round_one_decimal(v)),
        None => "-".to_string(),
    }
}

pub fn aggregate(records: &[HitRecord], granularity: Granularity) -> MetricTable {
    let mut table = MetricTable::default();
    match granularity {
        Granularity::Position => {
            for r in records {
                table.cells.entry((r.task, r.bucket)).or_default().add(CellCounts {
                    total: 1,
                    hits_at_1: u64::from(r.hit_at_1),
                    hits_at_10: u64::from(r.hit_at_10),
                });
            }
        }
        Granularity::Span => {
            let mut spans: BTreeMap<&str, (Task, LengthBucket, bool, bool)> = BTreeMap::new();
            for r in records {
                let entry = spans.entry(&r.id).or_insert((r.task, r.bucket, true, true));
                entry.2 &= r.hit_at_1;
                entry.3 &= r.hit_at_10;
            }
            for (task, bucket, h1, h10) in spans.into_values() {
                table.cells.entry((task, bucket)).or_default().add(CellCounts {
                    total: 1,
                    hits_at_1: u64::from(h1),
                    hits_at_10: u64::from(h10),
                });
            }
        }
    }
    table
}

/// Renders several tables in one grid: a block per task, a row per model,
/// and p@1/p@10 columns per length bucket plus the average.
pub fn render_table(models: &[(&str, &MetricTable)]) -> String {
    let label_width = models
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(["Replacement".len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let groups: Vec<&str> = LengthBucket::ALL
        .iter()
        .map(|b| b.heading())
        .chain(["Average"])
        .collect();
    let _ = write!(out, "{:label_width$}", "");
    for g in &groups {
        let _ = write!(out, " | {g:<13}");
    }
    out.push('\n');
    for task in [Task::Insertion, Task::Replacement] {
        let _ = write!(out, "{:label_width$}", task.title());
        for _ in &groups {
            let _ = write!(out, " | {:<6} {:<6}", "p@1", "p@10");
        }
        out.push('\n');
        for (label, table) in models {
            let _ = write!(out, "{:label_width$}", label);
            for bucket in LengthBucket::ALL {
                let _ = write!(
                    out,
                    " | {:<6} {:<6}",
                    present(table.value(task, bucket, Metric::P1)),
                    present(table.value(task, bucket, Metric::P10))
                );
            }
            let _ = write!(
                out,
                " | {:<6} {:<6}",
                present(table.average(task, Metric::P1)),
                present(table.average(task, Metric::P10))
            );
            out.push('\n');
        }
    }
    out.lines().map(|l| format!("{}\n", l.trim_end())).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeOptions {
    pub top_k: usize,
    pub max_seq_len: usize,
    pub granularity: Granularity,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            top_k: 10,
            max_seq_len: 512,
            granularity: Granularity::Position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ProbeRun {
    pub table: MetricTable,
    pub records: Vec<HitRecord>,
    pub skipped: Vec<SkipRecord>,
    /// Instances whose exchange failed; they are left out of every
    /// denominator.
    pub errors: Vec<(String, ProtocolError)>,
}

/// Queries every instance once through `client` and scores the answers.
pub fn run_probe(
    instances: &[ProbingInstance],
    client: &mut BridgeClient,
    vocab: Option<&Vocab>,
    opts: &ProbeOptions,
) -> Result<ProbeRun, EvalError> {
    if opts.top_k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut run = ProbeRun::default();
    let mut queries = Vec::with_capacity(instances.len());
    let mut by_id: HashMap<&str, &ProbingInstance> = HashMap::new();
    let mut seen = HashSet::new();
    for inst in instances {
        if !seen.insert(inst.id.as_str()) {
            run.skipped.push(SkipRecord {
                id: inst.id.clone(),
                reason: "duplicate instance id".into(),
            });
            continue;
        }
        match build_query(inst, vocab, opts.top_k, opts.max_seq_len) {
            Ok(q) => {
                by_id.insert(&inst.id, inst);
                queries.push(q);
            }
            Err(e) => {
                log::info!("skipping {}: {e}", inst.id);
                run.skipped.push(SkipRecord {
                    id: inst.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    for outcome in client.run(&queries) {
        let inst = by_id[outcome.id.as_str()];
        match outcome.result.and_then(|resp| score(inst, &resp)) {
            Ok(records) => run.records.extend(records),
            Err(e) => run.errors.push((outcome.id, e)),
        }
    }
    run.table = aggregate(&run.records, opts.granularity);
    Ok(run)
}

/// One point of a learning curve, in long format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub label: String,
    pub task: Task,
    /// A bucket name or `average`.
    pub bucket: String,
    pub metric: &'static str,
    pub value: f64,
}

/// Flattens an ordered series of tables (e.g. checkpoints) into rows.
pub fn curve_series(points: &[(String, MetricTable)]) -> Result<Vec<CurveRow>, EvalError> {
    let mut labels = HashSet::new();
    let mut rows = Vec::new();
    for (label, table) in points {
        if !labels.insert(label.as_str()) {
            return Err(EvalError::DuplicateLabel(label.clone()));
        }
        for task in Task::ALL {
            for metric in Metric::ALL {
                let cells = LengthBucket::ALL
                    .iter()
                    .map(|&b| (b.as_str().to_string(), table.value(task, b, metric)))
                    .chain([("average".to_string(), table.average(task, metric))]);
                for (bucket, value) in cells {
                    if let Some(value) = value {
                        rows.push(CurveRow {
                            label: label.clone(),
                            task,
                            bucket,
                            metric: metric.as_str(),
                            value,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// A series is identified by everything but its label.
pub type SeriesKey = (Task, String, &'static str);

/// Series whose last point is lower than their first.
pub fn degrading_series(rows: &[CurveRow]) -> Vec<SeriesKey> {
    let mut ends: BTreeMap<SeriesKey, (f64, f64)> = BTreeMap::new();
    for r in rows {
        ends.entry((r.task, r.bucket.clone(), r.metric))
            .and_modify(|e| e.1 = r.value)
            .or_insert((r.value, r.value));
    }
    ends.into_iter()
        .filter(|(_, (first, last))| last < first)
        .map(|(k, _)| k)
        .collect()
}

/// Writes `label,task,bucket,metric,value,degrading` rows.
pub fn write_curve_csv<W: Write>(mut writer: W, rows: &[CurveRow]) -> std::io::Result<()> {
    let degrading: HashSet<SeriesKey> = degrading_series(rows).into_iter().collect();
    writeln!(writer, "label,task,bucket,metric,value,degrading")?;
    for r in rows {
        let flag = degrading.contains(&(r.task, r.bucket.clone(), r.metric));
        writeln!(
            writer,
            "{},{},{},{},{:.4},{}",
            csv_field(&r.label),
            r.task,
            r.bucket,
            r.metric,
            r.value,
            flag
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
