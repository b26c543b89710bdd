//! Masked-language-model corruption under character-level (CLM), whole-word
//! (WWM) and mixed masking.
//!
//! Every input line gets its own ChaCha8 stream: the generator is seeded with
//! the configured seed and the stream number is set to the line ordinal.
//! Output therefore does not depend on how lines are spread over workers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{parse_presegmented, segment_chars, Lexicon, WordSpans};
use crate::text::{Sentence, Vocab, CLS, MASK, SEP};

/// Lines read per parallel batch in [`generate_corpus`].
const BATCH_LINES: usize = 4096;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid masking config: {0}")]
    Config(String),
    #[error("position {position} out of range for a sentence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("vocabulary has no ordinary characters to sample from")]
    EmptyVocab,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Clm,
    Wwm,
    Mixed,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Clm => "clm",
            Strategy::Wwm => "wwm",
            Strategy::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clm" => Ok(Strategy::Clm),
            "wwm" => Ok(Strategy::Wwm),
            "mixed" => Ok(Strategy::Mixed),
            other => Err(MaskError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Probabilities of masking, randomising or keeping a selected position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for CorruptionSplit {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub strategy: Strategy,
    pub mask_rate: f64,
    pub max_seq_len: usize,
    pub split: CorruptionSplit,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Clm,
            mask_rate: 0.15,
            max_seq_len: 512,
            split: CorruptionSplit::default(),
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(MaskError::Config(format!("mask rate {} not in (0, 1)", self.mask_rate)));
        }
        if self.max_seq_len < 3 {
            return Err(MaskError::Config("max_seq_len must leave room for CLS and SEP".into()));
        }
        let CorruptionSplit { mask, random, keep } = self.split;
        if [mask, random, keep].iter().any(|p| !(0.0..=1.0).contains(p)) || ((mask + random + keep) - 1.0).abs() > 1e-9
        {
            return Err(MaskError::Config(format!(
                "corruption split ({mask}, {random}, {keep}) must be probabilities summing to 1"
            )));
        }
        Ok(())
    }

    /// Number of positions to select in a sentence of `n` characters:
    /// `max(1, floor(rate * n))`.
    pub fn target(&self, n: usize) -> usize {
        // the epsilon keeps exact products such as 0.15 * 60 from flooring down
        let raw = (self.mask_rate * n as f64 + 1e-9).floor() as usize;
        raw.max(1).min(n)
    }
}

/// The per-line random stream.
pub fn line_rng(seed: u64, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    rng
}

/// Picks exactly `target(n)` distinct positions uniformly at random.
pub fn select_clm<R: Rng + ?Sized>(sentence: &Sentence, cfg: &MaskingConfig, rng: &mut R) -> Vec<usize> {
    select_clm_n(sentence.len(), cfg, rng)
}

fn select_clm_n<R: Rng + ?Sized>(n: usize, cfg: &MaskingConfig, rng: &mut R) -> Vec<usize> {
    let mut picked = index::sample(rng, n, cfg.target(n)).into_vec();
    picked.sort_unstable();
    picked
}

/// Picks whole words in random order until at least `target(n)` characters
/// are covered. The last word may overshoot the target.
pub fn select_wwm<R: Rng + ?Sized>(words: &WordSpans, cfg: &MaskingConfig, rng: &mut R) -> Vec<usize> {
    let target = cfg.target(words.covered());
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.shuffle(rng);
    let mut picked = Vec::new();
    for w in order {
        if picked.len() >= target {
            break;
        }
        let (start, len) = words.spans()[w];
        picked.extend(start..start + len);
    }
    picked.sort_unstable();
    picked
}

/// A corrupted training sequence. `labels` maps token positions (after the
/// leading CLS) to the original character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedInstance {
    pub tokens: Vec<String>,
    pub labels: BTreeMap<usize, char>,
    pub strategy: Strategy,
}

/// Corrupts the selected character positions: MASK, a random vocabulary
/// character, or unchanged, drawn independently per position.
pub fn corrupt<R: Rng + ?Sized>(
    chars: &[char],
    positions: &[usize],
    strategy: Strategy,
    cfg: &MaskingConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<MaskedInstance, MaskError> {
    let mut tokens = Vec::with_capacity(chars.len() + 2);
    tokens.push(CLS.to_string());
    tokens.extend(chars.iter().map(char::to_string));
    tokens.push(SEP.to_string());
    let mut labels = BTreeMap::new();
    for &pos in positions {
        if pos >= chars.len() {
            return Err(MaskError::PositionOutOfRange {
                position: pos,
                len: chars.len(),
            });
        }
        let slot = pos + 1;
        labels.insert(slot, chars[pos]);
        let u: f64 = rng.gen();
        if u < cfg.split.mask {
            tokens[slot] = MASK.to_string();
        } else if u < cfg.split.mask + cfg.split.random {
            let n = vocab.num_characters();
            if n == 0 {
                return Err(MaskError::EmptyVocab);
            }
            let c = vocab
                .character(rng.gen_range(0..n))
                .expect("index below num_characters");
            tokens[slot] = c.to_string();
        }
    }
    Ok(MaskedInstance {
        tokens,
        labels,
        strategy,
    })
}

/// Where word boundaries come from for WWM.
#[derive(Debug, Clone, Copy)]
pub enum Segmentation<'a> {
    Lexicon(&'a Lexicon),
    /// Input lines are already segmented with single spaces.
    Presegmented,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusSummary {
    pub lines: usize,
    pub skipped_lines: usize,
    pub instances: usize,
    pub clm: usize,
    pub wwm: usize,
}

/// Masks one input line. Lines longer than `max_seq_len - 2` characters are
/// cut into pieces that are masked independently, in order.
pub fn mask_line(
    line: &str,
    ordinal: u64,
    cfg: &MaskingConfig,
    vocab: &Vocab,
    seg: Segmentation<'_>,
) -> Result<Vec<MaskedInstance>, MaskError> {
    let (chars, words) = match seg {
        Segmentation::Presegmented => {
            let (sentence, words) = parse_presegmented(line, ordinal.to_string())
                .map_err(|e| MaskError::Config(format!("line {}: {e}", ordinal + 1)))?;
            (sentence.chars().to_vec(), Some(words))
        }
        Segmentation::Lexicon(_) => (line.chars().collect::<Vec<char>>(), None),
    };
    let mut rng = line_rng(cfg.seed, ordinal);
    let piece_len = cfg.max_seq_len - 2;
    let mut out = Vec::new();
    for start in (0..chars.len()).step_by(piece_len) {
        let end = (start + piece_len).min(chars.len());
        let piece = &chars[start..end];
        let strategy = match cfg.strategy {
            Strategy::Mixed => {
                if rng.gen_bool(0.5) {
                    Strategy::Clm
                } else {
                    Strategy::Wwm
                }
            }
            s => s,
        };
        let positions = match strategy {
            Strategy::Clm => select_clm_n(piece.len(), cfg, &mut rng),
            _ => {
                let spans = match (&words, seg) {
                    (Some(words), _) => words.window(start, end),
                    (None, Segmentation::Lexicon(lex)) => segment_chars(piece, lex),
                    (None, Segmentation::Presegmented) => unreachable!("presegmented input always has words"),
                };
                select_wwm(&spans, cfg, &mut rng)
            }
        };
        out.push(corrupt(piece, &positions, strategy, cfg, vocab, &mut rng)?);
    }
    Ok(out)
}

/// Reads one sentence per line and writes one JSON instance per line.
/// Blank lines produce nothing but still consume an ordinal.
pub fn generate_corpus<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    cfg: &MaskingConfig,
    vocab: &Vocab,
    seg: Segmentation<'_>,
    workers: usize,
) -> Result<CorpusSummary, MaskError> {
    cfg.validate()?;
    if vocab.num_characters() == 0 && cfg.split.random > 0.0 {
        return Err(MaskError::EmptyVocab);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| MaskError::Config(e.to_string()))?;
    let mut summary = CorpusSummary::default();
    let mut lines = reader.lines();
    let mut ordinal = 0u64;
    loop {
        let mut batch = Vec::with_capacity(BATCH_LINES);
        for line in lines.by_ref().take(BATCH_LINES) {
            batch.push((ordinal, line?));
            ordinal += 1;
        }
        if batch.is_empty() {
            break;
        }
        let results: Vec<Option<Vec<MaskedInstance>>> = pool.install(|| {
            batch
                .par_iter()
                .map(|(ord, line)| {
                    let line = line.strip_suffix('\r').unwrap_or(line);
                    if line.trim().is_empty() {
                        return None;
                    }
                    match mask_line(line, *ord, cfg, vocab, seg) {
                        Ok(instances) => Some(instances),
                        Err(e) => {
                            log::warn!("skipping line {}: {e}", ord + 1);
                            None
                        }
                    }
                })
                .collect()
        });
        for ((_, line), result) in batch.iter().zip(results) {
            summary.lines += 1;
            let Some(instances) = result else {
                if !line.trim().is_empty() {
                    summary.skipped_lines += 1;
                }
                continue;
            };
            for inst in instances {
                match inst.strategy {
                    Strategy::Clm => summary.clm += 1,
                    _ => summary.wwm += 1,
                }
                summary.instances += 1;
                serde_json::to_writer(&mut writer, &inst)?;
                writer.write_all(b"\n")?;
            }
        }
    }
    writer.flush()?;
    Ok(summary)
}
