//! Reference backends: a smoothed character n-gram model, a gold-reading
//! oracle and a uniform-random guesser.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Predictor, ProbeQuery, ProbeResponse};
use crate::dataset::ProbingInstance;

/// Left context of an n-gram; `None` is the sentence-boundary pad.
type Context = Vec<Option<char>>;

/// Character n-gram model over left contexts with add-one smoothing.
///
/// For a context with `total` observations and `V` known characters,
/// `P(c | ctx) = (count(ctx, c) + 1) / (total + V + 1)`; the extra `1` in the
/// denominator is the mass left for unknown characters.
#[derive(Debug, Clone)]
pub struct NgramPredictor {
    order: usize,
    counts: HashMap<Context, HashMap<char, u64>>,
    vocab: Vec<char>,
}

#[derive(Debug, thiserror::Error)]
pub enum NgramError {
    #[error("n-gram order must be 2 or 3, got {0}")]
    Order(usize),
    #[error("training corpus has no characters")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counts n-grams over each line, padding the start of every line.
pub fn ngram_train<R: BufRead>(reader: R, order: usize) -> Result<NgramPredictor, NgramError> {
    if !(2..=3).contains(&order) {
        return Err(NgramError::Order(order));
    }
    let mut counts: HashMap<Context, HashMap<char, u64>> = HashMap::new();
    let mut vocab = BTreeSet::new();
    for line in reader.lines() {
        let line = line?;
        let chars: Vec<char> = line.trim_end_matches(['\r', '\n']).chars().collect();
        let mut window: Context = vec![None; order - 1];
        for &c in &chars {
            *counts.entry(window.clone()).or_default().entry(c).or_default() += 1;
            vocab.insert(c);
            window.remove(0);
            window.push(Some(c));
        }
    }
    if vocab.is_empty() {
        return Err(NgramError::EmptyCorpus);
    }
    Ok(NgramPredictor {
        order,
        counts,
        vocab: vocab.into_iter().collect(),
    })
}

impl NgramPredictor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    pub fn count(&self, context: &[Option<char>], c: char) -> u64 {
        self.counts.get(context).and_then(|m| m.get(&c)).copied().unwrap_or(0)
    }

    pub fn probability(&self, context: &[Option<char>], c: char) -> f64 {
        let total: u64 = self.counts.get(context).map_or(0, |m| m.values().sum());
        (self.count(context, c) + 1) as f64 / (total + self.vocab.len() as u64 + 1) as f64
    }

    /// Probability mass reserved for characters outside the vocabulary.
    pub fn unknown_probability(&self, context: &[Option<char>]) -> f64 {
        let total: u64 = self.counts.get(context).map_or(0, |m| m.values().sum());
        1.0 / (total + self.vocab.len() as u64 + 1) as f64
    }

    fn context_at(&self, tokens: &[String], position: usize) -> Context {
        let width = self.order - 1;
        (0..width)
            .map(|back| {
                let offset = width - back;
                position.checked_sub(offset).and_then(|i| single_char(&tokens[i]))
            })
            .collect()
    }

    /// Top-k characters for each masked position, ties broken by ascending
    /// code point. Returns fewer than `k` candidates when the vocabulary is
    /// smaller than `k`.
    pub fn ngram_predict(&self, query: &ProbeQuery) -> ProbeResponse {
        let predictions = query
            .masked_positions
            .iter()
            .map(|&p| {
                let ctx = self.context_at(&query.tokens, p);
                let mut ranked: Vec<(char, u64)> = self.vocab.iter().map(|&c| (c, self.count(&ctx, c))).collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked
                    .into_iter()
                    .take(query.k)
                    .map(|(c, _)| (c, self.probability(&ctx, c)))
                    .collect()
            })
            .collect();
        ProbeResponse {
            id: query.id.clone(),
            predictions,
        }
    }
}

fn single_char(token: &str) -> Option<char> {
    let mut it = token.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

impl Predictor for NgramPredictor {
    fn predict(&self, query: &ProbeQuery) -> Result<ProbeResponse, String> {
        Ok(self.ngram_predict(query))
    }
}

/// Answers with the gold characters of known instances at rank 1 (score 1),
/// padded with other CJK characters at score 0.
#[derive(Debug, Clone, Default)]
pub struct OraclePredictor {
    gold: HashMap<String, Vec<char>>,
}

impl OraclePredictor {
    pub fn new(instances: &[ProbingInstance]) -> Self {
        Self {
            gold: instances.iter().map(|i| (i.id.clone(), i.gold.clone())).collect(),
        }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, query: &ProbeQuery) -> Result<ProbeResponse, String> {
        let gold = self
            .gold
            .get(&query.id)
            .ok_or_else(|| format!("no gold for {}", query.id))?;
        if gold.len() != query.masked_positions.len() {
            return Err(format!(
                "{} has {} gold characters but {} masks",
                query.id,
                gold.len(),
                query.masked_positions.len()
            ));
        }
        let predictions = gold
            .iter()
            .map(|&g| {
                let fillers = (0x4E00u32..)
                    .filter_map(char::from_u32)
                    .filter(move |&c| c != g)
                    .map(|c| (c, 0.0));
                std::iter::once((g, 1.0)).chain(fillers).take(query.k).collect()
            })
            .collect();
        Ok(ProbeResponse {
            id: query.id.clone(),
            predictions,
        })
    }
}

/// Returns `k` distinct characters drawn uniformly from a fixed alphabet.
/// Draws depend only on the seed and the query id.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    alphabet: Vec<char>,
    seed: u64,
}

impl UniformPredictor {
    pub fn new(alphabet: Vec<char>, seed: u64) -> Self {
        Self { alphabet, seed }
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Predictor for UniformPredictor {
    fn predict(&self, query: &ProbeQuery) -> Result<ProbeResponse, String> {
        if query.k > self.alphabet.len() {
            return Err(format!("k = {} exceeds alphabet size {}", query.k, self.alphabet.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(query.id.as_bytes()));
        let score = 1.0 / self.alphabet.len() as f64;
        let predictions = query
            .masked_positions
            .iter()
            .map(|_| {
                index::sample(&mut rng, self.alphabet.len(), query.k)
                    .into_iter()
                    .map(|i| (self.alphabet[i], score))
                    .collect()
            })
            .collect();
        Ok(ProbeResponse {
            id: query.id.clone(),
            predictions,
        })
    }
}
