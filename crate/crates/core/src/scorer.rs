//! Next-token scoring models.
//!
//! A [`Scorer`] returns the untempered log-distribution over the full id
//! space (reserved ids included) given a context text and a token prefix.
//! Two implementations live here: [`NgramScorer`], a count-based model fitted
//! by maximum likelihood from (context, intent) pairs, and [`TableScorer`], an
//! explicit lookup table used as a deterministic oracle in tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, TokenizationScheme};

/// Normalization slack allowed for a stored or returned distribution.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A log-distribution over `vocab_size` ids. Ids absent from `entries` all
/// carry `fill`; when every id is listed `fill` is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist {
    vocab_size: usize,
    entries: Vec<(TokenId, f64)>,
    fill: f64,
}

impl NextTokenDist {
    pub fn dense(logprobs: Vec<f64>) -> Self {
        let vocab_size = logprobs.len();
        let entries = logprobs
            .into_iter()
            .enumerate()
            .map(|(i, lp)| (TokenId(i as u32), lp))
            .collect();
        NextTokenDist { vocab_size, entries, fill: f64::NEG_INFINITY }
    }

    /// `entries` must be sorted by id and unique.
    pub fn sparse(vocab_size: usize, entries: Vec<(TokenId, f64)>, fill: f64) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        NextTokenDist { vocab_size, entries, fill }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        NextTokenDist { vocab_size, entries: Vec::new(), fill: -(vocab_size as f64).ln() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }

    /// Number of ids that take the fill value.
    pub fn fill_count(&self) -> usize {
        self.vocab_size - self.entries.len()
    }

    #[inline]
    pub fn logprob(&self, id: TokenId) -> f64 {
        if self.entries.len() == self.vocab_size {
            return self.entries[id.index()].1;
        }
        match self.entries.binary_search_by_key(&id, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => self.fill,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.vocab_size).map(|i| self.logprob(TokenId(i as u32))).collect()
    }

    /// `log Σ exp(lp / temperature)` over the whole id space.
    pub fn log_normalizer(&self, temperature: f64) -> f64 {
        tempered_log_normalizer(
            self.entries.iter().map(|e| e.1),
            self.fill,
            self.fill_count(),
            temperature,
        )
    }
}

/// Max-shifted `log(Σ exp(v/τ) + count · exp(fill/τ))`.
pub(crate) fn tempered_log_normalizer<I>(values: I, fill: f64, fill_count: usize, temperature: f64) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let mut max = f64::NEG_INFINITY;
    for v in values.clone() {
        max = max.max(v / temperature);
    }
    if fill_count > 0 {
        max = max.max(fill / temperature);
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for v in values {
        sum += (v / temperature - max).exp();
    }
    if fill_count > 0 {
        sum += fill_count as f64 * (fill / temperature - max).exp();
    }
    max + sum.ln()
}

pub trait Scorer: Send + Sync {
    /// Size of the id space the distributions range over.
    fn vocab_size(&self) -> usize;

    fn next_dist(&self, context: &str, prefix: &[TokenId]) -> Result<NextTokenDist>;

    fn next_logprobs(&self, context: &str, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_dist(context, prefix)?.to_dense())
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_dist(&self, context: &str, prefix: &[TokenId]) -> Result<NextTokenDist> {
        (**self).next_dist(context, prefix)
    }
}

/// Untempered log-probability of `seq` followed by the terminator.
pub fn sequence_logprob<S: Scorer + ?Sized>(scorer: &S, context: &str, seq: &[TokenId]) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::invalid("sequence_logprob needs a non-empty sequence"));
    }
    let end = scorer.next_dist(context, seq)?.logprob(TokenId::END);
    Ok(prefix_logprob(scorer, context, seq)? + end)
}

/// Summed per-step log-probability of the tokens of `prefix`, without the
/// terminator term.
pub fn prefix_logprob<S: Scorer + ?Sized>(scorer: &S, context: &str, prefix: &[TokenId]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..prefix.len() {
        total += scorer.next_dist(context, &prefix[..t])?.logprob(prefix[t]);
    }
    Ok(total)
}

fn check_normalized(lp: &[f64], what: &str) -> Result<()> {
    let mass: f64 = lp.iter().map(|v| v.exp()).sum();
    if lp.iter().any(|&v| v > 0.0 || v.is_nan()) || (mass - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("{what} is not a log-distribution (mass {mass})")));
    }
    Ok(())
}

/// Explicit `(context, prefix) → distribution` table with a default.
#[derive(Debug, Clone)]
pub struct TableScorer {
    vocab_size: usize,
    default: Vec<f64>,
    table: HashMap<(String, Vec<TokenId>), Vec<f64>>,
}

impl TableScorer {
    pub fn new(default: Vec<f64>) -> Result<Self> {
        if default.is_empty() {
            return Err(Error::config("default distribution is empty"));
        }
        check_normalized(&default, "default distribution")?;
        Ok(TableScorer { vocab_size: default.len(), default, table: HashMap::new() })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        let lp = -(vocab_size as f64).ln();
        TableScorer { vocab_size, default: vec![lp; vocab_size], table: HashMap::new() }
    }

    pub fn insert(&mut self, context: &str, prefix: &[TokenId], logprobs: Vec<f64>) -> Result<()> {
        if logprobs.len() != self.vocab_size {
            return Err(Error::invalid(format!(
                "distribution has {} entries, expected {}",
                logprobs.len(),
                self.vocab_size
            )));
        }
        check_normalized(&logprobs, "table entry")?;
        self.table.insert((context.to_owned(), prefix.to_vec()), logprobs);
        Ok(())
    }
}

impl Scorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &str, prefix: &[TokenId]) -> Result<NextTokenDist> {
        // Key construction allocates; table scorers are test-scale.
        let row = self
            .table
            .get(&(context.to_owned(), prefix.to_vec()))
            .unwrap_or(&self.default);
        Ok(NextTokenDist::dense(row.clone()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct CountTable {
    /// Sorted by id.
    counts: Vec<(TokenId, u32)>,
    total: u64,
}

impl CountTable {
    fn from_map(m: BTreeMap<TokenId, u32>) -> Self {
        let total = m.values().map(|&c| c as u64).sum();
        CountTable { counts: m.into_iter().collect(), total }
    }

    fn count(&self, id: TokenId) -> u32 {
        match self.counts.binary_search_by_key(&id, |e| e.0) {
            Ok(i) => self.counts[i].1,
            Err(_) => 0,
        }
    }
}

type History = Vec<TokenId>;
type HistoryTables = HashMap<History, CountTable>;

/// Which conditioning bucket a count table belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "key", rename_all = "snake_case")]
enum Bucket {
    Unconditional,
    Query(String),
    Word(String),
}

/// Add-alpha smoothed n-gram model over intent tokens, conditioned on the
/// context text.
///
/// `order` is the number of preceding tokens a prediction conditions on;
/// positions before the start are padded with the terminator id. Lookup order
/// for a `(context, history)` pair:
///
/// 1. the exact normalized context, if it was seen with this history;
/// 2. otherwise an equal-weight mixture over the context's words that were
///    seen with this history;
/// 3. otherwise the context-free table for the history;
/// 4. otherwise uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramScorer {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    scheme: TokenizationScheme,
    unconditional: HistoryTables,
    by_query: HashMap<String, HistoryTables>,
    by_word: HashMap<String, HistoryTables>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub order: usize,
    pub alpha: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig { order: 2, alpha: 0.1 }
    }
}

fn history_of(prefix: &[TokenId], order: usize) -> History {
    let mut h = vec![TokenId::END; order];
    let take = prefix.len().min(order);
    h[order - take..].copy_from_slice(&prefix[prefix.len() - take..]);
    h
}

fn context_words(normalized: &str) -> BTreeSet<String> {
    normalized.split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

impl NgramScorer {
    pub fn fit(
        pairs: &[(String, TokenSeq)],
        config: NgramConfig,
        vocab_size: usize,
        scheme: TokenizationScheme,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("no training pairs"));
        }
        if config.order < 1 {
            return Err(Error::config("n-gram order must be at least 1"));
        }
        if !(config.alpha > 0.0 && config.alpha.is_finite()) {
            return Err(Error::config(format!("smoothing alpha must be positive, got {}", config.alpha)));
        }

        let mut acc: BTreeMap<(Bucket, History), BTreeMap<TokenId, u32>> = BTreeMap::new();
        for (context, seq) in pairs {
            if seq.is_empty() {
                return Err(Error::invalid(format!("empty intent sequence for context {context:?}")));
            }
            if let Some(bad) = seq.iter().find(|t| t.is_reserved() || t.index() >= vocab_size) {
                return Err(Error::invalid(format!("intent sequence contains invalid id {bad}")));
            }
            let normalized = scheme.normalize(context);
            let mut buckets = vec![Bucket::Unconditional];
            if !normalized.is_empty() {
                buckets.push(Bucket::Query(normalized.clone()));
                buckets.extend(context_words(&normalized).into_iter().map(Bucket::Word));
            }
            for t in 0..=seq.len() {
                let next = seq.get(t).copied().unwrap_or(TokenId::END);
                let h = history_of(&seq[..t], config.order);
                for b in &buckets {
                    *acc.entry((b.clone(), h.clone())).or_default().entry(next).or_insert(0) += 1;
                }
            }
        }

        let mut scorer = NgramScorer {
            order: config.order,
            alpha: config.alpha,
            vocab_size,
            scheme,
            unconditional: HashMap::new(),
            by_query: HashMap::new(),
            by_word: HashMap::new(),
        };
        for ((bucket, h), counts) in acc {
            scorer.insert_table(bucket, h, CountTable::from_map(counts));
        }
        Ok(scorer)
    }

    fn insert_table(&mut self, bucket: Bucket, h: History, table: CountTable) {
        let tables = match bucket {
            Bucket::Unconditional => &mut self.unconditional,
            Bucket::Query(q) => self.by_query.entry(q).or_default(),
            Bucket::Word(w) => self.by_word.entry(w).or_default(),
        };
        tables.insert(h, table);
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn denom(&self, t: &CountTable) -> f64 {
        t.total as f64 + self.alpha * self.vocab_size as f64
    }

    fn smoothed(&self, t: &CountTable) -> NextTokenDist {
        let denom = self.denom(t);
        let entries = t
            .counts
            .iter()
            .map(|&(id, c)| (id, ((c as f64 + self.alpha) / denom).ln()))
            .collect();
        NextTokenDist::sparse(self.vocab_size, entries, (self.alpha / denom).ln())
    }

    fn mixture(&self, tables: &[&CountTable]) -> NextTokenDist {
        let weight = 1.0 / tables.len() as f64;
        let ids: BTreeSet<TokenId> = tables.iter().flat_map(|t| t.counts.iter().map(|e| e.0)).collect();
        let entries = ids
            .into_iter()
            .map(|id| {
                let p: f64 = tables
                    .iter()
                    .map(|t| (t.count(id) as f64 + self.alpha) / self.denom(t))
                    .sum();
                (id, (weight * p).ln())
            })
            .collect();
        let fill: f64 = tables.iter().map(|t| self.alpha / self.denom(t)).sum();
        NextTokenDist::sparse(self.vocab_size, entries, (weight * fill).ln())
    }

    /// Dump as line-delimited JSON: a header record, then one record per
    /// count table in sorted order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = NgramHeader {
            format: NGRAM_FORMAT.to_owned(),
            order: self.order,
            alpha: self.alpha,
            vocab_size: self.vocab_size,
            scheme: self.scheme,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        let mut rows: Vec<(Bucket, &History, &CountTable)> = Vec::new();
        rows.extend(self.unconditional.iter().map(|(h, t)| (Bucket::Unconditional, h, t)));
        for (q, tables) in &self.by_query {
            rows.extend(tables.iter().map(|(h, t)| (Bucket::Query(q.clone()), h, t)));
        }
        for (word, tables) in &self.by_word {
            rows.extend(tables.iter().map(|(h, t)| (Bucket::Word(word.clone()), h, t)));
        }
        rows.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        for (bucket, h, t) in rows {
            let rec = NgramRecord {
                bucket,
                history: h.iter().map(|t| t.0).collect(),
                counts: t.counts.iter().map(|&(id, c)| (id.0, c)).collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Format { line: 1, reason: "missing header".into() })?;
        let header: NgramHeader =
            serde_json::from_str(&first?).map_err(|e| Error::Format { line: 1, reason: e.to_string() })?;
        if header.format != NGRAM_FORMAT {
            return Err(Error::Format { line: 1, reason: format!("unsupported format {:?}", header.format) });
        }
        let mut scorer = NgramScorer {
            order: header.order,
            alpha: header.alpha,
            vocab_size: header.vocab_size,
            scheme: header.scheme,
            unconditional: HashMap::new(),
            by_query: HashMap::new(),
            by_word: HashMap::new(),
        };
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: NgramRecord =
                serde_json::from_str(&line).map_err(|e| Error::Format { line: i + 1, reason: e.to_string() })?;
            if rec.history.len() != scorer.order {
                return Err(Error::Format { line: i + 1, reason: "history length differs from order".into() });
            }
            let counts: BTreeMap<TokenId, u32> = rec.counts.into_iter().map(|(id, c)| (TokenId(id), c)).collect();
            let h = rec.history.into_iter().map(TokenId).collect();
            scorer.insert_table(rec.bucket, h, CountTable::from_map(counts));
        }
        Ok(scorer)
    }
}

const NGRAM_FORMAT: &str = "ngram-counts-v1";

#[derive(Serialize, Deserialize)]
struct NgramHeader {
    format: String,
    order: usize,
    alpha: f64,
    vocab_size: usize,
    scheme: TokenizationScheme,
}

#[derive(Serialize, Deserialize)]
struct NgramRecord {
    bucket: Bucket,
    history: Vec<u32>,
    counts: Vec<(u32, u32)>,
}

impl Scorer for NgramScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &str, prefix: &[TokenId]) -> Result<NextTokenDist> {
        let h = history_of(prefix, self.order);
        let normalized = self.scheme.normalize(context);

        if let Some(t) = self.by_query.get(&normalized).and_then(|m| m.get(&h)) {
            return Ok(self.smoothed(t));
        }
        let word_tables: Vec<&CountTable> = context_words(&normalized)
            .iter()
            .filter_map(|w| self.by_word.get(w).and_then(|m| m.get(&h)))
            .collect();
        if !word_tables.is_empty() {
            return Ok(self.mixture(&word_tables));
        }
        if let Some(t) = self.unconditional.get(&h) {
            return Ok(self.smoothed(t));
        }
        Ok(NextTokenDist::uniform(self.vocab_size))
    }
}
