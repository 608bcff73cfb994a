//! End-to-end retrieval: cache lookup, constrained decoding on a miss, and
//! ad resolution through the inverted index.

use std::collections::VecDeque;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::ad_index::{assign_cis_to_ad, Ad, AdHit, Aggregation, IndexManifest, IndexOp, InvertedIndex};
use crate::ci_trie::{CiId, CiRecord, CiTrie, TrieBuildOptions};
use crate::config::{manifest_path, EngineConfig};
use crate::decoder::{constrained_beam_search_until, DecodeParams, ScoredCi};
use crate::error::{Error, Result, Stage};
use crate::jsonl::{self, annotate};
use crate::query_cache::{normalize_query, CacheManifest, CacheSnapshot, CacheStats, CacheStatsView};
use crate::scorer::{NgramScorer, Scorer};
use crate::vocab::{TokenSeq, TokenizationScheme, Vocabulary};

/// Trie, index and cache that belong together. Swapped as one unit so a
/// request never mixes versions.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub trie: Arc<CiTrie>,
    pub index: Arc<InvertedIndex>,
    pub cache: Arc<CacheSnapshot>,
}

impl EngineState {
    pub fn new(trie: Arc<CiTrie>, index: Arc<InvertedIndex>, cache: Arc<CacheSnapshot>) -> Result<Self> {
        if index.trie_version() != trie.version() {
            return Err(Error::config("index and intent trie versions differ"));
        }
        if cache.trie_version != trie.version() && !cache.is_empty() {
            return Err(Error::config("cache and intent trie versions differ"));
        }
        Ok(EngineState { trie, index, cache })
    }
}

/// Decoding and ranking settings used at request time.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeSettings {
    pub online: DecodeParams,
    pub offline: DecodeParams,
    pub top_k: usize,
    pub latency_budget_ms: f64,
    pub enforce_latency_budget: bool,
    pub aggregation: Aggregation,
    pub assign_cap: usize,
}

impl From<&EngineConfig> for RuntimeSettings {
    fn from(c: &EngineConfig) -> Self {
        RuntimeSettings {
            online: c.online,
            offline: c.offline,
            top_k: c.top_k,
            latency_budget_ms: c.latency_budget_ms,
            enforce_latency_budget: c.enforce_latency_budget,
            aggregation: c.aggregation,
            assign_cap: c.assign_cap,
        }
    }
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        (&EngineConfig::default()).into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCi {
    pub text: String,
    pub ci_id: CiId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub cache_ms: f64,
    pub decode_ms: f64,
    pub lookup_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub cis: Vec<RetrievedCi>,
    pub ads: Vec<AdHit>,
    pub cache_hit: bool,
    pub latency_ms: f64,
    pub stage_ms: StageTimings,
    /// Decoding stopped at the latency budget.
    #[serde(default)]
    pub budget_exceeded: bool,
    pub index_version: u64,
    pub trie_version: u64,
}

impl RetrievalResult {
    /// Equal ignoring wall-clock measurements.
    pub fn same_answer(&self, other: &RetrievalResult) -> bool {
        self.query == other.query
            && self.cis == other.cis
            && self.ads == other.ads
            && self.cache_hit == other.cache_hit
            && self.budget_exceeded == other.budget_exceeded
            && self.index_version == other.index_version
            && self.trie_version == other.trie_version
    }
}

/// Bounded window of recent request latencies.
#[derive(Debug)]
pub struct LatencyWindow {
    samples: Mutex<VecDeque<f64>>,
    cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl LatencyWindow {
    pub fn new(cap: usize) -> Self {
        LatencyWindow { samples: Mutex::new(VecDeque::with_capacity(cap)), cap }
    }

    pub fn record(&self, ms: f64) {
        let mut s = self.samples.lock();
        if s.len() == self.cap {
            s.pop_front();
        }
        s.push_back(ms);
    }

    pub fn summary(&self) -> LatencySummary {
        let mut v: Vec<f64> = self.samples.lock().iter().copied().collect();
        v.sort_by(f64::total_cmp);
        LatencySummary {
            count: v.len(),
            p50_ms: percentile(&v, 0.50),
            p95_ms: percentile(&v, 0.95),
            p99_ms: percentile(&v, 0.99),
        }
    }
}

/// Nearest-rank percentile of sorted samples; 0 for an empty slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub struct Engine {
    vocab: Arc<Vocabulary>,
    query_scorer: Arc<dyn Scorer>,
    ad_scorer: Arc<dyn Scorer>,
    state: crate::snapshot::SnapshotCell<EngineState>,
    settings: RuntimeSettings,
    cache_stats: CacheStats,
    latencies: LatencyWindow,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.state.load();
        f.debug_struct("Engine")
            .field("vocab_size", &self.vocab.len())
            .field("intents", &st.trie.len())
            .field("index_version", &st.index.version())
            .field("cached_queries", &st.cache.len())
            .finish()
    }
}

impl Engine {
    pub fn new(
        vocab: Arc<Vocabulary>,
        query_scorer: Arc<dyn Scorer>,
        ad_scorer: Arc<dyn Scorer>,
        state: EngineState,
        settings: RuntimeSettings,
    ) -> Result<Self> {
        settings.online.validate()?;
        settings.offline.validate()?;
        if settings.top_k < 1 {
            return Err(Error::config("top_k must be at least 1"));
        }
        Ok(Engine {
            vocab,
            query_scorer,
            ad_scorer,
            state: crate::snapshot::SnapshotCell::new(state),
            settings,
            cache_stats: CacheStats::default(),
            latencies: LatencyWindow::new(10_000),
        })
    }

    /// Load every artifact named in `config` (paths already resolved).
    pub fn load(config: &EngineConfig) -> Result<Self> {
        config.validate()?;
        let p = &config.paths;
        let vocab = Arc::new(load_vocab(&p.vocab, config.tokenization)?);
        let trie = Arc::new(load_trie(&p.ci_set, &vocab)?);
        let query_scorer: Arc<dyn Scorer> = Arc::new(load_scorer(&p.scorer)?);
        let ad_scorer: Arc<dyn Scorer> = match &p.ad_scorer {
            Some(path) => Arc::new(load_scorer(path)?),
            None => query_scorer.clone(),
        };
        let index = Arc::new(load_index(&p.index, &trie)?);
        let cache = if p.cache.exists() {
            Arc::new(load_cache(&p.cache, &trie)?)
        } else {
            Arc::new(CacheSnapshot::empty(trie.version()))
        };
        let state = EngineState::new(trie, index, cache)?;
        Engine::new(vocab, query_scorer, ad_scorer, state, config.into())
    }

    pub fn settings(&self) -> &RuntimeSettings {
        &self.settings
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn state(&self) -> Arc<EngineState> {
        self.state.load()
    }

    pub fn query_scorer(&self) -> &Arc<dyn Scorer> {
        &self.query_scorer
    }

    pub fn ad_scorer(&self) -> &Arc<dyn Scorer> {
        &self.ad_scorer
    }

    pub fn cache_stats(&self) -> CacheStatsView {
        self.cache_stats.view()
    }

    pub fn latency_summary(&self) -> LatencySummary {
        self.latencies.summary()
    }

    pub fn retrieve(&self, query: &str, top_k: usize) -> Result<RetrievalResult> {
        let started = Instant::now();
        let fail = |stage, e| Error::Retrieval { stage, source: Box::new(e) };
        if top_k < 1 {
            return Err(fail(Stage::Normalize, Error::invalid("top_k must be at least 1")));
        }
        let normalized = normalize_query(query);
        if normalized.is_empty() {
            return Err(fail(Stage::Normalize, Error::invalid("query is empty")));
        }
        let state = self.state.load();
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let cached = state.cache.entry(&normalized).map(<[ScoredCi]>::to_vec);
        self.cache_stats.record(cached.is_some());
        timings.cache_ms = ms(t.elapsed());

        let cache_hit = cached.is_some();
        let mut budget_exceeded = false;
        let decoded = match cached {
            Some(cis) => cis,
            None => {
                let t = Instant::now();
                let deadline = self
                    .settings
                    .enforce_latency_budget
                    .then(|| started + Duration::from_secs_f64(self.settings.latency_budget_ms / 1000.0));
                let out = constrained_beam_search_until(
                    &*self.query_scorer,
                    &state.trie,
                    &normalized,
                    &self.settings.online,
                    deadline,
                )
                .map_err(|e| fail(Stage::Decode, e))?;
                timings.decode_ms = ms(t.elapsed());
                budget_exceeded = out.deadline_hit;
                out.cis
            }
        };

        let t = Instant::now();
        let ads = state.index.lookup(&decoded, top_k, self.settings.aggregation);
        let cis = decoded
            .iter()
            .map(|c| {
                let text = state
                    .trie
                    .text(c.ci_id)
                    .ok_or_else(|| fail(Stage::Lookup, Error::invalid(format!("unknown ci_id {}", c.ci_id))))?;
                Ok(RetrievedCi { text: text.to_owned(), ci_id: c.ci_id, score: c.score })
            })
            .collect::<Result<Vec<_>>>()?;
        timings.lookup_ms = ms(t.elapsed());

        let latency_ms = ms(started.elapsed());
        self.latencies.record(latency_ms);
        Ok(RetrievalResult {
            query: query.to_owned(),
            cis,
            ads,
            cache_hit,
            latency_ms,
            stage_ms: timings,
            budget_exceeded,
            index_version: state.index.version(),
            trie_version: state.trie.version(),
        })
    }

    /// Assign intents to new ads with the ad-side scorer and publish them as
    /// one index version.
    pub fn add_ads(&self, ads: &[Ad]) -> Result<Arc<InvertedIndex>> {
        let st = self.state.load();
        let mut ops = Vec::with_capacity(ads.len());
        for ad in ads {
            let cis = assign_cis_to_ad(ad, &*self.ad_scorer, &st.trie, &self.settings.offline, self.settings.assign_cap)?;
            ops.push(IndexOp::Add { ad_id: ad.ad_id.clone(), cis: cis.iter().map(|c| c.ci_id).collect() });
        }
        self.apply_index_ops(&ops)
    }

    pub fn apply_index_ops(&self, ops: &[IndexOp]) -> Result<Arc<InvertedIndex>> {
        let next = self.state.update(|cur| {
            let index = Arc::new(cur.index.apply_batch(ops)?);
            Ok::<_, Error>(EngineState { index, ..cur.clone() })
        })?;
        Ok(next.index.clone())
    }

    pub fn swap_cache(&self, cache: CacheSnapshot) -> Result<()> {
        self.state.update(|cur| EngineState::new(cur.trie.clone(), cur.index.clone(), Arc::new(cache)))?;
        Ok(())
    }

    /// Replace the whole intent set together with an index and cache built
    /// for it.
    pub fn swap_intent_set(&self, state: EngineState) -> Result<()> {
        EngineState::new(state.trie.clone(), state.index.clone(), state.cache.clone())?;
        self.state.store(state);
        Ok(())
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub context: String,
    pub ci: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadQueryRecord {
    pub query: String,
    pub freq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub ad_id: String,
    pub ci_ids: Vec<CiId>,
}

pub fn load_vocab(path: &Path, scheme: TokenizationScheme) -> Result<Vocabulary> {
    let f = File::open(path).map_err(|e| annotate(e, path))?;
    Vocabulary::read_from(BufReader::new(f), scheme)
}

/// Load a built intent set (explicit ids).
pub fn load_trie(path: &Path, vocab: &Vocabulary) -> Result<CiTrie> {
    let records: Vec<CiRecord> = jsonl::read_path(path)?;
    Ok(CiTrie::from_records(&records, vocab, TrieBuildOptions::default())?.0)
}

pub fn load_scorer(path: &Path) -> Result<NgramScorer> {
    let f = File::open(path).map_err(|e| annotate(e, path))?;
    NgramScorer::read_from(BufReader::new(f))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| annotate(e, path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Format { line: 0, reason: e.to_string() })
}

pub fn load_index(path: &Path, trie: &CiTrie) -> Result<InvertedIndex> {
    let manifest: IndexManifest = read_json(&manifest_path(path))?;
    let f = File::open(path).map_err(|e| annotate(e, path))?;
    InvertedIndex::read_postings(BufReader::new(f), &manifest, trie)
}

pub fn load_cache(path: &Path, trie: &CiTrie) -> Result<CacheSnapshot> {
    let manifest: CacheManifest = read_json(&manifest_path(path))?;
    let f = File::open(path).map_err(|e| annotate(e, path))?;
    CacheSnapshot::read_entries(BufReader::new(f), &manifest, trie)
}

/// Tokenize training pairs against `vocab`. Pairs whose intent does not
/// tokenize cleanly are rejected.
pub fn tokenize_pairs(pairs: &[PairRecord], vocab: &Vocabulary) -> Result<Vec<(String, TokenSeq)>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let seq = vocab.tokenize(&p.ci).map_err(|e| Error::Format { line: i + 1, reason: e.to_string() })?;
            if seq.has_reserved() {
                return Err(Error::Format { line: i + 1, reason: format!("intent {:?} has out-of-vocabulary tokens", p.ci) });
            }
            Ok((p.context.clone(), seq))
        })
        .collect()
}
