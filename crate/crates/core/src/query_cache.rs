//! Exact-match cache of decoded intents for head queries.
//!
//! Snapshots are produced offline by [`warm_cache`] with the wide decoding
//! profile and are immutable afterwards; hit accounting lives in
//! [`CacheStats`], which outlives snapshot swaps.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::ci_trie::CiTrie;
use crate::decoder::{constrained_beam_search, DecodeParams, ScoredCi};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scorer::Scorer;

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_query(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheSnapshot {
    entries: HashMap<String, Vec<ScoredCi>>,
    pub profile: String,
    pub trie_version: u64,
    /// Unix seconds.
    pub built_at: u64,
}

impl CacheSnapshot {
    pub fn empty(trie_version: u64) -> Self {
        CacheSnapshot { entries: HashMap::new(), profile: String::new(), trie_version, built_at: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lookup by already-normalized query, without touching stats.
    pub fn entry(&self, normalized: &str) -> Option<&[ScoredCi]> {
        self.entries.get(normalized).map(Vec::as_slice)
    }

    /// Entries sorted by query.
    pub fn entries(&self) -> Vec<(&str, &[ScoredCi])> {
        let mut v: Vec<_> = self.entries.iter().map(|(q, c)| (q.as_str(), c.as_slice())).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn get(&self, query: &str, stats: &CacheStats) -> Option<&[ScoredCi]> {
        let hit = self.entry(&normalize_query(query));
        stats.record(hit.is_some());
        hit
    }

    pub fn manifest(&self) -> CacheManifest {
        CacheManifest {
            profile: self.profile.clone(),
            trie_version: self.trie_version,
            built_at: self.built_at,
            entries: self.entries.len(),
        }
    }

    pub fn write_entries<W: Write>(&self, w: W) -> Result<()> {
        jsonl::write(
            w,
            self.entries().into_iter().map(|(q, cis)| CacheRecord { query: q.to_owned(), cis: cis.to_vec() }),
        )
    }

    pub fn read_entries<R: BufRead>(r: R, manifest: &CacheManifest, trie: &CiTrie) -> Result<Self> {
        if manifest.trie_version != trie.version() {
            return Err(Error::config(format!(
                "cache was warmed for intent set {:016x}, loaded set is {:016x}",
                manifest.trie_version,
                trie.version()
            )));
        }
        let mut entries = HashMap::new();
        for (i, rec) in jsonl::read::<CacheRecord, _>(r)?.into_iter().enumerate() {
            if let Some(bad) = rec.cis.iter().find(|c| trie.seq(c.ci_id).is_none()) {
                return Err(Error::Format { line: i + 1, reason: format!("unknown ci_id {}", bad.ci_id) });
            }
            if entries.insert(rec.query.clone(), rec.cis).is_some() {
                return Err(Error::Format { line: i + 1, reason: format!("duplicate query {:?}", rec.query) });
            }
        }
        Ok(CacheSnapshot {
            entries,
            profile: manifest.profile.clone(),
            trie_version: manifest.trie_version,
            built_at: manifest.built_at,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub query: String,
    pub cis: Vec<ScoredCi>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub profile: String,
    pub trie_version: u64,
    pub built_at: u64,
    pub entries: usize,
}

/// Lock-free hit/miss counters. `lookups` is derived, so
/// `hits + misses == lookups` holds for every read.
#[derive(Debug, Default)]
pub struct CacheStats {
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheStatsView {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
}

impl CacheStats {
    pub fn record(&self, hit: bool) {
        let c = if hit { &self.hits } else { &self.misses };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn view(&self) -> CacheStatsView {
        let hits = self.hits.load(Ordering::Relaxed);
        let misses = self.misses.load(Ordering::Relaxed);
        let lookups = hits + misses;
        let hit_rate = if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 };
        CacheStatsView { lookups, hits, misses, hit_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarmOptions {
    /// Queries whose summed frequency is below this are not cached.
    pub min_freq: u64,
    pub profile: String,
    pub built_at: u64,
}

impl Default for WarmOptions {
    fn default() -> Self {
        WarmOptions { min_freq: 1, profile: "offline".into(), built_at: 0 }
    }
}

#[derive(Debug)]
pub struct WarmReport {
    pub snapshot: CacheSnapshot,
    /// Queries that failed to decode, with the error text.
    pub failures: Vec<(String, String)>,
    pub below_threshold: usize,
}

/// Decode every head query at or above the frequency threshold and store the
/// result. Per-query failures are reported and skipped.
pub fn warm_cache<S: Scorer + ?Sized>(
    head_queries: &[(String, u64)],
    scorer: &S,
    trie: &CiTrie,
    params: &DecodeParams,
    opts: &WarmOptions,
) -> Result<WarmReport> {
    if head_queries.is_empty() {
        return Err(Error::config("no head queries to warm"));
    }
    params.validate()?;
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    let mut failures = Vec::new();
    for (q, f) in head_queries {
        let n = normalize_query(q);
        if n.is_empty() {
            failures.push((q.clone(), "empty query".to_owned()));
            continue;
        }
        *freq.entry(n).or_insert(0) += f;
    }
    let mut entries = HashMap::new();
    let mut below_threshold = 0;
    for (q, f) in freq {
        if f < opts.min_freq {
            below_threshold += 1;
            continue;
        }
        match constrained_beam_search(scorer, trie, &q, params) {
            Ok(cis) => {
                entries.insert(q, cis);
            }
            Err(e) => failures.push((q, e.to_string())),
        }
    }
    let snapshot = CacheSnapshot {
        entries,
        profile: opts.profile.clone(),
        trie_version: trie.version(),
        built_at: opts.built_at,
    };
    Ok(WarmReport { snapshot, failures, below_threshold })
}

/// All ids stored in the snapshot resolve in `trie`.
pub fn validate_against(snapshot: &CacheSnapshot, trie: &CiTrie) -> bool {
    snapshot.trie_version == trie.version()
        && snapshot.entries.values().flatten().all(|c: &ScoredCi| trie.seq(c.ci_id).is_some())
}
