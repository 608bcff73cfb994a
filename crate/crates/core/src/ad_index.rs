//! Intent-to-ad inverted index.
//!
//! [`InvertedIndex`] is a persistent value: every mutation returns a new
//! index with a higher version and shares structure with the old one, so
//! readers holding a previous version are never disturbed. [`AdIndex`] wraps
//! the current version in a [`SnapshotCell`] and queues updates for batched
//! application.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use im::{OrdMap, OrdSet};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::ci_trie::{CiId, CiTrie};
use crate::decoder::{constrained_beam_search, DecodeParams, ScoredCi};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scorer::Scorer;
use crate::snapshot::SnapshotCell;

/// Default number of intents kept per ad.
pub const DEFAULT_CAP: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ad {
    pub ad_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landing_page: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub materials: Option<String>,
}

impl Ad {
    /// Decoding context: title followed by delivery materials.
    pub fn context(&self) -> String {
        match self.materials.as_deref() {
            Some(m) if !m.trim().is_empty() => format!("{} {}", self.title, m),
            _ => self.title.clone(),
        }
    }
}

/// Decode intents for an ad and keep the best `cap`.
pub fn assign_cis_to_ad<S: Scorer + ?Sized>(
    ad: &Ad,
    scorer: &S,
    trie: &CiTrie,
    params: &DecodeParams,
    cap: usize,
) -> Result<Vec<ScoredCi>> {
    let wrap = |e: Error| Error::Assignment { ad_id: ad.ad_id.clone(), source: Box::new(e) };
    if cap < 1 {
        return Err(wrap(Error::config("assignment cap must be at least 1")));
    }
    if ad.ad_id.is_empty() {
        return Err(Error::invalid("ad_id is empty"));
    }
    let mut cis = constrained_beam_search(scorer, trie, &ad.context(), params).map_err(wrap)?;
    if cis.is_empty() {
        return Err(wrap(Error::invalid("decoding produced no intent within max_len")));
    }
    cis.truncate(cap);
    Ok(cis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Best matched intent score; near-duplicate intents do not stack.
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdHit {
    pub ad_id: String,
    pub score: f64,
    pub matched_ci_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexOp {
    Add { ad_id: String, cis: Vec<CiId> },
    Remove { ad_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedIndex {
    postings: OrdMap<CiId, OrdSet<String>>,
    ad_to_cis: OrdMap<String, OrdSet<CiId>>,
    version: u64,
    trie_version: u64,
    ci_count: usize,
}

impl InvertedIndex {
    pub fn empty(trie: &CiTrie) -> Self {
        InvertedIndex {
            postings: OrdMap::new(),
            ad_to_cis: OrdMap::new(),
            version: 1,
            trie_version: trie.version(),
            ci_count: trie.len(),
        }
    }

    pub fn build(assignments: &[(String, Vec<CiId>)], trie: &CiTrie) -> Result<Self> {
        let mut idx = Self::empty(trie);
        for (ad_id, cis) in assignments {
            idx.insert(ad_id, cis).map_err(|reason| Error::IndexBuild { ad_id: ad_id.clone(), reason })?;
        }
        Ok(idx)
    }

    fn insert(&mut self, ad_id: &str, cis: &[CiId]) -> std::result::Result<(), String> {
        if ad_id.is_empty() {
            return Err("empty ad_id".into());
        }
        if self.ad_to_cis.contains_key(ad_id) {
            return Err("ad listed twice".into());
        }
        if let Some(bad) = cis.iter().find(|c| c.index() >= self.ci_count) {
            return Err(format!("ci_id {bad} is not in the bound intent set of {} intents", self.ci_count));
        }
        let set: OrdSet<CiId> = cis.iter().copied().collect();
        for &ci in &set {
            self.postings.entry(ci).or_default().insert(ad_id.to_owned());
        }
        self.ad_to_cis.insert(ad_id.to_owned(), set);
        Ok(())
    }

    fn delete(&mut self, ad_id: &str) -> bool {
        let Some(cis) = self.ad_to_cis.remove(ad_id) else { return false };
        for ci in cis {
            if let Some(set) = self.postings.get_mut(&ci) {
                set.remove(ad_id);
                if set.is_empty() {
                    self.postings.remove(&ci);
                }
            }
        }
        true
    }

    pub fn add_ad(&self, ad_id: &str, cis: &[CiId]) -> Result<Self> {
        self.apply_batch(&[IndexOp::Add { ad_id: ad_id.to_owned(), cis: cis.to_vec() }])
    }

    pub fn remove_ad(&self, ad_id: &str) -> Result<Self> {
        self.apply_batch(&[IndexOp::Remove { ad_id: ad_id.to_owned() }])
    }

    /// Apply `ops` in order as one new version. Any failing op rejects the
    /// whole batch.
    pub fn apply_batch(&self, ops: &[IndexOp]) -> Result<Self> {
        let mut next = self.clone();
        for op in ops {
            match op {
                IndexOp::Add { ad_id, cis } => {
                    if next.ad_to_cis.contains_key(ad_id.as_str()) {
                        return Err(Error::DuplicateAd(ad_id.clone()));
                    }
                    next.insert(ad_id, cis).map_err(|reason| Error::IndexBuild { ad_id: ad_id.clone(), reason })?;
                }
                IndexOp::Remove { ad_id } => {
                    if !next.delete(ad_id) {
                        return Err(Error::MissingAd(ad_id.clone()));
                    }
                }
            }
        }
        next.version = self.version + 1;
        Ok(next)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn trie_version(&self) -> u64 {
        self.trie_version
    }

    pub fn ad_count(&self) -> usize {
        self.ad_to_cis.len()
    }

    pub fn contains_ad(&self, ad_id: &str) -> bool {
        self.ad_to_cis.contains_key(ad_id)
    }

    /// Ads posted under `ci`, sorted by id.
    pub fn ads_for(&self, ci: CiId) -> impl Iterator<Item = &str> {
        self.postings.get(&ci).into_iter().flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn cis_for(&self, ad_id: &str) -> Option<Vec<CiId>> {
        self.ad_to_cis.get(ad_id).map(|s| s.iter().copied().collect())
    }

    /// `(ci, sorted ad ids)` in ci order.
    pub fn postings(&self) -> impl Iterator<Item = (CiId, Vec<&str>)> {
        self.postings.iter().map(|(ci, ads)| (*ci, ads.iter().map(String::as_str).collect()))
    }

    /// Rank ads reached through `decoded`. Ties break by matched intent count
    /// (descending), then ad id.
    pub fn lookup(&self, decoded: &[ScoredCi], top_k: usize, aggregation: Aggregation) -> Vec<AdHit> {
        if top_k == 0 {
            return Vec::new();
        }
        let mut acc: HashMap<&str, (f64, usize)> = HashMap::new();
        for c in decoded {
            let Some(ads) = self.postings.get(&c.ci_id) else { continue };
            for ad in ads {
                acc.entry(ad.as_str())
                    .and_modify(|(s, n)| {
                        *s = match aggregation {
                            Aggregation::Max => s.max(c.score),
                            Aggregation::Sum => *s + c.score,
                        };
                        *n += 1;
                    })
                    .or_insert((c.score, 1));
            }
        }
        let mut hits: Vec<AdHit> = acc
            .into_iter()
            .map(|(ad, (score, n))| AdHit { ad_id: ad.to_owned(), score, matched_ci_count: n })
            .collect();
        let order = |a: &AdHit, b: &AdHit| {
            b.score
                .total_cmp(&a.score)
                .then(b.matched_ci_count.cmp(&a.matched_ci_count))
                .then_with(|| a.ad_id.cmp(&b.ad_id))
        };
        if hits.len() > top_k {
            hits.select_nth_unstable_by(top_k - 1, order);
            hits.truncate(top_k);
        }
        hits.sort_by(order);
        hits
    }

    pub fn write_postings<W: Write>(&self, w: W) -> Result<()> {
        jsonl::write(
            w,
            self.postings().map(|(ci, ads)| PostingRecord {
                ci_id: ci.0,
                ad_ids: ads.into_iter().map(str::to_owned).collect(),
            }),
        )
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest { trie_version: self.trie_version, index_version: self.version }
    }

    /// Rebuild from persisted postings, checked against `trie`.
    pub fn read_postings<R: BufRead>(r: R, manifest: &IndexManifest, trie: &CiTrie) -> Result<Self> {
        if manifest.trie_version != trie.version() {
            return Err(Error::config(format!(
                "index was built for intent set {:016x}, loaded set is {:016x}",
                manifest.trie_version,
                trie.version()
            )));
        }
        let records: Vec<PostingRecord> = jsonl::read(r)?;
        let mut per_ad: OrdMap<String, Vec<CiId>> = OrdMap::new();
        for rec in records {
            for ad in rec.ad_ids {
                per_ad.entry(ad).or_default().push(CiId(rec.ci_id));
            }
        }
        let assignments: Vec<_> = per_ad.into_iter().collect();
        let mut idx = Self::build(&assignments, trie)?;
        idx.version = manifest.index_version;
        Ok(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostingRecord {
    pub ci_id: u32,
    pub ad_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub trie_version: u64,
    pub index_version: u64,
}

/// Live index: current snapshot plus a queue of pending updates.
#[derive(Debug)]
pub struct AdIndex {
    cell: SnapshotCell<InvertedIndex>,
    pending: Mutex<Vec<IndexOp>>,
}

impl AdIndex {
    pub fn new(index: InvertedIndex) -> Self {
        AdIndex { cell: SnapshotCell::new(index), pending: Mutex::new(Vec::new()) }
    }

    pub fn snapshot(&self) -> std::sync::Arc<InvertedIndex> {
        self.cell.load()
    }

    /// Apply immediately as one version.
    pub fn apply(&self, ops: &[IndexOp]) -> Result<std::sync::Arc<InvertedIndex>> {
        self.cell.update(|cur| cur.apply_batch(ops))
    }

    pub fn enqueue(&self, op: IndexOp) {
        self.pending.lock().push(op);
    }

    pub fn pending(&self) -> usize {
        self.pending.lock().len()
    }

    /// Apply everything queued as a single version. Returns `None` when the
    /// queue was empty. A failing batch stays queued.
    pub fn flush(&self) -> Result<Option<std::sync::Arc<InvertedIndex>>> {
        let mut q = self.pending.lock();
        if q.is_empty() {
            return Ok(None);
        }
        let next = self.cell.update(|cur| cur.apply_batch(&q))?;
        q.clear();
        Ok(Some(next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::TableScorer;
    use crate::vocab::TokenSeq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn trie(n: u32) -> CiTrie {
        let pairs: Vec<_> = (0..n).map(|i| (format!("c{i}"), TokenSeq::from_raw(&[2 + i]))).collect();
        CiTrie::build(&pairs).unwrap().0
    }

    fn sc(id: u32, score: f64) -> ScoredCi {
        ScoredCi { ci_id: CiId(id), score }
    }

    fn assert_transposed(idx: &InvertedIndex) {
        let mut from_postings: BTreeMap<String, BTreeSet<CiId>> = BTreeMap::new();
        for (ci, ads) in idx.postings() {
            assert!(!ads.is_empty());
            for a in ads {
                from_postings.entry(a.to_owned()).or_default().insert(ci);
            }
        }
        for (ad, cis) in &idx.ad_to_cis {
            let want: BTreeSet<CiId> = cis.iter().copied().collect();
            assert_eq!(from_postings.remove(ad).unwrap_or_default(), want, "{ad}");
        }
        assert!(from_postings.is_empty());
    }

    #[test]
    fn build_small() {
        let t = trie(3);
        let idx = InvertedIndex::build(&[("a1".into(), vec![CiId(0)]), ("a2".into(), vec![CiId(0), CiId(1)])], &t).unwrap();
        assert_eq!(idx.ads_for(CiId(0)).collect::<Vec<_>>(), ["a1", "a2"]);
        assert_eq!(idx.ads_for(CiId(1)).collect::<Vec<_>>(), ["a2"]);
        assert_eq!(idx.version(), 1);
        assert_transposed(&idx);
        let empty = InvertedIndex::build(&[], &t).unwrap();
        assert_eq!(empty.ad_count(), 0);
    }

    #[test]
    fn build_rejects_unknown_ci_and_duplicates() {
        let t = trie(2);
        let err = InvertedIndex::build(&[("a9".into(), vec![CiId(5)])], &t).unwrap_err();
        assert!(matches!(err, Error::IndexBuild { ref ad_id, .. } if ad_id == "a9"));
        assert!(InvertedIndex::build(&[("a".into(), vec![]), ("a".into(), vec![])], &t).is_err());
    }

    #[test]
    fn add_remove_round_trip() {
        let t = trie(3);
        let v1 = InvertedIndex::build(&[("a1".into(), vec![CiId(0)])], &t).unwrap();
        let v2 = v1.add_ad("a2", &[CiId(0), CiId(2)]).unwrap();
        assert!(v2.ads_for(CiId(2)).any(|a| a == "a2"));
        assert!(v1.ads_for(CiId(2)).next().is_none(), "old version unchanged");
        assert!(v2.version() > v1.version());
        let v3 = v2.remove_ad("a2").unwrap();
        assert!(v3.version() > v2.version());
        assert_eq!(v3.postings, v1.postings);
        assert_eq!(v3.ad_to_cis, v1.ad_to_cis);
        assert!(matches!(v2.add_ad("a2", &[CiId(1)]), Err(Error::DuplicateAd(_))));
        assert!(matches!(v3.remove_ad("a2"), Err(Error::MissingAd(_))));
    }

    #[test]
    fn random_ops_match_log_replay() {
        let t = trie(40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = InvertedIndex::empty(&t);
        let mut log = Vec::new();
        let mut live: Vec<String> = Vec::new();
        for i in 0..1000 {
            if !live.is_empty() && rng.gen_bool(0.4) {
                let ad = live.swap_remove(rng.gen_range(0..live.len()));
                idx = idx.remove_ad(&ad).unwrap();
                log.push(IndexOp::Remove { ad_id: ad });
            } else {
                let ad = format!("ad{i}");
                let cis: Vec<CiId> = (0..rng.gen_range(1..6)).map(|_| CiId(rng.gen_range(0..40))).collect();
                idx = idx.add_ad(&ad, &cis).unwrap();
                log.push(IndexOp::Add { ad_id: ad.clone(), cis });
                live.push(ad);
            }
        }
        // Replay onto a plain map.
        let mut oracle: BTreeMap<CiId, BTreeSet<String>> = BTreeMap::new();
        let mut owned: BTreeMap<String, Vec<CiId>> = BTreeMap::new();
        for op in &log {
            match op {
                IndexOp::Add { ad_id, cis } => {
                    for c in cis {
                        oracle.entry(*c).or_default().insert(ad_id.clone());
                    }
                    owned.insert(ad_id.clone(), cis.clone());
                }
                IndexOp::Remove { ad_id } => {
                    for c in owned.remove(ad_id).unwrap() {
                        oracle.get_mut(&c).unwrap().remove(ad_id);
                    }
                }
            }
        }
        oracle.retain(|_, v| !v.is_empty());
        let got: BTreeMap<CiId, BTreeSet<String>> =
            idx.postings().map(|(c, ads)| (c, ads.into_iter().map(str::to_owned).collect())).collect();
        assert_eq!(got, oracle);
        assert_eq!(idx.version(), 1001);
        assert_transposed(&idx);
    }

    #[test]
    fn large_build_is_transposed() {
        let t = trie(500);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let assignments: Vec<(String, Vec<CiId>)> = (0..10_000)
            .map(|i| (format!("ad{i:05}"), (0..rng.gen_range(1..31)).map(|_| CiId(rng.gen_range(0..500))).collect()))
            .collect();
        let idx = InvertedIndex::build(&assignments, &t).unwrap();
        assert_transposed(&idx);
        for (ad, cis) in &assignments {
            for c in cis {
                assert!(idx.ads_for(*c).any(|a| a == ad));
            }
        }
    }

    #[test]
    fn lookup_examples() {
        let t = trie(3);
        let idx = InvertedIndex::build(&[("a1".into(), vec![CiId(0), CiId(1)]), ("a2".into(), vec![CiId(1)])], &t).unwrap();
        let hits = idx.lookup(&[sc(0, -1.0)], 10, Aggregation::Max);
        assert_eq!(hits, vec![AdHit { ad_id: "a1".into(), score: -1.0, matched_ci_count: 1 }]);
        let hits = idx.lookup(&[sc(0, -1.0), sc(1, -2.0)], 10, Aggregation::Max);
        assert_eq!(hits[0], AdHit { ad_id: "a1".into(), score: -1.0, matched_ci_count: 2 });
        assert_eq!(hits[1], AdHit { ad_id: "a2".into(), score: -2.0, matched_ci_count: 1 });
        let hits = idx.lookup(&[sc(0, -1.0), sc(1, -2.0)], 10, Aggregation::Sum);
        assert_eq!(hits[0], AdHit { ad_id: "a2".into(), score: -2.0, matched_ci_count: 1 });
        assert_eq!(hits[1], AdHit { ad_id: "a1".into(), score: -3.0, matched_ci_count: 2 });
        assert_eq!(idx.lookup(&[sc(0, -1.0), sc(1, -2.0)], 1, Aggregation::Max).len(), 1);
        assert!(idx.lookup(&[sc(2, -0.5)], 10, Aggregation::Max).is_empty());
    }

    #[test]
    fn lookup_ties_prefer_more_matches_then_id() {
        let t = trie(3);
        let idx = InvertedIndex::build(
            &[("b".into(), vec![CiId(0)]), ("a".into(), vec![CiId(1)]), ("c".into(), vec![CiId(0), CiId(1)])],
            &t,
        )
        .unwrap();
        let hits = idx.lookup(&[sc(0, -1.0), sc(1, -1.0)], 10, Aggregation::Max);
        let order: Vec<&str> = hits.iter().map(|h| h.ad_id.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    #[test]
    fn lookup_matches_exhaustive_scoring() {
        let t = trie(30);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let assignments: Vec<(String, Vec<CiId>)> = (0..60)
                .map(|i| (format!("ad{i}"), (0..rng.gen_range(1..5)).map(|_| CiId(rng.gen_range(0..30))).collect()))
                .collect();
            let idx = InvertedIndex::build(&assignments, &t).unwrap();
            let mut ids: Vec<u32> = (0..30).collect();
            let n = rng.gen_range(1..12);
            let decoded: Vec<ScoredCi> = (0..n)
                .map(|_| {
                    let id = ids.swap_remove(rng.gen_range(0..ids.len()));
                    // Coarse scores so ties actually happen.
                    sc(id, -(rng.gen_range(0..6) as f64) / 2.0)
                })
                .collect();
            let agg = if rng.gen_bool(0.5) { Aggregation::Max } else { Aggregation::Sum };
            let top_k = rng.gen_range(1..40);

            let mut oracle: Vec<AdHit> = assignments
                .iter()
                .filter_map(|(ad, cis)| {
                    let cis: BTreeSet<CiId> = cis.iter().copied().collect();
                    let matched: Vec<f64> = decoded.iter().filter(|d| cis.contains(&d.ci_id)).map(|d| d.score).collect();
                    if matched.is_empty() {
                        return None;
                    }
                    let score = match agg {
                        Aggregation::Max => matched.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        Aggregation::Sum => matched.iter().sum(),
                    };
                    Some(AdHit { ad_id: ad.clone(), score, matched_ci_count: matched.len() })
                })
                .collect();
            oracle.sort_by(|a, b| {
                b.score.total_cmp(&a.score).then(b.matched_ci_count.cmp(&a.matched_ci_count)).then(a.ad_id.cmp(&b.ad_id))
            });
            oracle.truncate(top_k);
            assert_eq!(idx.lookup(&decoded, top_k, agg), oracle);
        }
    }

    #[test]
    fn persistence_round_trip() {
        let t = trie(5);
        let idx = InvertedIndex::build(&[("x".into(), vec![CiId(4), CiId(1)]), ("y".into(), vec![CiId(1)])], &t)
            .unwrap()
            .add_ad("z", &[CiId(3)])
            .unwrap();
        let mut buf = Vec::new();
        idx.write_postings(&mut buf).unwrap();
        let back = InvertedIndex::read_postings(&buf[..], &idx.manifest(), &t).unwrap();
        assert_eq!(back, idx);
        let stale = IndexManifest { trie_version: 7, index_version: 2 };
        assert!(InvertedIndex::read_postings(&buf[..], &stale, &t).is_err());
    }

    #[test]
    fn queued_updates_flush_as_one_version() {
        let t = trie(3);
        let live = AdIndex::new(InvertedIndex::empty(&t));
        let reader = live.snapshot();
        live.enqueue(IndexOp::Add { ad_id: "a".into(), cis: vec![CiId(0)] });
        live.enqueue(IndexOp::Add { ad_id: "b".into(), cis: vec![CiId(1)] });
        assert_eq!(live.snapshot().ad_count(), 0);
        let v = live.flush().unwrap().unwrap();
        assert_eq!(v.version(), 2);
        assert_eq!(v.ad_count(), 2);
        assert_eq!(reader.ad_count(), 0);
        assert!(live.flush().unwrap().is_none());
        live.enqueue(IndexOp::Remove { ad_id: "nope".into() });
        assert!(live.flush().is_err());
        assert_eq!(live.pending(), 1);
        assert_eq!(live.snapshot().version(), 2);
    }

    #[test]
    fn assignment_single_intent_and_cap() {
        let one = trie(1);
        let ad = Ad { ad_id: "a".into(), title: "anything".into(), landing_page: None, materials: None };
        let s = TableScorer::uniform(80);
        let got = assign_cis_to_ad(&ad, &s, &one, &DecodeParams::offline(), 30).unwrap();
        assert_eq!(got.iter().map(|c| c.ci_id).collect::<Vec<_>>(), vec![CiId(0)]);

        let many = trie(74);
        let p = DecodeParams { truncation_margin: None, ..DecodeParams::offline() };
        let all = constrained_beam_search(&s, &many, &ad.context(), &p).unwrap();
        assert_eq!(all.len(), 74);
        let capped = assign_cis_to_ad(&ad, &s, &many, &p, 30).unwrap();
        assert_eq!(capped, all[..30].to_vec());
        assert!(matches!(assign_cis_to_ad(&ad, &s, &many, &p, 0), Err(Error::Assignment { .. })));
    }
}
