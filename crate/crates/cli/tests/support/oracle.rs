//! Reference implementations written from the definitions, sharing no code
//! with the library paths they check.

use std::collections::{BTreeMap, BTreeSet};

use ci_retrieval::ad_index::{AdHit, Aggregation, IndexOp, InvertedIndex};
use ci_retrieval::decoder::{constrained_beam_search, DecodeParams, ScoredCi};
use ci_retrieval::engine::{Engine, RetrievedCi};
use ci_retrieval::query_cache::normalize_query;
use ci_retrieval::{CiId, CiTrie, Scorer, TokenId};

/// log Σ exp(v/τ), shifted by the max for stability.
pub fn tempered_lse(row: &[f64], tau: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in row {
        max = max.max(v / tau);
    }
    let mut sum = 0.0;
    for v in row {
        sum += (v / tau - max).exp();
    }
    max + sum.ln()
}

/// Score every intent in the set by its tempered sequence log-probability
/// (terminator included) and sort by score, then id.
pub fn enumerate_and_sort<S: Scorer + ?Sized>(scorer: &S, trie: &CiTrie, context: &str, tau: f64) -> Vec<ScoredCi> {
    let mut all = Vec::with_capacity(trie.len());
    for i in 0..trie.len() as u32 {
        let seq = trie.seq(CiId(i)).expect("dense ids");
        let mut score = 0.0;
        for t in 0..=seq.len() {
            let row = scorer.next_logprobs(context, &seq[..t]).expect("scorer row");
            let tok = if t == seq.len() { TokenId::END } else { seq[t] };
            score += row[tok.0 as usize] / tau - tempered_lse(&row, tau);
        }
        all.push(ScoredCi { ci_id: CiId(i), score });
    }
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.ci_id.0.cmp(&b.ci_id.0)));
    all
}

pub fn hit_ratio(gt: &BTreeSet<String>, generated: &[String], k: usize) -> f64 {
    let mut hits = 0;
    for g in gt {
        if let Some(p) = generated.iter().position(|x| x == g) {
            if p < k {
                hits += 1;
            }
        }
    }
    hits as f64 / gt.len() as f64
}

/// AP as the literal double sum: for each relevant ad i at 1-based position
/// p_i, (number of relevant ads ranked before it + 1) / p_i; absent ads add 0.
pub fn average_precision(gt: &BTreeSet<String>, generated: &[String]) -> f64 {
    let pos = |a: &String| generated.iter().position(|x| x == a).map(|p| p + 1);
    let mut total = 0.0;
    for i in gt {
        let Some(pi) = pos(i) else { continue };
        let before = gt.iter().filter_map(pos).filter(|&pj| pj < pi).count();
        total += (before + 1) as f64 / pi as f64;
    }
    total / gt.len() as f64
}

pub fn mean_ap(records: &[(BTreeSet<String>, Vec<String>)]) -> f64 {
    let aps: Vec<f64> = records.iter().map(|(g, r)| average_precision(g, r)).collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn coverage(ad_counts: &[usize]) -> f64 {
    ad_counts.iter().filter(|&&n| n > 0).count() as f64 / ad_counts.len() as f64
}

pub type Postings = BTreeMap<CiId, BTreeSet<String>>;

/// Replay an op log onto `start` with plain ordered maps.
pub fn replay(start: &Postings, ops: &[IndexOp]) -> Postings {
    let mut by_ad: BTreeMap<String, BTreeSet<CiId>> = BTreeMap::new();
    for (ci, ads) in start {
        for a in ads {
            by_ad.entry(a.clone()).or_default().insert(*ci);
        }
    }
    for op in ops {
        match op {
            IndexOp::Add { ad_id, cis } => {
                by_ad.insert(ad_id.clone(), cis.iter().copied().collect());
            }
            IndexOp::Remove { ad_id } => {
                by_ad.remove(ad_id);
            }
        }
    }
    let mut out = Postings::new();
    for (ad, cis) in by_ad {
        for c in cis {
            out.entry(c).or_default().insert(ad.clone());
        }
    }
    out
}

pub fn postings_of(index: &InvertedIndex) -> Postings {
    index
        .postings()
        .filter(|(_, ads)| !ads.is_empty())
        .map(|(ci, ads)| (ci, ads.into_iter().map(str::to_owned).collect()))
        .collect()
}

/// Ad ranking from the definition: aggregate matched intent scores per ad,
/// order by score desc, matched count desc, ad id asc.
pub fn rank_ads(postings: &Postings, decoded: &[ScoredCi], top_k: usize, agg: Aggregation) -> Vec<AdHit> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for c in decoded {
        for ad in postings.get(&c.ci_id).into_iter().flatten() {
            let e = acc.entry(ad.clone()).or_insert((f64::NAN, 0));
            e.0 = match (e.1, agg) {
                (0, _) => c.score,
                (_, Aggregation::Max) => e.0.max(c.score),
                (_, Aggregation::Sum) => e.0 + c.score,
            };
            e.1 += 1;
        }
    }
    let mut hits: Vec<AdHit> =
        acc.into_iter().map(|(ad_id, (score, n))| AdHit { ad_id, score, matched_ci_count: n }).collect();
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(b.matched_ci_count.cmp(&a.matched_ci_count))
            .then(a.ad_id.cmp(&b.ad_id))
    });
    hits.truncate(top_k);
    hits
}

/// Expected retrieval answer composed stage by stage from the engine's
/// current snapshot: cache entry if present, else an online decode, then
/// ad ranking over the snapshot's postings.
pub struct Composed {
    pub cis: Vec<RetrievedCi>,
    pub ads: Vec<AdHit>,
    pub cache_hit: bool,
}

pub fn compose(engine: &Engine, postings: &Postings, query: &str, top_k: usize) -> Composed {
    let st = engine.state();
    let q = normalize_query(query);
    let (decoded, cache_hit) = match st.cache.entry(&q) {
        Some(cis) => (cis.to_vec(), true),
        None => {
            let cis = constrained_beam_search(&**engine.query_scorer(), &st.trie, &q, &engine.settings().online)
                .expect("decode");
            (cis, false)
        }
    };
    let ads = rank_ads(postings, &decoded, top_k, engine.settings().aggregation);
    let cis = decoded
        .iter()
        .map(|c| RetrievedCi { text: st.trie.text(c.ci_id).unwrap().to_owned(), ci_id: c.ci_id, score: c.score })
        .collect();
    Composed { cis, ads, cache_hit }
}

/// Smallest params that make beam search exhaustive over `trie`.
pub fn exhaustive(trie: &CiTrie, tau: f64) -> DecodeParams {
    DecodeParams { beam_size: trie.len(), max_len: trie.max_depth(), temperature: tau, truncation_margin: None, length_normalize: false }
}
