//! Trie-constrained beam search over intent phrases.
//!
//! Every hypothesis sits on a trie node, so only legal continuations are
//! ever scored. Per-step log-probabilities are tempered (divided by the
//! temperature and renormalized over the full id space), optionally
//! truncated against the step's best candidate, and accumulated. Finished
//! hypotheses stay in the pool and compete with open ones for the `b` slots
//! until the beam runs dry.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ci_trie::{CiId, CiTrie, NodeRef};
use crate::error::{Error, Result};
use crate::scorer::{tempered_log_normalizer, Scorer};
use crate::vocab::{TokenId, TokenSeq};

/// Default truncation margin in nats.
pub const DEFAULT_TRUNCATION_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub beam_size: usize,
    /// Maximum intent length in tokens, terminator excluded.
    pub max_len: usize,
    pub temperature: f64,
    /// `None` disables truncation.
    #[serde(default)]
    pub truncation_margin: Option<f64>,
    #[serde(default)]
    pub length_normalize: bool,
}

impl DecodeParams {
    /// Low-latency profile used on cache misses.
    pub fn online() -> Self {
        DecodeParams {
            beam_size: 50,
            max_len: 4,
            temperature: 0.7,
            truncation_margin: Some(DEFAULT_TRUNCATION_MARGIN),
            length_normalize: false,
        }
    }

    /// Wide profile for cache warming and ad assignment.
    pub fn offline() -> Self {
        DecodeParams {
            beam_size: 256,
            max_len: 6,
            temperature: 0.8,
            truncation_margin: Some(DEFAULT_TRUNCATION_MARGIN),
            length_normalize: false,
        }
    }

    /// Exhaustive settings for a given trie: no truncation, beam as wide as
    /// the intent set, unit temperature.
    pub fn exhaustive(trie: &CiTrie) -> Self {
        DecodeParams {
            beam_size: trie.len(),
            max_len: trie.max_depth(),
            temperature: 1.0,
            truncation_margin: None,
            length_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.max_len < 1 {
            return Err(Error::config("max_len must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Some(m) = self.truncation_margin {
            if m.is_nan() || m < 0.0 {
                return Err(Error::config(format!("truncation_margin must be non-negative, got {m}")));
            }
        }
        Ok(())
    }
}

/// A decoded intent and its (tempered, optionally length-normalized) score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCi {
    pub ci_id: CiId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub prefix: TokenSeq,
    /// Sum of tempered per-step log-probabilities, terminator included once
    /// finished.
    pub cum_logprob: f64,
    pub finished: bool,
    pub ci_id: Option<CiId>,
    node: NodeRef,
}

impl Hypothesis {
    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.cum_logprob / self.prefix.len().max(1) as f64
        } else {
            self.cum_logprob
        }
    }
}

/// Total order used for pruning: score descending, then finished before
/// open, then intent id or token sequence ascending.
fn rank(a: &Hypothesis, b: &Hypothesis, length_normalize: bool) -> Ordering {
    b.score(length_normalize)
        .total_cmp(&a.score(length_normalize))
        .then_with(|| b.finished.cmp(&a.finished))
        .then_with(|| a.ci_id.cmp(&b.ci_id))
        .then_with(|| a.prefix.cmp(&b.prefix))
}

/// Divide log-probabilities by `temperature` and renormalize.
pub fn temper(logprobs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let z = tempered_log_normalizer(logprobs.iter().copied(), f64::NEG_INFINITY, 0, temperature);
    Ok(logprobs.iter().map(|&v| v / temperature - z).collect())
}

/// Keep candidates within `margin` of the best one. `None` keeps everything.
pub fn apply_truncation(candidates: &[(TokenId, f64)], margin: Option<f64>) -> Vec<(TokenId, f64)> {
    let mut out = candidates.to_vec();
    truncate_in_place(&mut out, margin, |c| c.1);
    out
}

fn truncate_in_place<T>(cands: &mut Vec<T>, margin: Option<f64>, score: impl Fn(&T) -> f64) {
    let Some(margin) = margin else { return };
    let best = cands.iter().map(&score).fold(f64::NEG_INFINITY, f64::max);
    let floor = best - margin;
    cands.retain(|c| score(c) >= floor);
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub cis: Vec<ScoredCi>,
    /// Set when a deadline stopped the search early; `cis` then holds the
    /// hypotheses finished so far.
    pub deadline_hit: bool,
}

pub fn constrained_beam_search<S: Scorer + ?Sized>(
    scorer: &S,
    trie: &CiTrie,
    context: &str,
    params: &DecodeParams,
) -> Result<Vec<ScoredCi>> {
    Ok(constrained_beam_search_until(scorer, trie, context, params, None)?.cis)
}

/// As [`constrained_beam_search`], checking `deadline` between steps.
pub fn constrained_beam_search_until<S: Scorer + ?Sized>(
    scorer: &S,
    trie: &CiTrie,
    context: &str,
    params: &DecodeParams,
    deadline: Option<Instant>,
) -> Result<DecodeOutcome> {
    params.validate()?;
    if trie.is_empty() {
        return Err(Error::config("cannot decode against an empty intent trie"));
    }
    let wrap = |e: Error| Error::Decode { context: context.to_owned(), source: Box::new(e) };
    let tau = params.temperature;
    let norm = params.length_normalize;

    let mut pool = vec![Hypothesis {
        prefix: TokenSeq::default(),
        cum_logprob: 0.0,
        finished: false,
        ci_id: None,
        node: trie.root(),
    }];
    let mut deadline_hit = false;

    for _step in 0..=params.max_len {
        if pool.iter().all(|h| h.finished) {
            break;
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            deadline_hit = true;
            break;
        }
        let mut next = Vec::with_capacity(pool.len() * 4);
        let mut step_cands: Vec<(TokenId, NodeRef, f64)> = Vec::new();
        for hyp in pool {
            if hyp.finished {
                next.push(hyp);
                continue;
            }
            let dist = scorer.next_dist(context, &hyp.prefix).map_err(wrap)?;
            if dist.vocab_size() == 0 {
                return Err(wrap(Error::Scorer("scorer returned an empty distribution".into())));
            }
            let z = dist.log_normalizer(tau);
            step_cands.clear();
            if trie.terminal(hyp.node).is_some() {
                step_cands.push((TokenId::END, hyp.node, dist.logprob(TokenId::END) / tau - z));
            }
            if hyp.prefix.len() < params.max_len {
                for (tok, child) in trie.children(hyp.node) {
                    if tok.index() >= dist.vocab_size() {
                        return Err(wrap(Error::Scorer(format!(
                            "token {tok} outside scorer id space of {}",
                            dist.vocab_size()
                        ))));
                    }
                    step_cands.push((tok, child, dist.logprob(tok) / tau - z));
                }
            }
            truncate_in_place(&mut step_cands, params.truncation_margin, |c| c.2);
            for &(tok, node, lp) in &step_cands {
                let cum_logprob = hyp.cum_logprob + lp;
                if tok == TokenId::END {
                    next.push(Hypothesis {
                        prefix: hyp.prefix.clone(),
                        cum_logprob,
                        finished: true,
                        ci_id: trie.terminal(node),
                        node,
                    });
                } else {
                    let mut prefix = hyp.prefix.to_vec();
                    prefix.push(tok);
                    next.push(Hypothesis { prefix: prefix.into(), cum_logprob, finished: false, ci_id: None, node });
                }
            }
        }
        prune(&mut next, params.beam_size, norm);
        pool = next;
    }

    let mut finished: Vec<Hypothesis> = pool.into_iter().filter(|h| h.finished).collect();
    finished.sort_by(|a, b| rank(a, b, norm));
    let cis = finished
        .iter()
        .map(|h| ScoredCi { ci_id: h.ci_id.expect("finished hypotheses carry an id"), score: h.score(norm) })
        .collect();
    Ok(DecodeOutcome { cis, deadline_hit })
}

fn prune(pool: &mut Vec<Hypothesis>, beam: usize, norm: bool) {
    if pool.len() > beam {
        pool.select_nth_unstable_by(beam - 1, |a, b| rank(a, b, norm));
        pool.truncate(beam);
    }
    pool.sort_by(|a, b| rank(a, b, norm));
}
