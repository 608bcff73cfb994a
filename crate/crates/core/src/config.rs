//! Engine configuration.
//!
//! The on-disk form is TOML (parsed by the CLI); this module only defines the
//! shape and its validation. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ad_index::{Aggregation, DEFAULT_CAP};
use crate::decoder::DecodeParams;
use crate::error::{Error, Result};
use crate::scorer::NgramConfig;
use crate::vocab::TokenizationScheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub tokenization: TokenizationScheme,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Reported per request; enforced only with `enforce_latency_budget`.
    #[serde(default = "default_budget")]
    pub latency_budget_ms: f64,
    /// Stop decoding at the budget and answer with what has finished.
    #[serde(default)]
    pub enforce_latency_budget: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Intents kept per ad at assignment time.
    #[serde(default = "default_cap")]
    pub assign_cap: usize,
    /// Intents occurring fewer times in the raw corpus are dropped.
    #[serde(default = "default_min_support")]
    pub min_support: usize,
    /// Head queries below this frequency are not warmed.
    #[serde(default = "default_min_freq")]
    pub cache_min_freq: u64,
    /// Result depth used by `eval`.
    #[serde(default = "default_eval_depth")]
    pub eval_depth: usize,
    #[serde(default)]
    pub scorer: NgramConfig,
    #[serde(default = "DecodeParams::online")]
    pub online: DecodeParams,
    #[serde(default = "DecodeParams::offline")]
    pub offline: DecodeParams,
    #[serde(default)]
    pub paths: Paths,
}

fn default_top_k() -> usize {
    10
}
fn default_budget() -> f64 {
    60.0
}
fn default_cap() -> usize {
    DEFAULT_CAP
}
fn default_min_support() -> usize {
    1
}
fn default_min_freq() -> u64 {
    1
}
fn default_eval_depth() -> usize {
    500
}

/// Inputs and artifacts of the offline pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Raw intent corpus, `{"text"}` per line; duplicates count as support.
    pub ci_corpus: PathBuf,
    /// Training pairs, `{"context", "ci"}` per line.
    pub pairs: PathBuf,
    /// Training pairs for the ad-side scorer; query pairs are used when unset.
    pub ad_pairs: Option<PathBuf>,
    pub ads: PathBuf,
    pub head_queries: PathBuf,
    pub eval_dataset: PathBuf,
    pub vocab: PathBuf,
    /// Built intent set with explicit ids.
    pub ci_set: PathBuf,
    pub scorer: PathBuf,
    pub ad_scorer: Option<PathBuf>,
    pub assignments: PathBuf,
    /// Postings file; its manifest sits next to it (see [`manifest_path`]).
    pub index: PathBuf,
    pub cache: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            ci_corpus: "ci_corpus.jsonl".into(),
            pairs: "pairs.jsonl".into(),
            ad_pairs: None,
            ads: "ads.jsonl".into(),
            head_queries: "head_queries.jsonl".into(),
            eval_dataset: "eval.jsonl".into(),
            vocab: "out/vocab.txt".into(),
            ci_set: "out/ci_set.jsonl".into(),
            scorer: "out/scorer.jsonl".into(),
            ad_scorer: None,
            assignments: "out/assignments.jsonl".into(),
            index: "out/index.jsonl".into(),
            cache: "out/cache.jsonl".into(),
            report_dir: "out/report".into(),
        }
    }
}

impl Paths {
    /// Make every relative path relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.ci_corpus,
            &mut self.pairs,
            &mut self.ads,
            &mut self.head_queries,
            &mut self.eval_dataset,
            &mut self.vocab,
            &mut self.ci_set,
            &mut self.scorer,
            &mut self.assignments,
            &mut self.index,
            &mut self.cache,
            &mut self.report_dir,
        ] {
            fix(p);
        }
        for p in [&mut self.ad_pairs, &mut self.ad_scorer].into_iter().flatten() {
            fix(p);
        }
    }
}

/// `index.jsonl` → `index.jsonl.manifest.json`.
pub fn manifest_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tokenization: TokenizationScheme::default(),
            top_k: default_top_k(),
            latency_budget_ms: default_budget(),
            enforce_latency_budget: false,
            aggregation: Aggregation::default(),
            assign_cap: default_cap(),
            min_support: default_min_support(),
            cache_min_freq: default_min_freq(),
            eval_depth: default_eval_depth(),
            scorer: NgramConfig::default(),
            online: DecodeParams::online(),
            offline: DecodeParams::offline(),
            paths: Paths::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.online.validate().map_err(|e| Error::config(format!("online profile: {e}")))?;
        self.offline.validate().map_err(|e| Error::config(format!("offline profile: {e}")))?;
        if !self.latency_budget_ms.is_finite() || self.latency_budget_ms <= 0.0 {
            return Err(Error::config("latency_budget_ms must be positive"));
        }
        if self.top_k < 1 || self.assign_cap < 1 || self.eval_depth < 1 {
            return Err(Error::config("top_k, assign_cap and eval_depth must be at least 1"));
        }
        Ok(())
    }
}
