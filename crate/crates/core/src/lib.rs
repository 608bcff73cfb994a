//! Generative ad retrieval over a fixed set of commercial intents.
//!
//! A query is decoded into intent phrases by beam search constrained to a
//! prefix trie over the intent set; the decoded intents are resolved to ads
//! through an inverted index. Head queries are answered from an offline
//! cache. The [`eval`] module implements the retrieval metrics used to judge
//! the pipeline.

pub mod ad_index;
pub mod ci_trie;
pub mod config;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod query_cache;
pub mod scorer;
pub mod snapshot;
pub mod vocab;

pub use ci_trie::{CiId, CiRecord, CiTrie};
pub use error::{Error, Result};
pub use scorer::{NgramScorer, Scorer, TableScorer};
pub use vocab::{TokenId, TokenSeq, TokenizationScheme, Vocabulary};
