//! Prefix trie over the tokenized intent set.
//!
//! The trie is immutable once built. A refreshed intent set produces a new
//! trie with a new content-derived version, and callers swap snapshots.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CiId(pub u32);

impl CiId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Handle to a trie node, valid only for the trie that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef(u32);

#[derive(Debug, Clone, Default)]
struct Node {
    /// Sorted by token id.
    children: Vec<(TokenId, u32)>,
    terminal: Option<CiId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrieBuildOptions {
    /// Drop intents that occur fewer times than this in the raw input.
    pub min_support: usize,
}

impl Default for TrieBuildOptions {
    fn default() -> Self {
        TrieBuildOptions { min_support: 1 }
    }
}

/// Side information from a trie build.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieBuildReport {
    /// Every distinct raw text that was kept, mapped to its intent.
    pub aliases: BTreeMap<String, CiId>,
    /// Raw occurrences per intent.
    pub support: Vec<usize>,
    /// Distinct sequences dropped by the support filter.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct CiTrie {
    nodes: Vec<Node>,
    seqs: Vec<TokenSeq>,
    texts: Vec<String>,
    max_depth: usize,
    version: u64,
}

/// One line of a CI set file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_id: Option<u32>,
    pub text: String,
}

impl CiTrie {
    /// Build from raw `(text, tokens)` pairs. Identical token sequences
    /// collapse to one intent; ids follow lexicographic token order.
    pub fn build(cis: &[(String, TokenSeq)]) -> Result<(Self, TrieBuildReport)> {
        Self::build_with(cis, TrieBuildOptions::default())
    }

    pub fn build_with(cis: &[(String, TokenSeq)], opts: TrieBuildOptions) -> Result<(Self, TrieBuildReport)> {
        Self::build_inner(cis, opts, None)
    }

    /// With a vocabulary, each intent's text is its detokenized form;
    /// otherwise the smallest raw text among its aliases.
    fn build_inner(
        cis: &[(String, TokenSeq)],
        opts: TrieBuildOptions,
        vocab: Option<&Vocabulary>,
    ) -> Result<(Self, TrieBuildReport)> {
        if cis.is_empty() {
            return Err(Error::config("intent set is empty"));
        }
        let mut grouped: BTreeMap<&TokenSeq, (Vec<&str>, usize)> = BTreeMap::new();
        for (text, seq) in cis {
            validate_seq(text, seq)?;
            let g = grouped.entry(seq).or_default();
            g.0.push(text);
            g.1 += 1;
        }
        let mut report = TrieBuildReport::default();
        let mut entries = Vec::with_capacity(grouped.len());
        for (seq, (mut texts, support)) in grouped {
            if support < opts.min_support {
                report.dropped += 1;
                continue;
            }
            texts.sort_unstable();
            texts.dedup();
            let id = CiId(entries.len() as u32);
            for t in &texts {
                report.aliases.insert((*t).to_owned(), id);
            }
            report.support.push(support);
            let text = match vocab {
                Some(v) => v.detokenize(seq)?,
                None => texts[0].to_owned(),
            };
            entries.push((text, seq.clone()));
        }
        if entries.is_empty() {
            return Err(Error::config(format!(
                "no intent reaches min_support {}",
                opts.min_support
            )));
        }
        Ok((Self::assemble(entries), report))
    }

    /// Build with caller-assigned ids, which must be dense in `[0, n)`.
    pub fn build_with_ids(cis: &[(CiId, String, TokenSeq)]) -> Result<Self> {
        if cis.is_empty() {
            return Err(Error::config("intent set is empty"));
        }
        let mut slots: Vec<Option<(String, TokenSeq)>> = vec![None; cis.len()];
        let mut seen = HashMap::new();
        for (id, text, seq) in cis {
            validate_seq(text, seq)?;
            let slot = slots
                .get_mut(id.index())
                .ok_or_else(|| Error::invalid(format!("ci_id {id} outside [0, {})", cis.len())))?;
            if slot.is_some() {
                return Err(Error::invalid(format!("ci_id {id} assigned twice")));
            }
            if let Some(other) = seen.insert(seq.clone(), *id) {
                return Err(Error::invalid(format!("ci_ids {other} and {id} have identical tokens")));
            }
            *slot = Some((text.clone(), seq.clone()));
        }
        Ok(Self::assemble(slots.into_iter().map(|s| s.expect("dense ids checked")).collect()))
    }

    /// Tokenize CI set records and build, honouring explicit ids when every
    /// record carries one.
    pub fn from_records(
        records: &[CiRecord],
        vocab: &Vocabulary,
        opts: TrieBuildOptions,
    ) -> Result<(Self, TrieBuildReport)> {
        let explicit = records.iter().filter(|r| r.ci_id.is_some()).count();
        if explicit != 0 && explicit != records.len() {
            return Err(Error::invalid("ci_id must be present on all records or on none"));
        }
        let mut tokenized = Vec::with_capacity(records.len());
        for r in records {
            let seq = vocab.tokenize(&r.text)?;
            tokenized.push((r.ci_id, r.text.clone(), seq));
        }
        if explicit == 0 {
            let pairs: Vec<_> = tokenized.into_iter().map(|(_, t, s)| (t, s)).collect();
            return Self::build_inner(&pairs, opts, Some(vocab));
        }
        let mut with_ids = Vec::with_capacity(tokenized.len());
        let mut aliases = BTreeMap::new();
        for (id, raw, seq) in tokenized {
            let id = CiId(id.expect("all records carry ids"));
            aliases.insert(raw, id);
            with_ids.push((id, vocab.detokenize(&seq)?, seq));
        }
        let trie = Self::build_with_ids(&with_ids)?;
        let report = TrieBuildReport {
            aliases,
            support: vec![1; trie.len()],
            dropped: 0,
        };
        Ok((trie, report))
    }

    fn assemble(entries: Vec<(String, TokenSeq)>) -> Self {
        let mut nodes = vec![Node::default()];
        let mut max_depth = 0;
        let mut hasher = Sha256::new();
        for (i, (text, seq)) in entries.iter().enumerate() {
            let mut cur = 0usize;
            for &tok in seq.iter() {
                cur = match nodes[cur].children.binary_search_by_key(&tok, |c| c.0) {
                    Ok(pos) => nodes[cur].children[pos].1 as usize,
                    Err(pos) => {
                        let next = nodes.len() as u32;
                        nodes[cur].children.insert(pos, (tok, next));
                        nodes.push(Node::default());
                        next as usize
                    }
                };
            }
            nodes[cur].terminal = Some(CiId(i as u32));
            max_depth = max_depth.max(seq.len());
            hasher.update((seq.len() as u32).to_le_bytes());
            for t in seq.iter() {
                hasher.update(t.0.to_le_bytes());
            }
            hasher.update(text.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let version = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let (texts, seqs) = entries.into_iter().unzip();
        CiTrie { nodes, seqs, texts, max_depth, version }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Content hash of the intent set; identical sets share a version.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn seq(&self, id: CiId) -> Option<&TokenSeq> {
        self.seqs.get(id.index())
    }

    pub fn text(&self, id: CiId) -> Option<&str> {
        self.texts.get(id.index()).map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = CiId> {
        (0..self.seqs.len() as u32).map(CiId)
    }

    pub fn root(&self) -> NodeRef {
        NodeRef(0)
    }

    #[inline]
    pub fn child(&self, node: NodeRef, tok: TokenId) -> Option<NodeRef> {
        let n = &self.nodes[node.0 as usize];
        n.children
            .binary_search_by_key(&tok, |c| c.0)
            .ok()
            .map(|pos| NodeRef(n.children[pos].1))
    }

    #[inline]
    pub fn children(&self, node: NodeRef) -> impl ExactSizeIterator<Item = (TokenId, NodeRef)> + '_ {
        self.nodes[node.0 as usize].children.iter().map(|&(t, n)| (t, NodeRef(n)))
    }

    #[inline]
    pub fn terminal(&self, node: NodeRef) -> Option<CiId> {
        self.nodes[node.0 as usize].terminal
    }

    pub fn walk(&self, prefix: &[TokenId]) -> Option<NodeRef> {
        prefix.iter().try_fold(self.root(), |n, &t| self.child(n, t))
    }

    /// Legal next tokens after `prefix`, sorted by id. The terminator is
    /// included exactly when `prefix` is itself an intent.
    pub fn allowed_next(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        let node = self
            .walk(prefix)
            .ok_or_else(|| Error::InvalidPrefix(prefix.iter().map(|t| t.0).collect()))?;
        let mut out = Vec::with_capacity(self.nodes[node.0 as usize].children.len() + 1);
        if self.terminal(node).is_some() {
            out.push(TokenId::END);
        }
        out.extend(self.children(node).map(|(t, _)| t));
        Ok(out)
    }

    pub fn resolve(&self, seq: &[TokenId]) -> Option<CiId> {
        self.walk(seq).and_then(|n| self.terminal(n))
    }

    /// Records in id order, ids explicit.
    pub fn records(&self) -> impl Iterator<Item = CiRecord> + '_ {
        self.texts
            .iter()
            .enumerate()
            .map(|(i, t)| CiRecord { ci_id: Some(i as u32), text: t.clone() })
    }
}

fn validate_seq(text: &str, seq: &TokenSeq) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid(format!("intent {text:?} has no tokens")));
    }
    if seq.has_reserved() {
        return Err(Error::invalid(format!("intent {text:?} contains a reserved or unknown token")));
    }
    Ok(())
}
