//! Word-level vocabulary for intent phrases and queries.
//!
//! Ids `0` and `1` are reserved for the sequence terminator and the unknown
//! token. Surface tokens follow in sorted order, so a vocabulary depends only
//! on the set of tokens in its corpus.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

pub const END_MARKER: &str = "<END>";
pub const UNK_MARKER: &str = "<UNK>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const END: TokenId = TokenId(0);
    pub const UNK: TokenId = TokenId(1);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn is_reserved(self) -> bool {
        self.0 < 2
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An ordered run of token ids. The terminator is never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn from_raw(ids: &[u32]) -> Self {
        TokenSeq(ids.iter().copied().map(TokenId).collect())
    }

    pub fn has_reserved(&self) -> bool {
        self.0.iter().any(|t| t.is_reserved())
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    pub fn raw(&self) -> Vec<u32> {
        self.0.iter().map(|t| t.0).collect()
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizationScheme {
    /// Split on whitespace after lowercasing.
    Whitespace,
    /// Unicode word boundaries after lowercasing; punctuation is dropped.
    #[default]
    UnicodeWord,
}

impl TokenizationScheme {
    /// Lowercased surface tokens of `text`.
    pub fn split(self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        match self {
            TokenizationScheme::Whitespace => lower.split_whitespace().map(str::to_owned).collect(),
            TokenizationScheme::UnicodeWord => lower.unicode_words().map(str::to_owned).collect(),
        }
    }

    /// Canonical text form: tokens joined by single spaces.
    pub fn normalize(self, text: &str) -> String {
        self.split(text).join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    scheme: TokenizationScheme,
}

impl Vocabulary {
    pub fn build<'a, I>(corpus: I, scheme: TokenizationScheme) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens = BTreeSet::new();
        let mut seen_any = false;
        for text in corpus {
            seen_any = true;
            tokens.extend(scheme.split(text));
        }
        if !seen_any {
            return Err(Error::config("vocabulary corpus is empty"));
        }
        Self::from_tokens(tokens, scheme)
    }

    fn from_tokens<I>(tokens: I, scheme: TokenizationScheme) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
    {
        let mut id_to_token = vec![END_MARKER.to_owned(), UNK_MARKER.to_owned()];
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            if tok == END_MARKER || tok == UNK_MARKER {
                return Err(Error::invalid(format!("token {tok:?} collides with a reserved marker")));
            }
            let id = TokenId(id_to_token.len() as u32);
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        Ok(Vocabulary { token_to_id, id_to_token, scheme })
    }

    /// Total id space, reserved ids included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= 2
    }

    pub fn scheme(&self) -> TokenizationScheme {
        self.scheme
    }

    pub fn end_id(&self) -> TokenId {
        TokenId::END
    }

    pub fn unk_id(&self) -> TokenId {
        TokenId::UNK
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        if id.is_reserved() {
            return None;
        }
        self.id_to_token.get(id.index()).map(String::as_str)
    }

    pub fn normalize(&self, text: &str) -> String {
        self.scheme.normalize(text)
    }

    /// Map `text` to ids; out-of-vocabulary tokens become `<UNK>`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let parts = self.scheme.split(text);
        if parts.is_empty() {
            return Err(Error::invalid(format!("text {text:?} has no tokens")));
        }
        Ok(TokenSeq(
            parts.iter().map(|p| self.id(p).unwrap_or(TokenId::UNK)).collect(),
        ))
    }

    pub fn detokenize(&self, seq: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(seq.len());
        for &id in seq {
            match self.token(id) {
                Some(w) => words.push(w),
                None if id.is_reserved() => {
                    return Err(Error::invalid(format!("reserved id {id} cannot be detokenized")))
                }
                None => return Err(Error::invalid(format!("id {id} is outside the vocabulary"))),
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line; line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, scheme: TokenizationScheme) -> Result<Self> {
        let mut lines = r.lines();
        for (lineno, expected) in [(1, END_MARKER), (2, UNK_MARKER)] {
            match lines.next().transpose()? {
                Some(l) if l == expected => {}
                other => {
                    return Err(Error::Format {
                        line: lineno,
                        reason: format!("expected {expected}, found {other:?}"),
                    })
                }
            }
        }
        let tokens = lines.collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens, scheme)
    }
}
