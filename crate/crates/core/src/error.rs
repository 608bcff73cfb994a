use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a retrieval failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Normalize,
    Cache,
    Decode,
    Lookup,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Normalize => "normalize",
            Stage::Cache => "cache",
            Stage::Decode => "decode",
            Stage::Lookup => "lookup",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("prefix is not a path in the intent trie: {0:?}")]
    InvalidPrefix(Vec<u32>),

    #[error("scorer failure: {0}")]
    Scorer(String),

    #[error("decode failed for context {context:?}: {source}")]
    Decode {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("intent assignment failed for ad {ad_id:?}: {source}")]
    Assignment {
        ad_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("index build failed at ad {ad_id:?}: {reason}")]
    IndexBuild { ad_id: String, reason: String },

    #[error("ad {0:?} is already indexed")]
    DuplicateAd(String),

    #[error("ad {0:?} is not indexed")]
    MissingAd(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("retrieval failed in {stage} stage: {source}")]
    Retrieval {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed record at line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
