use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ci_retrieval::ad_index::{assign_cis_to_ad, Ad, Aggregation, InvertedIndex};
use ci_retrieval::config::{manifest_path, EngineConfig};
use ci_retrieval::decoder::DecodeParams;
use ci_retrieval::engine::{self, AssignmentRecord, Engine, HeadQueryRecord, PairRecord};
use ci_retrieval::eval::{run_eval, EvalQuery};
use ci_retrieval::jsonl;
use ci_retrieval::query_cache::{warm_cache, WarmOptions};
use ci_retrieval::{CiRecord, CiTrie, NgramScorer, TokenizationScheme, Vocabulary};

#[derive(Debug, Parser)]
#[command(name = "ciret", version, about = "Intent-based ad retrieval pipeline")]
pub struct Cli {
    /// TOML config; relative paths inside it resolve against its directory.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the token vocabulary from the intent corpus.
    BuildVocab {
        #[arg(long)]
        ci_corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        tokenization: Option<Scheme>,
    },
    /// Fit the n-gram scorer on (context, intent) pairs.
    FitScorer {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pairs for a separate ad-side scorer.
        #[arg(long)]
        ad_pairs: Option<PathBuf>,
        #[arg(long)]
        ad_out: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Deduplicate the intent corpus and write the intent set with ids.
    BuildTrie {
        #[arg(long)]
        ci_corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        min_support: Option<usize>,
    },
    /// Decode intents for every ad with the offline profile.
    AssignCis {
        #[arg(long)]
        ads: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Build the intent-to-ad inverted index from assignments.
    BuildIndex {
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode head queries with the offline profile into a cache snapshot.
    WarmCache {
        #[arg(long)]
        head_queries: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        min_freq: Option<u64>,
        /// Timestamp stored in the manifest.
        #[arg(long, default_value_t = 0)]
        built_at: u64,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Retrieve ads for one query and print the result as JSON.
    Query {
        #[arg(long = "q", value_name = "QUERY")]
        query: String,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum)]
        aggregation: Option<Agg>,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Serve retrieval over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long)]
        top_k: Option<usize>,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Run the eval dataset and write report.json and report.txt.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[command(flatten)]
        profile: ProfileArgs,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Scheme {
    Unicode,
    Whitespace,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Agg {
    Max,
    Sum,
}

/// Overrides for the decode profile a command uses.
#[derive(Debug, Clone, Default, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, conflicts_with = "no_truncation")]
    pub truncation_margin: Option<f64>,
    #[arg(long)]
    pub no_truncation: bool,
}

impl ProfileArgs {
    fn apply(&self, p: &mut DecodeParams) {
        if let Some(b) = self.beam_size {
            p.beam_size = b;
        }
        if let Some(t) = self.max_len {
            p.max_len = t;
        }
        if let Some(t) = self.temperature {
            p.temperature = t;
        }
        if let Some(m) = self.truncation_margin {
            p.truncation_margin = Some(m);
        }
        if self.no_truncation {
            p.truncation_margin = None;
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    let Some(path) = path else {
        return Ok(EngineConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut config: EngineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    config.paths.resolve(base);
    Ok(config)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::BuildVocab { ci_corpus, out, tokenization } => {
            set(&mut config.paths.ci_corpus, ci_corpus);
            set(&mut config.paths.vocab, out);
            if let Some(s) = tokenization {
                config.tokenization = match s {
                    Scheme::Unicode => TokenizationScheme::UnicodeWord,
                    Scheme::Whitespace => TokenizationScheme::Whitespace,
                };
            }
            build_vocab(&config)
        }
        Command::FitScorer { pairs, out, ad_pairs, ad_out, order, alpha } => {
            set(&mut config.paths.pairs, pairs);
            set(&mut config.paths.scorer, out);
            if ad_pairs.is_some() {
                config.paths.ad_pairs = ad_pairs;
            }
            if ad_out.is_some() {
                config.paths.ad_scorer = ad_out;
            }
            set(&mut config.scorer.order, order);
            set(&mut config.scorer.alpha, alpha);
            fit_scorer(&config)
        }
        Command::BuildTrie { ci_corpus, out, min_support } => {
            set(&mut config.paths.ci_corpus, ci_corpus);
            set(&mut config.paths.ci_set, out);
            set(&mut config.min_support, min_support);
            build_trie(&config)
        }
        Command::AssignCis { ads, out, cap, threads, profile } => {
            set(&mut config.paths.ads, ads);
            set(&mut config.paths.assignments, out);
            set(&mut config.assign_cap, cap);
            profile.apply(&mut config.offline);
            assign_cis(&config, threads.unwrap_or_else(default_threads))
        }
        Command::BuildIndex { assignments, out } => {
            set(&mut config.paths.assignments, assignments);
            set(&mut config.paths.index, out);
            build_index(&config)
        }
        Command::WarmCache { head_queries, out, min_freq, built_at, profile } => {
            set(&mut config.paths.head_queries, head_queries);
            set(&mut config.paths.cache, out);
            set(&mut config.cache_min_freq, min_freq);
            profile.apply(&mut config.offline);
            warm(&config, built_at)
        }
        Command::Query { query, top_k, aggregation, profile } => {
            set(&mut config.top_k, top_k);
            if let Some(a) = aggregation {
                config.aggregation = match a {
                    Agg::Max => Aggregation::Max,
                    Agg::Sum => Aggregation::Sum,
                };
            }
            profile.apply(&mut config.online);
            let engine = Engine::load(&config)?;
            let result = engine.retrieve(&query, config.top_k)?;
            println!("{}", serde_json::to_string(&result)?);
            Ok(())
        }
        Command::Serve { bind, top_k, profile } => {
            set(&mut config.top_k, top_k);
            profile.apply(&mut config.online);
            let engine = Arc::new(Engine::load(&config)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
                eprintln!("listening on {}", listener.local_addr()?);
                crate::server::serve(listener, engine).await
            })
        }
        Command::Eval { dataset, out_dir, depth, threads, profile } => {
            set(&mut config.paths.eval_dataset, dataset);
            set(&mut config.paths.report_dir, out_dir);
            set(&mut config.eval_depth, depth);
            profile.apply(&mut config.online);
            eval(&config, threads)
        }
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    jsonl::write_path(path, records)?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl::read_path(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Deserialize)]
struct CorpusLine {
    text: String,
}

fn build_vocab(config: &EngineConfig) -> Result<()> {
    let corpus: Vec<CorpusLine> = read_jsonl(&config.paths.ci_corpus)?;
    let vocab = Vocabulary::build(corpus.iter().map(|l| l.text.as_str()), config.tokenization)?;
    let mut w = create(&config.paths.vocab)?;
    vocab.write_to(&mut w)?;
    w.flush()?;
    eprintln!("vocab: {} ids -> {}", vocab.len(), config.paths.vocab.display());
    Ok(())
}

fn vocab(config: &EngineConfig) -> Result<Vocabulary> {
    engine::load_vocab(&config.paths.vocab, config.tokenization)
        .with_context(|| format!("loading vocab {}", config.paths.vocab.display()))
}

fn trie(config: &EngineConfig, vocab: &Vocabulary) -> Result<CiTrie> {
    engine::load_trie(&config.paths.ci_set, vocab)
        .with_context(|| format!("loading intent set {}", config.paths.ci_set.display()))
}

fn fit_one(config: &EngineConfig, vocab: &Vocabulary, pairs: &Path, out: &Path) -> Result<()> {
    let records: Vec<PairRecord> = read_jsonl(pairs)?;
    let tokenized = engine::tokenize_pairs(&records, vocab).with_context(|| format!("tokenizing {}", pairs.display()))?;
    let scorer = NgramScorer::fit(&tokenized, config.scorer, vocab.len(), vocab.scheme())?;
    let mut w = create(out)?;
    scorer.write_to(&mut w)?;
    w.flush()?;
    eprintln!("scorer: {} pairs -> {}", records.len(), out.display());
    Ok(())
}

fn fit_scorer(config: &EngineConfig) -> Result<()> {
    let vocab = vocab(config)?;
    let p = &config.paths;
    fit_one(config, &vocab, &p.pairs, &p.scorer)?;
    match (&p.ad_pairs, &p.ad_scorer) {
        (Some(pairs), Some(out)) => fit_one(config, &vocab, pairs, out),
        (Some(_), None) => bail!("ad pairs given but no ad scorer output path"),
        _ => Ok(()),
    }
}

fn build_trie(config: &EngineConfig) -> Result<()> {
    let vocab = vocab(config)?;
    let records: Vec<CiRecord> = read_jsonl(&config.paths.ci_corpus)?;
    let opts = ci_retrieval::ci_trie::TrieBuildOptions { min_support: config.min_support };
    let (trie, report) = CiTrie::from_records(&records, &vocab, opts)?;
    write_jsonl(&config.paths.ci_set, trie.records())?;
    eprintln!(
        "intent set: {} intents from {} lines ({} spellings, {} dropped) -> {}",
        trie.len(),
        records.len(),
        report.aliases.len(),
        report.dropped,
        config.paths.ci_set.display()
    );
    Ok(())
}

fn assign_cis(config: &EngineConfig, threads: usize) -> Result<()> {
    let vocab = vocab(config)?;
    let trie = trie(config, &vocab)?;
    let scorer_path = config.paths.ad_scorer.as_ref().unwrap_or(&config.paths.scorer);
    let scorer = engine::load_scorer(scorer_path).with_context(|| format!("loading scorer {}", scorer_path.display()))?;
    let ads: Vec<Ad> = read_jsonl(&config.paths.ads)?;
    if ads.is_empty() {
        bail!("no ads in {}", config.paths.ads.display());
    }
    let chunk = ads.len().div_ceil(threads.clamp(1, ads.len()));
    let outcomes: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = ads
            .chunks(chunk)
            .map(|part| {
                let (scorer, trie) = (&scorer, &trie);
                s.spawn(move || {
                    part.iter()
                        .map(|ad| assign_cis_to_ad(ad, scorer, trie, &config.offline, config.assign_cap))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("assignment worker panicked")).collect()
    });
    let mut records = Vec::with_capacity(ads.len());
    let mut failed = 0;
    for (ad, outcome) in ads.iter().zip(outcomes) {
        match outcome {
            Ok(cis) => records.push(AssignmentRecord { ad_id: ad.ad_id.clone(), ci_ids: cis.iter().map(|c| c.ci_id).collect() }),
            Err(e) => {
                failed += 1;
                eprintln!("warning: {e}");
            }
        }
    }
    write_jsonl(&config.paths.assignments, &records)?;
    eprintln!("assignments: {} ads ({} failed) -> {}", records.len(), failed, config.paths.assignments.display());
    Ok(())
}

fn build_index(config: &EngineConfig) -> Result<()> {
    let vocab = vocab(config)?;
    let trie = trie(config, &vocab)?;
    let records: Vec<AssignmentRecord> = read_jsonl(&config.paths.assignments)?;
    let assignments: Vec<_> = records.into_iter().map(|r| (r.ad_id, r.ci_ids)).collect();
    let index = InvertedIndex::build(&assignments, &trie)?;
    let mut w = create(&config.paths.index)?;
    index.write_postings(&mut w)?;
    w.flush()?;
    write_json(&manifest_path(&config.paths.index), &index.manifest())?;
    eprintln!("index: {} ads -> {}", index.ad_count(), config.paths.index.display());
    Ok(())
}

fn warm(config: &EngineConfig, built_at: u64) -> Result<()> {
    let vocab = vocab(config)?;
    let trie = trie(config, &vocab)?;
    let scorer = engine::load_scorer(&config.paths.scorer)
        .with_context(|| format!("loading scorer {}", config.paths.scorer.display()))?;
    let head: Vec<HeadQueryRecord> = read_jsonl(&config.paths.head_queries)?;
    let head: Vec<(String, u64)> = head.into_iter().map(|h| (h.query, h.freq)).collect();
    let opts = WarmOptions { min_freq: config.cache_min_freq, profile: "offline".into(), built_at };
    let report = warm_cache(&head, &scorer, &trie, &config.offline, &opts)?;
    for (q, e) in &report.failures {
        eprintln!("warning: skipped {q:?}: {e}");
    }
    let mut w = create(&config.paths.cache)?;
    report.snapshot.write_entries(&mut w)?;
    w.flush()?;
    write_json(&manifest_path(&config.paths.cache), &report.snapshot.manifest())?;
    eprintln!(
        "cache: {} queries ({} below threshold, {} failed) -> {}",
        report.snapshot.len(),
        report.below_threshold,
        report.failures.len(),
        config.paths.cache.display()
    );
    Ok(())
}

fn eval(config: &EngineConfig, threads: usize) -> Result<()> {
    let engine = Engine::load(config)?;
    let dataset: Vec<EvalQuery> = read_jsonl(&config.paths.eval_dataset)?;
    let report = run_eval(&engine, &dataset, config.eval_depth, threads)?;
    let dir = &config.paths.report_dir;
    let mut w = create(&dir.join("report.json"))?;
    report.write_json(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("report.txt"))?;
    report.write_text(&mut w)?;
    w.flush()?;
    if report.summary.failed > 0 {
        eprintln!("warning: {} queries failed", report.summary.failed);
    }
    report.write_text(std::io::stderr())?;
    Ok(())
}
