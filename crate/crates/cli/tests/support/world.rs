//! Seeded synthetic intent sets, click pairs and engines at arbitrary scale.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ci_retrieval::ad_index::InvertedIndex;
use ci_retrieval::engine::{Engine, EngineState, RuntimeSettings};
use ci_retrieval::query_cache::CacheSnapshot;
use ci_retrieval::scorer::NgramConfig;
use ci_retrieval::{CiId, CiTrie, NgramScorer, Scorer, TokenSeq, TokenizationScheme, Vocabulary};

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "be", "do", "fu", "ga", "hi", "jo", "ku", "la", "mo", "ni", "po",
    "ri", "su", "te", "wa", "zo",
];

/// Distinct pseudo-word for each index.
pub fn word(mut i: usize) -> String {
    let mut w = String::new();
    loop {
        w.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
        if i == 0 {
            break;
        }
    }
    w
}

pub struct World {
    pub vocab: Arc<Vocabulary>,
    pub trie: Arc<CiTrie>,
    pub scorer: Arc<NgramScorer>,
    pub texts: Vec<String>,
    /// Queries seen in the click pairs.
    pub queries: Vec<String>,
    pub words: Vec<String>,
}

pub struct WorldParams {
    pub cis: usize,
    pub words: usize,
    pub queries: usize,
    pub seed: u64,
}

impl World {
    pub fn new(params: &WorldParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let words: Vec<String> = (0..params.words).map(word).collect();
        // Skewed token popularity so intents share prefixes.
        let popularity = WeightedIndex::new((0..params.words).map(|r| 1.0 / (r as f64 + 10.0))).unwrap();
        let lengths = WeightedIndex::new([0.2, 0.4, 0.4]).unwrap();
        let mut seen = BTreeSet::new();
        let mut texts = Vec::with_capacity(params.cis);
        while texts.len() < params.cis {
            let len = 2 + lengths.sample(&mut rng);
            let t: Vec<&str> = (0..len).map(|_| words[popularity.sample(&mut rng)].as_str()).collect();
            let t = t.join(" ");
            if seen.insert(t.clone()) {
                texts.push(t);
            }
        }
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), TokenizationScheme::UnicodeWord).unwrap();
        let seqs: Vec<(String, TokenSeq)> = texts.iter().map(|t| (t.clone(), vocab.tokenize(t).unwrap())).collect();
        let (trie, _) = CiTrie::build(&seqs).unwrap();

        let mut queries = Vec::with_capacity(params.queries);
        let mut pairs = Vec::new();
        let mut qseen = BTreeSet::new();
        while queries.len() < params.queries {
            let topic = rng.gen_range(0..texts.len());
            let tw: Vec<&str> = texts[topic].split(' ').collect();
            let take = rng.gen_range(1..=2);
            let mut q: Vec<String> = tw.choose_multiple(&mut rng, take).map(|s| s.to_string()).collect();
            if rng.gen_bool(0.5) {
                q.push(words[rng.gen_range(0..words.len())].clone());
            }
            let q = q.join(" ");
            if !qseen.insert(q.clone()) {
                continue;
            }
            pairs.push((q.clone(), seqs[topic].1.clone()));
            for _ in 0..2 {
                let other = rng.gen_range(0..texts.len());
                pairs.push((q.clone(), seqs[other].1.clone()));
            }
            queries.push(q);
        }
        let scorer = NgramScorer::fit(&pairs, NgramConfig::default(), vocab.len(), vocab.scheme()).unwrap();
        World {
            vocab: Arc::new(vocab),
            trie: Arc::new(trie),
            scorer: Arc::new(scorer),
            texts,
            queries,
            words,
        }
    }

    /// Queries built from vocabulary words that never appear in the pairs.
    pub fn novel_queries(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen: BTreeSet<&str> = self.queries.iter().map(String::as_str).collect();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let k = rng.gen_range(1..=3);
            let q: Vec<&str> = (0..k).map(|_| self.words[rng.gen_range(0..self.words.len())].as_str()).collect();
            let q = q.join(" ");
            if !seen.contains(q.as_str()) {
                out.push(q);
            }
        }
        out
    }

    /// Index where ad `i` is posted on `per_ad` random intents.
    pub fn random_index(&self, ads: usize, per_ad: usize, seed: u64) -> InvertedIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.trie.len() as u32;
        let assignments: Vec<(String, Vec<CiId>)> = (0..ads)
            .map(|i| (format!("ad{i:06}"), (0..per_ad).map(|_| CiId(rng.gen_range(0..n))).collect()))
            .collect();
        InvertedIndex::build(&assignments, &self.trie).unwrap()
    }

    pub fn engine(&self, index: InvertedIndex, cache: CacheSnapshot, settings: RuntimeSettings) -> Engine {
        let scorer: Arc<dyn Scorer> = self.scorer.clone();
        let state = EngineState::new(self.trie.clone(), Arc::new(index), Arc::new(cache)).unwrap();
        Engine::new(self.vocab.clone(), scorer.clone(), scorer, state, settings).unwrap()
    }
}
