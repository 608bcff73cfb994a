//! Retrieval metrics (HR@K, AP, MAP, ACR) and the dataset-driven harness.
//!
//! A ground-truth ad missing from the generated list contributes 0 to its
//! query's AP sum.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, RetrievalResult};
use crate::error::{Error, Result};

/// Cutoffs reported by [`run_eval`].
pub const REPORT_KS: [usize; 3] = [50, 100, 500];

/// One line of an eval dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuery {
    pub query: String,
    pub relevant_ad_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRecord {
    query: String,
    ground_truth: BTreeSet<String>,
    generated: Vec<String>,
}

impl EvalRecord {
    /// Duplicate ids in `generated` are rejected so positions stay well defined.
    pub fn new(
        query: impl Into<String>,
        ground_truth: impl IntoIterator<Item = impl Into<String>>,
        generated: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self> {
        let generated: Vec<String> = generated.into_iter().map(Into::into).collect();
        let mut seen = HashSet::with_capacity(generated.len());
        if let Some(dup) = generated.iter().find(|a| !seen.insert(a.as_str())) {
            return Err(Error::invalid(format!("ad {dup:?} appears twice in the generated list")));
        }
        Ok(EvalRecord {
            query: query.into(),
            ground_truth: ground_truth.into_iter().map(Into::into).collect(),
            generated,
        })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn ground_truth(&self) -> &BTreeSet<String> {
        &self.ground_truth
    }

    pub fn generated(&self) -> &[String] {
        &self.generated
    }

    fn require_gt(&self) -> Result<()> {
        if self.ground_truth.is_empty() {
            return Err(Error::UndefinedMetric(format!("query {:?} has no ground-truth ads", self.query)));
        }
        Ok(())
    }
}

pub fn hit_ratio_at_k(record: &EvalRecord, k: usize) -> Result<f64> {
    record.require_gt()?;
    if k < 1 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let hits = record.generated.iter().take(k).filter(|a| record.ground_truth.contains(*a)).count();
    Ok(hits as f64 / record.ground_truth.len() as f64)
}

pub fn average_precision(record: &EvalRecord) -> Result<f64> {
    record.require_gt()?;
    let mut sum = 0.0;
    let mut found = 0usize;
    for (i, ad) in record.generated.iter().enumerate() {
        if record.ground_truth.contains(ad) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / record.ground_truth.len() as f64)
}

pub fn mean_average_precision(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("MAP over zero queries".into()));
    }
    let mut sum = 0.0;
    for r in records {
        sum += average_precision(r)?;
    }
    Ok(sum / records.len() as f64)
}

pub fn ad_coverage_rate(results: &[RetrievalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::UndefinedMetric("ACR over zero requests".into()));
    }
    let covered = results.iter().filter(|r| !r.ads.is_empty()).count();
    Ok(covered as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub ground_truth: usize,
    pub returned: usize,
    #[serde(rename = "hr@50")]
    pub hr_50: f64,
    #[serde(rename = "hr@100")]
    pub hr_100: f64,
    #[serde(rename = "hr@500")]
    pub hr_500: f64,
    pub ap: f64,
    pub covered: bool,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub queries: usize,
    pub depth: usize,
    #[serde(rename = "hr@50")]
    pub hr_50: f64,
    #[serde(rename = "hr@100")]
    pub hr_100: f64,
    #[serde(rename = "hr@500")]
    pub hr_500: f64,
    pub map: f64,
    pub acr: f64,
    pub pv: usize,
    pub adpv: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub per_query: Vec<QueryMetrics>,
    /// Queries whose retrieval failed, with the error text.
    pub failures: Vec<(String, String)>,
}

#[derive(Serialize)]
struct FailureLine<'a> {
    query: &'a str,
    error: &'a str,
}

impl EvalReport {
    /// Summary line, then one line per scored query, then one per failure.
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        write_line(&mut w, &self.summary)?;
        for q in &self.per_query {
            write_line(&mut w, q)?;
        }
        for (query, error) in &self.failures {
            write_line(&mut w, &FailureLine { query, error })?;
        }
        Ok(())
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.summary;
        writeln!(w, "queries  {}", s.queries)?;
        writeln!(w, "depth    {}", s.depth)?;
        writeln!(w, "HR@50    {:.4}", s.hr_50)?;
        writeln!(w, "HR@100   {:.4}", s.hr_100)?;
        writeln!(w, "HR@500   {:.4}", s.hr_500)?;
        writeln!(w, "MAP      {:.4}", s.map)?;
        writeln!(w, "ACR      {:.4}  ({}/{})", s.acr, s.adpv, s.pv)?;
        writeln!(w, "failed   {}", s.failed)?;
        Ok(())
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Retrieve every dataset query at `depth` and score the results. Queries
/// are retrieved on `threads` workers; the reduction runs in dataset order.
pub fn run_eval(engine: &Engine, dataset: &[EvalQuery], depth: usize, threads: usize) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::UndefinedMetric("empty eval dataset".into()));
    }
    if depth < 1 {
        return Err(Error::invalid("eval depth must be at least 1"));
    }
    let threads = threads.clamp(1, dataset.len());
    let chunk = dataset.len().div_ceil(threads);
    let mut outcomes: Vec<Result<RetrievalResult>> = Vec::with_capacity(dataset.len());
    std::thread::scope(|s| {
        let handles: Vec<_> = dataset
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|q| engine.retrieve(&q.query, depth)).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            outcomes.extend(h.join().expect("eval worker panicked"));
        }
    });

    let mut per_query = Vec::new();
    let mut records = Vec::new();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (q, outcome) in dataset.iter().zip(outcomes) {
        let r = match outcome {
            Ok(r) => r,
            Err(e) => {
                failures.push((q.query.clone(), e.to_string()));
                continue;
            }
        };
        let record = EvalRecord::new(&q.query, &q.relevant_ad_ids, r.ads.iter().map(|h| h.ad_id.as_str()))?;
        let hr: HashMap<usize, f64> =
            REPORT_KS.iter().map(|&k| Ok((k, hit_ratio_at_k(&record, k)?))).collect::<Result<_>>()?;
        per_query.push(QueryMetrics {
            query: q.query.clone(),
            ground_truth: record.ground_truth.len(),
            returned: record.generated.len(),
            hr_50: hr[&50],
            hr_100: hr[&100],
            hr_500: hr[&500],
            ap: average_precision(&record)?,
            covered: !r.ads.is_empty(),
            cache_hit: r.cache_hit,
        });
        records.push(record);
        results.push(r);
    }
    if records.is_empty() {
        return Err(Error::UndefinedMetric("every eval query failed".into()));
    }
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    let adpv = results.iter().filter(|r| !r.ads.is_empty()).count();
    let summary = EvalSummary {
        queries: dataset.len(),
        depth,
        hr_50: mean(|q| q.hr_50),
        hr_100: mean(|q| q.hr_100),
        hr_500: mean(|q| q.hr_500),
        map: mean_average_precision(&records)?,
        acr: ad_coverage_rate(&results)?,
        pv: results.len(),
        adpv,
        failed: failures.len(),
    };
    Ok(EvalReport { summary, per_query, failures })
}
