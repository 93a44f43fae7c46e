//! Native BLEU-k and ROUGE-L over a lowercase, punctuation-free whitespace
//! tokenization, plus the mean-over-samples caption report.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::scorer::ScorerRegistry;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform weights over 1..=k, clipped counts, no
/// smoothing, and the closest reference length (shorter on ties) for the
/// brevity penalty.
pub fn bleu_k(candidate: &str, references: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("BLEU order must be at least 1".into()));
    }
    if references.is_empty() {
        return Err(Error::Argument("BLEU needs at least one reference".into()));
    }
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let c = cand.len();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=k {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand_counts
            .iter()
            .map(|(g, &cnt)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                cnt.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references are non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / k as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, `(1 + β²)PR / (R + β²P)`; zero when either side is
/// empty or nothing is shared.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// A metric value, or a marker for a metric with no scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Value(f64),
    Unavailable(String),
}

impl MetricValue {
    pub const UNAVAILABLE: &'static str = "unavailable";

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Unavailable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub count: usize,
    pub metrics: BTreeMap<String, MetricValue>,
}

impl CaptionReport {
    pub fn to_kv(&self) -> String {
        let mut out = format!("count\t{}\n", self.count);
        for (name, v) in &self.metrics {
            match v {
                MetricValue::Value(x) => out.push_str(&format!("{name}\t{x}\n")),
                MetricValue::Unavailable(m) => out.push_str(&format!("{name}\t{m}\n")),
            }
        }
        out
    }
}

pub const NATIVE_METRICS: [&str; 5] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"];

fn is_native(name: &str) -> bool {
    name == "rouge_l" || name.strip_prefix("bleu").is_some_and(|k| k.parse::<usize>().is_ok())
}

fn native(name: &str, cand: &str, refs: &[String]) -> Option<Result<f64>> {
    if let Some(k) = name.strip_prefix("bleu").and_then(|k| k.parse::<usize>().ok()) {
        return Some(bleu_k(cand, refs, k));
    }
    if name == "rouge_l" {
        if refs.is_empty() {
            return Some(Err(Error::Argument("ROUGE-L needs at least one reference".into())));
        }
        let best = refs.iter().map(|r| rouge_l(cand, r)).fold(0.0, f64::max);
        return Some(Ok(best));
    }
    None
}

/// Mean per-caption score for each requested metric. Native metrics are
/// computed in-process; other names are looked up in `registry` and
/// reported unavailable when absent. ROUGE-L takes the best reference.
pub fn caption_report(
    candidates: &[String],
    references: &[Vec<String>],
    metrics: &[String],
    registry: &ScorerRegistry,
) -> Result<CaptionReport> {
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} candidates for {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    let n = candidates.len();
    let mut out = BTreeMap::new();
    for name in metrics {
        let value = if is_native(name) {
            let mut sum = 0.0;
            for (c, r) in candidates.iter().zip(references) {
                sum += native(name, c, r).expect("native metric")?;
            }
            MetricValue::Value(if n == 0 { 0.0 } else { sum / n as f64 })
        } else if registry.contains(name) {
            let scores = registry.score(name, candidates, references)?;
            MetricValue::Value(if n == 0 {
                0.0
            } else {
                scores.iter().sum::<f64>() / n as f64
            })
        } else {
            MetricValue::Unavailable(MetricValue::UNAVAILABLE.into())
        };
        out.insert(name.clone(), value);
    }
    Ok(CaptionReport { count: n, metrics: out })
}
