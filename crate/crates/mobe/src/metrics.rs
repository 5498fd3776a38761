//! Evaluation metrics and the persisted metrics report.
//!
//! Multi-label classification is scored with macro mAP, macro AUC and the
//! Hamming fraction; cross-modal retrieval with pooled top-1 accuracy in both
//! directions. Implementations use sort/rank formulations; the test suites
//! hold independent brute-force oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A macro-averaged score plus the categories that had to be skipped for
/// lacking positives (or negatives, for AUC).
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMetric {
    pub value: f64,
    pub skipped_categories: Vec<usize>,
}

fn check_score_label_shapes(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let ss = scores.shape();
    let ls = labels.shape();
    if ss != ls || ss.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: ss.to_vec(),
            rhs: ls.to_vec(),
        });
    }
    Ok((ss[0], ss[1]))
}

/// Ranks samples per category by descending score (stable: ties keep sample
/// order) and averages precision at every positive rank, then macro-averages
/// over categories with at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<MacroMetric> {
    let (n, c) = check_score_label_shapes(scores, labels)?;
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for cat in 0..c {
        let positives = (0..n).filter(|i| labels.data()[i * c + cat] == 1.0).count();
        if positives == 0 {
            skipped.push(cat);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores.data()[b * c + cat]
                .partial_cmp(&scores.data()[a * c + cat])
                .expect("finite scores")
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &sample) in order.iter().enumerate() {
            if labels.data()[sample * c + cat] == 1.0 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / positives as f64);
    }
    if aps.is_empty() {
        return Err(Error::invalid(
            "mean_average_precision: no category has a positive label",
        ));
    }
    Ok(MacroMetric {
        value: aps.iter().sum::<f64>() / aps.len() as f64,
        skipped_categories: skipped,
    })
}

/// Macro AUC via the rank-sum formulation with average ranks on ties:
/// `P(score+ > score-) + 0.5 P(tie)` per category.
pub fn roc_auc(scores: &Tensor, labels: &Tensor) -> Result<MacroMetric> {
    let (n, c) = check_score_label_shapes(scores, labels)?;
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for cat in 0..c {
        let pos = (0..n).filter(|i| labels.data()[i * c + cat] == 1.0).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            skipped.push(cat);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores.data()[a * c + cat]
                .partial_cmp(&scores.data()[b * c + cat])
                .expect("finite scores")
        });
        // average ranks over tied runs (1-based ranks)
        let mut rank_sum_pos = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            let v = scores.data()[order[i] * c + cat];
            while j < n && scores.data()[order[j] * c + cat] == v {
                j += 1;
            }
            let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
            for &sample in &order[i..j] {
                if labels.data()[sample * c + cat] == 1.0 {
                    rank_sum_pos += avg_rank;
                }
            }
            i = j;
        }
        let p = pos as f64;
        let auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64);
        aucs.push(auc);
    }
    if aucs.is_empty() {
        return Err(Error::invalid(
            "roc_auc: every category is degenerate (all-positive or all-negative)",
        ));
    }
    Ok(MacroMetric {
        value: aucs.iter().sum::<f64>() / aucs.len() as f64,
        skipped_categories: skipped,
    })
}

/// Fraction of label positions where the thresholded prediction differs from
/// the label. Predictions threshold the sigmoid at 0.5, i.e. a position is
/// predicted positive iff its logit is strictly greater than zero.
pub fn hamming_distance(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    let (n, c) = check_score_label_shapes(scores, labels)?;
    let mismatches = scores
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(s, l)| (**s > 0.0) != (**l == 1.0))
        .count();
    Ok(mismatches as f64 / (n * c) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The seeded distractor pool for one (query, repeat) pair: `pool_size - 1`
/// gallery indices other than the query's partner, sampled without
/// replacement. Exposed so oracles can replay identical pools.
pub fn retrieval_pool(
    n: usize,
    query: usize,
    pool_size: usize,
    repeat: usize,
    seed: u64,
) -> Vec<usize> {
    let mut r = rng::stream_indexed(seed, "retrieval-pool", (query * 1_000_003 + repeat) as u64);
    let mut candidates: Vec<usize> = (0..n).filter(|i| *i != query).collect();
    let take = pool_size - 1;
    let m = candidates.len();
    for i in 0..take {
        let j = r.random_range(i..m);
        candidates.swap(i, j);
    }
    candidates.truncate(take);
    candidates
}

/// Pooled top-1 retrieval accuracy: for every query and repeat, success iff
/// the true partner has the strictly greatest cosine similarity against the
/// partner plus `pool_size - 1` seeded distractors. Ties count as failure.
pub fn retrieval_accuracy(
    queries: &Tensor,
    gallery: &Tensor,
    pool_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let qs = queries.shape();
    let gs = gallery.shape();
    if qs != gs || qs.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "retrieval_accuracy",
            lhs: qs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    let n = qs[0];
    if pool_size < 2 {
        return Err(Error::invalid("retrieval pool must hold at least 2 items"));
    }
    if pool_size > n {
        return Err(Error::invalid(format!(
            "retrieval pool {pool_size} exceeds gallery size {n}"
        )));
    }
    if repeats == 0 {
        return Err(Error::invalid("retrieval repeats must be at least 1"));
    }
    let mut successes = 0usize;
    for query in 0..n {
        // similarity against the whole gallery once per query
        let sims: Vec<f64> = (0..n)
            .map(|j| cosine(queries.row(query), gallery.row(j)))
            .collect();
        let own = sims[query];
        for repeat in 0..repeats {
            let pool = retrieval_pool(n, query, pool_size, repeat, seed);
            let beaten = pool.iter().all(|&j| own > sims[j]);
            if beaten {
                successes += 1;
            }
        }
    }
    Ok(successes as f64 / (n * repeats) as f64)
}

/// Per-subject metric bundle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SubjectMetrics {
    pub map: f64,
    pub auc: f64,
    pub hamming: f64,
    pub image_retrieval: f64,
    pub fmri_retrieval: f64,
}

impl SubjectMetrics {
    pub fn zeros() -> Self {
        SubjectMetrics {
            map: 0.0,
            auc: 0.0,
            hamming: 0.0,
            image_retrieval: 0.0,
            fmri_retrieval: 0.0,
        }
    }
}

/// Full evaluation artifact: per-subject metrics, their arithmetic mean, and
/// provenance. Wall-clock is informational and excluded from determinism
/// digests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub per_subject: Vec<SubjectMetrics>,
    pub averaged: SubjectMetrics,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn new(
        label: impl Into<String>,
        seed: u64,
        config_hash: impl Into<String>,
        dataset_hash: impl Into<String>,
        per_subject: Vec<SubjectMetrics>,
        wall_clock_secs: f64,
    ) -> Self {
        let averaged = Self::average(&per_subject);
        MetricsReport {
            label: label.into(),
            seed,
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.into(),
            per_subject,
            averaged,
            wall_clock_secs,
        }
    }

    pub fn average(per_subject: &[SubjectMetrics]) -> SubjectMetrics {
        let n = per_subject.len().max(1) as f64;
        let mut avg = SubjectMetrics::zeros();
        for m in per_subject {
            avg.map += m.map;
            avg.auc += m.auc;
            avg.hamming += m.hamming;
            avg.image_retrieval += m.image_retrieval;
            avg.fmri_retrieval += m.fmri_retrieval;
        }
        avg.map /= n;
        avg.auc /= n;
        avg.hamming /= n;
        avg.image_retrieval /= n;
        avg.fmri_retrieval /= n;
        avg
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Everything except wall-clock, serialized canonically; equal digests
    /// mean equal results.
    pub fn determinism_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        let bytes = serde_json::to_vec(&clone).expect("report serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub const CSV_HEADER: &'static str =
        "label,seed,subject,map,auc,hamming,image_retrieval,fmri_retrieval,config_hash,dataset_hash";

    /// One flat CSV row per subject plus an `avg` row.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        let mut push = |subject: String, m: &SubjectMetrics| {
            rows.push(format!(
                "{},{},{},{},{},{},{},{},{},{}",
                self.label,
                self.seed,
                subject,
                m.map,
                m.auc,
                m.hamming,
                m.image_retrieval,
                m.fmri_retrieval,
                self.config_hash,
                self.dataset_hash
            ));
        };
        for (s, m) in self.per_subject.iter().enumerate() {
            push(s.to_string(), m);
        }
        push("avg".into(), &self.averaged);
        rows
    }
}
