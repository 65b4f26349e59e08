//! Ranking evaluation: leave-one-out protocol with 99 sampled
//! negatives, HR@K / NDCG@K / MRR, and report emission.
//!
//! The target is ranked against the user's negatives with pessimistic
//! ties: equal-scored negatives count as ranked above the target, so
//! 100 equal scores give rank 100. NDCG uses the single-relevant-item
//! form 1/log2(rank+1); MRR is the mean reciprocal rank.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::LeaveOneOutSplit;
use crate::error::{IdpError, Result};
use crate::seqmodel::Scorer;

/// Which held-out item to rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Valid,
    Test,
}

#[derive(Clone, Debug)]
pub struct RankedUser {
    pub user: u32,
    pub target: u32,
    /// 1-based rank among 1 target + 99 negatives.
    pub rank: usize,
    pub target_score: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RankedCandidates {
    pub users: Vec<RankedUser>,
}

impl RankedCandidates {
    pub fn ranks(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.rank).collect()
    }
}

/// Rank one score vector pessimistically: 1 + |{negatives >= target}|.
pub fn rank_of_target(target_score: f64, negative_scores: &[f64]) -> usize {
    1 + negative_scores.iter().filter(|&&s| s >= target_score).count()
}

/// Rank each split user's held-out target against their sampled
/// negatives. The user representation comes from the train prefix
/// (dropout off, deterministic).
pub fn rank_users(
    scorer: &Scorer,
    split: &LeaveOneOutSplit,
    target: EvalTarget,
) -> Result<RankedCandidates> {
    let mut users = Vec::with_capacity(split.users.len());
    for su in &split.users {
        let e_u = scorer.user_representation(&su.train)?;
        let tgt = match target {
            EvalTarget::Valid => su.valid,
            EvalTarget::Test => su.test,
        };
        let target_score = scorer.score_item(&e_u, tgt)?;
        let mut negative_scores = Vec::with_capacity(su.negatives.len());
        for &neg in &su.negatives {
            negative_scores.push(scorer.score_item(&e_u, neg)?);
        }
        users.push(RankedUser {
            user: su.user,
            target: tgt,
            rank: rank_of_target(target_score, &negative_scores),
            target_score,
        });
    }
    Ok(RankedCandidates { users })
}

/// Fraction of users whose target ranked in the top k.
pub fn hit_rate(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Mean of 1/log2(rank+1) for ranks within k, else 0
/// (single-relevant-item NDCG).
pub fn ndcg(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r as f64) + 1.0).log2() } else { 0.0 })
        .sum();
    sum / ranks.len() as f64
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    sum / ranks.len() as f64
}

pub const METRIC_KS: [usize; 3] = [1, 3, 5];

/// Metric aggregates plus per-user ranks and run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// (metric name, value) in emission order.
    pub metrics: Vec<(String, f64)>,
    pub ranks: Vec<usize>,
    pub metadata: BTreeMap<String, String>,
}

/// Aggregate a ranking into a report. An empty user set is an error,
/// never a NaN report.
pub fn build_report(
    ranked: &RankedCandidates,
    metadata: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if ranked.users.is_empty() {
        return Err(IdpError::EmptyInput("no users to evaluate".into()));
    }
    let ranks = ranked.ranks();
    let mut metrics = Vec::new();
    for k in METRIC_KS {
        metrics.push((format!("hr@{k}"), hit_rate(&ranks, k)));
    }
    for k in METRIC_KS {
        metrics.push((format!("ndcg@{k}"), ndcg(&ranks, k)));
    }
    metrics.push(("mrr".to_string(), mrr(&ranks)));
    Ok(EvalReport {
        metrics,
        ranks,
        metadata,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    StructuredText,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// `# key=value` metadata lines, then `metric<TAB>value` with fixed
    /// 6-decimal floats; byte-stable for identical inputs.
    pub fn to_tsv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        for (name, value) in &self.metrics {
            let _ = writeln!(out, "{name}\t{value:.6}");
        }
        out
    }

    pub fn to_text_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ranking evaluation ({} users)", self.ranks.len());
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "  {k} = {v}");
        }
        for (name, value) in &self.metrics {
            let _ = writeln!(out, "  {name:<8} {value:.6}");
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        let path = path.as_ref();
        let body = match format {
            ReportFormat::Tsv => self.to_tsv_string(),
            ReportFormat::StructuredText => self.to_text_string(),
        };
        fs::write(path, body).map_err(|e| IdpError::io(path, e))
    }

    /// Parse the TSV format back (metrics and metadata; per-user ranks
    /// are not serialized).
    pub fn parse_tsv(text: &str) -> Result<EvalReport> {
        let mut metadata = BTreeMap::new();
        let mut metrics = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                match rest.split_once('=') {
                    Some((k, v)) => {
                        metadata.insert(k.to_string(), v.to_string());
                    }
                    None => {
                        return Err(IdpError::Parse {
                            path: "<report>".into(),
                            line: i + 1,
                            msg: "metadata comment without key=value".into(),
                        })
                    }
                }
                continue;
            }
            let (name, value) = line.split_once('\t').ok_or_else(|| IdpError::Parse {
                path: "<report>".into(),
                line: i + 1,
                msg: "expected metric<TAB>value".into(),
            })?;
            let value: f64 = value.parse().map_err(|_| IdpError::Parse {
                path: "<report>".into(),
                line: i + 1,
                msg: format!("bad metric value {value:?}"),
            })?;
            metrics.push((name.to_string(), value));
        }
        if metrics.is_empty() {
            return Err(IdpError::EmptyInput("report has no metric lines".into()));
        }
        Ok(EvalReport {
            metrics,
            ranks: Vec::new(),
            metadata,
        })
    }
}

#[cfg(test)]
mod tests;
