//! Synthesis traces: one JSON line per evaluated candidate, plus the audit
//! that checks threshold monotonicity and tier soundness.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Discarded,
    /// The candidate could not be scored (for example every image failed).
    Skipped,
}

/// Scores of one tier, in the search's higher-is-better orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierScore {
    pub size: usize,
    pub wins: usize,
    pub mean: f64,
    pub incumbent_mean: f64,
}

impl TierScore {
    /// Majority of strict wins plus a strictly better mean.
    pub fn passes(&self) -> bool {
        self.wins >= self.size.div_ceil(2) && self.mean > self.incumbent_mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub expr_text: String,
    pub fingerprint_hex: String,
    /// Index of the last tier the candidate was scored on.
    pub tier_reached: Option<usize>,
    pub scores_per_tier: Vec<TierScore>,
    pub accepted: bool,
    /// Threshold after this entry, set only on acceptance.
    pub new_threshold: Option<f64>,
    pub wall_ms: u64,
    pub outcome: Outcome,
    /// First acceptance under the mean-only rule (lower-is-better metrics
    /// with no incumbent yet).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub relaxed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

pub fn trace_to_jsonl(entries: &[TraceEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("trace entry serializes") + "\n")
        .collect()
}

pub fn write_trace(path: &Path, entries: &[TraceEntry]) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(trace_to_jsonl(entries).as_bytes()).map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>, TraceError> {
    let io = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TraceError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("entry {index}: seq {seq} out of order")]
    Sequence { index: usize, seq: u64 },
    #[error("entry seq {seq}: threshold fell from {prev} to {next}")]
    ThresholdDecreased { seq: u64, prev: f64, next: f64 },
    #[error("entry seq {seq}: {message}")]
    Inconsistent { seq: u64, message: String },
    #[error("entry seq {seq}: scored on tier {scored} after being discarded at tier {discarded}")]
    TierAfterDiscard { seq: u64, discarded: usize, scored: usize },
}

/// What an audited run looked like.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub entries: usize,
    pub accepted: usize,
    pub discarded: usize,
    pub skipped: usize,
}

/// Checks one trace.
///
/// * `seq` counts up from 0 without gaps.
/// * Thresholds recorded at acceptances never decrease.
/// * A candidate discarded at tier `i` carries scores for tiers `0..=i`
///   only, failed tier `i` and passed every earlier tier.
/// * Accepted candidates passed every one of the `n_tiers` tiers, the last
///   one covering all `n_images` images.
pub fn audit_trace(entries: &[TraceEntry], n_tiers: usize, n_images: usize) -> Result<AuditReport, AuditError> {
    let mut report = AuditReport {
        entries: entries.len(),
        ..AuditReport::default()
    };
    let mut threshold: Option<f64> = None;
    for (index, e) in entries.iter().enumerate() {
        let seq = e.seq;
        let bad = |message: String| AuditError::Inconsistent { seq, message };
        if seq != index as u64 {
            return Err(AuditError::Sequence { index, seq });
        }
        if e.accepted != (e.outcome == Outcome::Accepted) || e.accepted != e.new_threshold.is_some() {
            return Err(bad("accepted flag, outcome and new_threshold disagree".into()));
        }
        let tiers = &e.scores_per_tier;
        if tiers.windows(2).any(|w| w[0].size >= w[1].size) {
            return Err(bad("tier sizes are not strictly increasing".into()));
        }
        if tiers.len() > n_tiers {
            return Err(bad(format!("{} tiers scored, only {n_tiers} exist", tiers.len())));
        }
        match e.outcome {
            Outcome::Accepted => {
                report.accepted += 1;
                if e.tier_reached != Some(n_tiers - 1) || tiers.len() != n_tiers {
                    return Err(bad("accepted without reaching the final tier".into()));
                }
                if tiers.last().map(|t| t.size) != Some(n_images) {
                    return Err(bad("final tier does not cover every image".into()));
                }
                if !e.relaxed && !tiers.iter().all(TierScore::passes) {
                    return Err(bad("accepted although some tier failed".into()));
                }
                let next = e.new_threshold.expect("checked above");
                if let Some(prev) = threshold {
                    if next < prev {
                        return Err(AuditError::ThresholdDecreased { seq, prev, next });
                    }
                }
                threshold = Some(next);
            }
            Outcome::Discarded => {
                report.discarded += 1;
                let Some(i) = e.tier_reached else {
                    return Err(bad("discarded without a tier index".into()));
                };
                if tiers.len() != i + 1 {
                    return Err(AuditError::TierAfterDiscard {
                        seq,
                        discarded: i,
                        scored: tiers.len() - 1,
                    });
                }
                if !tiers[..i].iter().all(TierScore::passes) {
                    return Err(bad(format!("discarded at tier {i} but an earlier tier failed")));
                }
                if tiers[i].passes() {
                    return Err(bad(format!("discarded at tier {i}, which it passed")));
                }
            }
            Outcome::Skipped => report.skipped += 1,
        }
    }
    Ok(report)
}
