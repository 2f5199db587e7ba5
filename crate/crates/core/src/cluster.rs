//! Cluster selection: pick which clusters attest each round by minimizing
//! the summed success probability of the selected set, subject to a minimum
//! device-coverage ratio and a maximum time any cluster may go unattested.
//!
//! Success probabilities are maximum-likelihood estimates over each
//! cluster's attestation history: successes divided by attempts. A cluster
//! with no history counts as probability zero, which makes unknown clusters
//! the cheapest to pick and biases the optimizer toward covering them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::ClusterId;
use crate::verifier::{EpochOutcome, Label};

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("problem is inconsistent: {0}")]
    Invalid(String),
    #[error("no assignment satisfies the constraints (coverage {coverage} needed)")]
    Infeasible { coverage: f64 },
}

/// Attestation history of one cluster: one 0/1 outcome per attested
/// iteration, plus the last time it was attested (minutes).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ClusterHistory {
    pub outcomes: Vec<u8>,
    pub last_attested_min: f64,
    pub ever_attested: bool,
}

impl ClusterHistory {
    /// MLE success probability: successes over attempts; 0 with no history.
    pub fn estimate_success(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        let ones = self.outcomes.iter().filter(|&&s| s == 1).count();
        ones as f64 / self.outcomes.len() as f64
    }

    pub fn record(&mut self, success: bool, now_min: f64) {
        self.outcomes.push(success as u8);
        self.last_attested_min = now_min;
        self.ever_attested = true;
    }
}

/// One instance of the constrained selection problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionProblem {
    /// Device count per cluster, index = cluster id.
    pub cluster_sizes: Vec<u32>,
    pub histories: Vec<ClusterHistory>,
    /// Minimum fraction of devices that must be attested, in [0, 1].
    pub coverage_ratio: f64,
    /// Maximum minutes a cluster may remain unattested.
    pub max_exclusion_min: f64,
    /// The upcoming attestation time, minutes.
    pub next_attestation_min: f64,
}

impl SelectionProblem {
    pub fn cluster_count(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn total_devices(&self) -> u64 {
        self.cluster_sizes.iter().map(|&s| s as u64).sum()
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if self.cluster_sizes.is_empty() || self.cluster_sizes.len() != self.histories.len() {
            return Err(SelectError::Invalid("sizes/histories length mismatch".into()));
        }
        if !(0.0..=1.0).contains(&self.coverage_ratio) {
            return Err(SelectError::Invalid("coverage ratio outside [0,1]".into()));
        }
        if self.max_exclusion_min <= 0.0 {
            return Err(SelectError::Invalid("max exclusion must be positive".into()));
        }
        Ok(())
    }

    /// Minutes cluster `i` will have gone unattested if excluded now. A
    /// never-attested cluster counts from deployment (time zero).
    fn exclusion_min(&self, i: usize) -> f64 {
        self.next_attestation_min - self.histories[i].last_attested_min
    }

    fn coverage_of(&self, mask: u32) -> f64 {
        let selected: u64 = self
            .cluster_sizes
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &s)| s as u64)
            .sum();
        selected as f64 / self.total_devices() as f64
    }

    fn objective_of(&self, mask: u32, probs: &[f64]) -> f64 {
        probs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, p)| p)
            .sum()
    }

    fn feasible(&self, mask: u32) -> bool {
        if self.coverage_of(mask) < self.coverage_ratio {
            return false;
        }
        (0..self.cluster_count()).all(|i| {
            mask & (1 << i) != 0 || self.exclusion_min(i) <= self.max_exclusion_min
        })
    }
}

/// The chosen assignment plus its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected: Vec<ClusterId>,
    pub assignment: Vec<bool>,
    pub objective: f64,
}

/// Exhaustive enumeration is exact up to this many clusters; beyond it a
/// greedy pass takes over (flagged as a heuristic in the docs).
pub const EXACT_LIMIT: usize = 20;

pub fn select_clusters(problem: &SelectionProblem) -> Result<SelectionResult, SelectError> {
    problem.validate()?;
    let m = problem.cluster_count();
    let probs: Vec<f64> = problem.histories.iter().map(ClusterHistory::estimate_success).collect();

    // Everything selected is always feasible when the ratio is at most 1, so
    // true infeasibility cannot occur; the guard stays for odd float inputs.
    if problem.coverage_ratio >= 1.0 {
        let all = (0..m).map(|i| ClusterId(i as u8)).collect();
        return Ok(SelectionResult {
            selected: all,
            assignment: vec![true; m],
            objective: probs.iter().sum(),
        });
    }

    if m <= EXACT_LIMIT {
        let mut best: Option<(f64, f64, u32)> = None; // (objective, -coverage, mask)
        for mask in 0..(1u32 << m) {
            if !problem.feasible(mask) {
                continue;
            }
            let obj = problem.objective_of(mask, &probs);
            let cov = problem.coverage_of(mask);
            let better = match &best {
                None => true,
                Some((bobj, bcov, bmask)) => {
                    // Prefer lower objective, then larger coverage, then the
                    // lexicographically smallest assignment string.
                    obj < bobj - 1e-12
                        || ((obj - bobj).abs() <= 1e-12
                            && (cov > bcov + 1e-12
                                || ((cov - bcov).abs() <= 1e-12
                                    && lex_key(mask, m) < lex_key(*bmask, m))))
                }
            };
            if better {
                best = Some((obj, cov, mask));
            }
        }
        let (objective, _, mask) = best.ok_or(SelectError::Infeasible {
            coverage: problem.coverage_ratio,
        })?;
        let assignment: Vec<bool> = (0..m).map(|i| mask & (1 << i) != 0).collect();
        let selected = assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| ClusterId(i as u8))
            .collect();
        return Ok(SelectionResult { selected, assignment, objective });
    }

    // Greedy fallback: force overdue clusters, then add the cheapest
    // probabilities until coverage holds.
    let mut assignment = vec![false; m];
    for i in 0..m {
        if problem.exclusion_min(i) > problem.max_exclusion_min {
            assignment[i] = true;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap().then(a.cmp(&b)));
    let mask_of = |a: &Vec<bool>| {
        a.iter().enumerate().fold(0u32, |acc, (i, &x)| acc | ((x as u32) << i))
    };
    for &i in &order {
        if problem.coverage_of(mask_of(&assignment)) >= problem.coverage_ratio {
            break;
        }
        assignment[i] = true;
    }
    let mask = mask_of(&assignment);
    if !problem.feasible(mask) {
        return Err(SelectError::Infeasible { coverage: problem.coverage_ratio });
    }
    let objective = problem.objective_of(mask, &probs);
    let selected = assignment
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| ClusterId(i as u8))
        .collect();
    Ok(SelectionResult { selected, assignment, objective })
}

/// Assignment string read alpha_1..alpha_M, for lexicographic tie-breaking.
fn lex_key(mask: u32, m: usize) -> Vec<bool> {
    (0..m).map(|i| mask & (1 << i) != 0).collect()
}

/// Fold an epoch outcome into the per-cluster histories: every attested
/// cluster appends success (no member labeled compromised) and refreshes its
/// last-attested time. An unverifiable epoch teaches nothing.
pub fn update_history(
    histories: &mut [ClusterHistory],
    outcome: &EpochOutcome,
    cluster_of_device: impl Fn(u32) -> ClusterId,
    now_min: f64,
) {
    if outcome.unverifiable {
        return;
    }
    for cluster in &outcome.attested_clusters {
        let mut success = true;
        for (i, label) in outcome.labels.iter().enumerate() {
            if cluster_of_device(i as u32 + 1) == *cluster && label.is_compromised() {
                success = false;
                break;
            }
        }
        histories[cluster.0 as usize].record(success, now_min);
    }
}

/// Labels contribute to history only through `update_history`; re-exported
/// for the CLI's persistence schema.
pub fn history_file_json(histories: &[ClusterHistory]) -> serde_json::Value {
    serde_json::json!({
        "clusters": histories
            .iter()
            .map(|h| {
                serde_json::json!({
                    "outcomes": h.outcomes,
                    "last_attested_min": h.last_attested_min,
                    "ever_attested": h.ever_attested,
                })
            })
            .collect::<Vec<_>>(),
    })
}

pub fn history_file_parse(v: &serde_json::Value) -> Option<Vec<ClusterHistory>> {
    let arr = v.get("clusters")?.as_array()?;
    let mut out = Vec::with_capacity(arr.len());
    for c in arr {
        out.push(ClusterHistory {
            outcomes: c
                .get("outcomes")?
                .as_array()?
                .iter()
                .map(|x| x.as_u64().unwrap_or(0) as u8)
                .collect(),
            last_attested_min: c.get("last_attested_min")?.as_f64()?,
            ever_attested: c.get("ever_attested")?.as_bool()?,
        });
    }
    Some(out)
}
