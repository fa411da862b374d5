//! Difficulty-prioritized dataset filtering and its two ablation variants,
//! with seeded, reproducible selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::rng::seeded_rng;
use crate::types::{DifficultyScore, DistillTriple, Metric};
use crate::{Error, Result};

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Prioritized,
    Global,
    HardOnly,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Prioritized => "prioritized",
            Strategy::Global => "global",
            Strategy::HardOnly => "hard_only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prioritized" => Ok(Strategy::Prioritized),
            "global" => Ok(Strategy::Global),
            "hard_only" => Ok(Strategy::HardOnly),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected prioritized, global, or hard_only"
            ))),
        }
    }
}

/// Retention probability for the member at 1-based rank `rank` of an
/// ascending difficulty ordering over `m` members. Summing over all ranks
/// gives exactly m/2, so half the group is retained in expectation.
pub fn retention_probability(rank: usize, m: usize) -> f64 {
    (rank as f64 - 0.5) / m as f64
}

fn check_scores(group: &[(String, f64)]) -> Result<()> {
    for (id, score) in group {
        if !score.is_finite() {
            return Err(Error::Precondition(format!(
                "triple {id}: non-finite difficulty score {score}"
            )));
        }
    }
    Ok(())
}

/// Ascending by score, ties broken by triple id.
fn rank_order(group: &[(String, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.sort_by(|&a, &b| {
        group[a]
            .1
            .partial_cmp(&group[b].1)
            .expect("finite scores")
            .then_with(|| group[a].0.cmp(&group[b].0))
    });
    order
}

fn rank_sample(group: &[(String, f64)], rng: &mut ChaCha12Rng) -> Vec<String> {
    let m = group.len();
    let mut retained = Vec::new();
    for (i, &idx) in rank_order(group).iter().enumerate() {
        if rng.gen::<f64>() < retention_probability(i + 1, m) {
            retained.push(group[idx].0.clone());
        }
    }
    retained
}

/// Retain each member of one instruction group independently with
/// probability (rank - 0.5)/M under the ascending difficulty ordering.
pub fn prioritized_sample(group: &[(String, f64)], seed: u64) -> Result<Vec<String>> {
    if group.is_empty() {
        return Err(Error::Precondition("cannot sample an empty group".into()));
    }
    check_scores(group)?;
    let mut rng = seeded_rng(seed, "rank-sample");
    Ok(rank_sample(group, &mut rng))
}

/// The whole dataset ranked as a single group; coincides with
/// prioritized_sample when only one instruction exists.
pub fn global_sample(scored: &[(String, f64)], seed: u64) -> Result<Vec<String>> {
    prioritized_sample(scored, seed)
}

/// Deterministic variant: the hardest ceil(M/2) members, no randomness.
pub fn hard_only_sample(group: &[(String, f64)]) -> Result<Vec<String>> {
    if group.is_empty() {
        return Err(Error::Precondition("cannot sample an empty group".into()));
    }
    check_scores(group)?;
    let order = rank_order(group);
    let keep = group.len().div_ceil(2);
    Ok(order[group.len() - keep..]
        .iter()
        .map(|&idx| group[idx].0.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupRetention {
    pub total: usize,
    pub retained: usize,
    pub retention: f64,
}

/// Equal-width score histogram over [lo, hi]; degenerate ranges collapse
/// into the first bin.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl ScoreHistogram {
    fn new(lo: f64, hi: f64) -> Self {
        ScoreHistogram {
            lo,
            hi,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    fn add(&mut self, value: f64) {
        let bin = if self.hi <= self.lo {
            0
        } else {
            let t = (value - self.lo) / (self.hi - self.lo);
            ((t * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        };
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetentionReport {
    pub strategy: Strategy,
    pub metric: Metric,
    pub total: usize,
    pub retained: usize,
    pub overall_retention: f64,
    pub per_instruction: BTreeMap<String, GroupRetention>,
    pub kept_scores: ScoreHistogram,
    pub dropped_scores: ScoreHistogram,
}

/// Filter a scored dataset. Prioritized and hard_only operate per
/// instruction group; global ranks the full set at once. Retained triples
/// keep their input order.
pub fn filter_dataset(
    triples: &[DistillTriple],
    scores: &[DifficultyScore],
    strategy: Strategy,
    seed: u64,
) -> Result<(Vec<DistillTriple>, RetentionReport)> {
    if triples.is_empty() {
        return Err(Error::Precondition("no triples to filter".into()));
    }
    let metric = scores
        .first()
        .map(|s| s.metric)
        .ok_or_else(|| Error::Precondition("no difficulty scores supplied".into()))?;
    let mut by_id: BTreeMap<&str, f64> = BTreeMap::new();
    for score in scores {
        if score.metric != metric {
            return Err(Error::Precondition(format!(
                "mixed metrics in score set: {} and {}",
                metric.as_str(),
                score.metric.as_str()
            )));
        }
        by_id.insert(&score.triple_id, score.value);
    }

    let mut groups: BTreeMap<&str, Vec<(String, f64)>> = BTreeMap::new();
    for triple in triples {
        let value = *by_id.get(triple.id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("triple {} has no difficulty score", triple.id))
        })?;
        let key = match strategy {
            Strategy::Global => "",
            _ => triple.instruction_id.as_str(),
        };
        groups.entry(key).or_default().push((triple.id.clone(), value));
    }

    let mut retained_ids: BTreeSet<String> = BTreeSet::new();
    for (key, group) in &groups {
        check_scores(group)?;
        let ids = match strategy {
            Strategy::HardOnly => hard_only_sample(group)?,
            _ => {
                let mut rng = seeded_rng(seed, &format!("rank-sample:{key}"));
                rank_sample(group, &mut rng)
            }
        };
        retained_ids.extend(ids);
    }

    let all_scores: Vec<f64> = triples
        .iter()
        .map(|t| by_id[t.id.as_str()])
        .collect();
    let lo = all_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut kept_scores = ScoreHistogram::new(lo, hi);
    let mut dropped_scores = ScoreHistogram::new(lo, hi);

    let mut per_instruction: BTreeMap<String, GroupRetention> = BTreeMap::new();
    let mut filtered = Vec::new();
    for triple in triples {
        let kept = retained_ids.contains(&triple.id);
        let entry = per_instruction
            .entry(triple.instruction_id.clone())
            .or_insert(GroupRetention {
                total: 0,
                retained: 0,
                retention: 0.0,
            });
        entry.total += 1;
        let value = by_id[triple.id.as_str()];
        if kept {
            entry.retained += 1;
            kept_scores.add(value);
            filtered.push(triple.clone());
        } else {
            dropped_scores.add(value);
        }
    }
    for entry in per_instruction.values_mut() {
        entry.retention = entry.retained as f64 / entry.total as f64;
    }

    let report = RetentionReport {
        strategy,
        metric,
        total: triples.len(),
        retained: filtered.len(),
        overall_retention: filtered.len() as f64 / triples.len() as f64,
        per_instruction,
        kept_scores,
        dropped_scores,
    };
    Ok((filtered, report))
}
