//! Per-triple difficulty metrics: the ranking-based score plus perplexity,
//! IFD, and text-length baselines, the warm-up split, and comparison of
//! externally predicted proxy scores against reference scores.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::backend::{map_bounded, ScoreBackend, TokenScoreRow};
use crate::rng::seeded_rng;
use crate::types::{DifficultyScore, Metric};
use crate::{Error, Result};

pub const FLAG_TOP_K_SATURATED: &str = "top_k_saturated";
pub const FLAG_ALL_BELOW_EPSILON: &str = "all_below_epsilon";
pub const FLAG_TOKENIZER_FALLBACK: &str = "tokenizer_fallback";

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RankingParams {
    /// Top-p mass threshold for the label-space size estimate.
    pub p: f64,
    /// Tokens scoring below this are excluded from the mean.
    pub epsilon_d: f64,
    /// Backend top-k cap; label-space estimates saturate here.
    pub k_cap: usize,
}

impl Default for RankingParams {
    fn default() -> Self {
        RankingParams {
            p: 0.95,
            epsilon_d: 1e-6,
            k_cap: 20,
        }
    }
}

impl RankingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("top-p must be in (0,1], got {}", self.p)));
        }
        if self.epsilon_d < 0.0 {
            return Err(Error::Config(format!(
                "epsilon_d must be >= 0, got {}",
                self.epsilon_d
            )));
        }
        if self.k_cap == 0 {
            return Err(Error::Config("k_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Label-space size N_t: the smallest prefix of the (descending) top-k
/// whose cumulative probability first exceeds p, counting the crossing
/// token. Returns (N_t, saturated); saturated means the whole top_k never
/// crossed p, in which case N_t = k_cap.
pub fn label_space_size(row: &TokenScoreRow, p: f64, k_cap: usize) -> (usize, bool) {
    let mut cumulative = 0.0;
    for (i, (_, logprob)) in row.top_k.iter().enumerate() {
        cumulative += logprob.exp();
        if cumulative > p {
            return (i + 1, false);
        }
    }
    (k_cap, true)
}

/// 1-based rank of the target token within top_k, or None when the target
/// is beyond the returned alternatives.
pub fn rank_of_target(row: &TokenScoreRow) -> Option<usize> {
    row.top_k
        .iter()
        .position(|(token, _)| *token == row.token)
        .map(|i| i + 1)
}

/// d = (r - 1)/N when the target ranks within the label space, else 1
/// (including targets beyond top_k).
pub fn token_difficulty(rank: Option<usize>, n: usize) -> f64 {
    match rank {
        Some(r) if r <= n => (r - 1) as f64 / n as f64,
        _ => 1.0,
    }
}

/// Ranking-based difficulty: mean per-token difficulty over tokens scoring
/// at least epsilon_d. If every token falls below the threshold, the single
/// highest-difficulty token is retained so the mean is defined.
pub fn ranking_score(
    triple_id: &str,
    rows: &[TokenScoreRow],
    params: &RankingParams,
) -> Result<DifficultyScore> {
    if rows.is_empty() {
        return Err(Error::Precondition(format!(
            "triple {triple_id}: no token rows to score"
        )));
    }
    let mut flags = Vec::new();
    let mut token_scores = Vec::with_capacity(rows.len());
    for row in rows {
        let (n, saturated) = label_space_size(row, params.p, params.k_cap);
        if saturated && !flags.iter().any(|f| f == FLAG_TOP_K_SATURATED) {
            flags.push(FLAG_TOP_K_SATURATED.to_string());
        }
        token_scores.push(token_difficulty(rank_of_target(row), n));
    }
    let retained: Vec<f64> = token_scores
        .iter()
        .copied()
        .filter(|d| *d >= params.epsilon_d)
        .collect();
    let value = if retained.is_empty() {
        flags.push(FLAG_ALL_BELOW_EPSILON.to_string());
        token_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        retained.iter().sum::<f64>() / retained.len() as f64
    };
    Ok(DifficultyScore {
        triple_id: triple_id.to_string(),
        metric: Metric::Ranking,
        value,
        token_scores: Some(token_scores),
        flags,
    })
}

fn mean_nll(triple_id: &str, rows: &[TokenScoreRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Precondition(format!(
            "triple {triple_id}: no token rows to score"
        )));
    }
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        match row.target_logprob {
            Some(lp) => total -= lp,
            None => {
                return Err(Error::Precondition(format!(
                    "triple {triple_id}: token {i} has no target logprob"
                )))
            }
        }
    }
    Ok(total / rows.len() as f64)
}

/// Perplexity score: mean negative log-likelihood of the response tokens
/// (not exponentiated).
pub fn perplexity_score(triple_id: &str, rows: &[TokenScoreRow]) -> Result<DifficultyScore> {
    Ok(DifficultyScore {
        triple_id: triple_id.to_string(),
        metric: Metric::Perplexity,
        value: mean_nll(triple_id, rows)?,
        token_scores: Some(rows.iter().map(|r| -r.target_logprob.unwrap_or(0.0)).collect()),
        flags: Vec::new(),
    })
}

/// IFD: conditioned mean NLL over unconditioned mean NLL. A response that
/// is certain without context (denominator 0) scores 0.
pub fn ifd_score(
    triple_id: &str,
    conditioned: &[TokenScoreRow],
    unconditioned: &[TokenScoreRow],
) -> Result<DifficultyScore> {
    if conditioned.len() != unconditioned.len()
        || conditioned
            .iter()
            .zip(unconditioned)
            .any(|(c, u)| c.token != u.token)
    {
        return Err(Error::Precondition(format!(
            "triple {triple_id}: conditioned and unconditioned rows cover different tokens"
        )));
    }
    let num = mean_nll(triple_id, conditioned)?;
    let den = mean_nll(triple_id, unconditioned)?;
    let value = if den == 0.0 { 0.0 } else { num / den };
    Ok(DifficultyScore {
        triple_id: triple_id.to_string(),
        metric: Metric::Ifd,
        value,
        token_scores: None,
        flags: Vec::new(),
    })
}

/// User-text length under the scoring backend's tokenizer, falling back to
/// whitespace tokens (flagged) when the backend cannot count.
pub fn length_score(
    triple_id: &str,
    user_text: &str,
    backend: Option<&dyn ScoreBackend>,
) -> DifficultyScore {
    let (value, flags) = match backend.and_then(|b| b.count_tokens(user_text)) {
        Some(n) => (n as f64, Vec::new()),
        None => (
            user_text.split_whitespace().count() as f64,
            vec![FLAG_TOKENIZER_FALLBACK.to_string()],
        ),
    };
    DifficultyScore {
        triple_id: triple_id.to_string(),
        metric: Metric::TextLength,
        value,
        token_scores: None,
        flags,
    }
}

/// Uniform without-replacement split into (warmup of size n, remainder),
/// both in original order.
pub fn warmup_split<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if n > items.len() {
        return Err(Error::Precondition(format!(
            "warm-up size {n} exceeds {} available triples",
            items.len()
        )));
    }
    let mut rng = seeded_rng(seed, "warmup-split");
    let mut selected = vec![false; items.len()];
    for idx in sample(&mut rng, items.len(), n) {
        selected[idx] = true;
    }
    let mut warmup = Vec::with_capacity(n);
    let mut remainder = Vec::with_capacity(items.len() - n);
    for (i, item) in items.iter().enumerate() {
        if selected[i] {
            warmup.push(item.clone());
        } else {
            remainder.push(item.clone());
        }
    }
    Ok((warmup, remainder))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProxyReport {
    pub mse: f64,
    /// Spearman correlation (average ranks for ties) over the intersection.
    /// Zero when either side has no rank variance.
    pub rank_correlation: f64,
    /// |intersection| / |reference|.
    pub coverage: f64,
    pub compared: usize,
}

/// Compare externally predicted difficulty scores against reference scores
/// over the intersection of triple ids.
pub fn compare_proxy(
    predicted: &BTreeMap<String, f64>,
    reference: &BTreeMap<String, f64>,
) -> Result<ProxyReport> {
    let mut pred = Vec::new();
    let mut refv = Vec::new();
    for (id, &r) in reference {
        if let Some(&p) = predicted.get(id) {
            pred.push(p);
            refv.push(r);
        }
    }
    if pred.is_empty() {
        return Err(Error::Precondition(
            "no overlap between predicted and reference triple ids".into(),
        ));
    }
    let mse = pred
        .iter()
        .zip(&refv)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / pred.len() as f64;
    let rank_correlation = spearman(&pred, &refv);
    Ok(ProxyReport {
        mse,
        rank_correlation,
        coverage: pred.len() as f64 / reference.len() as f64,
        compared: pred.len(),
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

/// Everything needed to score one triple.
#[derive(Debug, Clone)]
pub struct ScoreInput {
    pub triple_id: String,
    pub prompt: String,
    pub response: String,
    pub user_text: String,
}

/// Score a batch of triples under one metric with bounded backend
/// concurrency; output order follows input order.
pub fn score_dataset(
    inputs: &[ScoreInput],
    backend: &dyn ScoreBackend,
    metric: Metric,
    params: &RankingParams,
    concurrency: usize,
) -> Result<Vec<DifficultyScore>> {
    params.validate()?;
    let results = map_bounded(inputs, concurrency, |_, input| -> Result<DifficultyScore> {
        match metric {
            Metric::Ranking => {
                let rows = backend.score_tokens(&input.prompt, &input.response, params.k_cap)?;
                ranking_score(&input.triple_id, &rows, params)
            }
            Metric::Perplexity => {
                let rows = backend.score_tokens(&input.prompt, &input.response, params.k_cap)?;
                perplexity_score(&input.triple_id, &rows)
            }
            Metric::Ifd => {
                let conditioned =
                    backend.score_tokens(&input.prompt, &input.response, params.k_cap)?;
                let unconditioned = backend.score_tokens("", &input.response, params.k_cap)?;
                ifd_score(&input.triple_id, &conditioned, &unconditioned)
            }
            Metric::TextLength => Ok(length_score(&input.triple_id, &input.user_text, Some(backend))),
            Metric::Proxy => Err(Error::Config(
                "proxy scores are ingested from a file, not computed".into(),
            )),
        }
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use proptest::prelude::*;

    fn row(token: &str, target_logprob: Option<f64>, probs: &[(&str, f64)]) -> TokenScoreRow {
        TokenScoreRow {
            token: token.into(),
            target_logprob,
            top_k: probs.iter().map(|(t, p)| (t.to_string(), p.ln())).collect(),
        }
    }

    /// The distribution from the worked classification example: target
    /// "Neg" ranks third and the top-3 mass first exceeds 0.95.
    fn example_row() -> TokenScoreRow {
        row(
            "Neg",
            Some(0.11f64.ln()),
            &[("Pos", 0.45), ("Neu", 0.40), ("Neg", 0.11), ("Mixed", 0.02)],
        )
    }

    #[test]
    fn label_space_on_example_distribution() {
        let (n, saturated) = label_space_size(&example_row(), 0.95, 20);
        assert_eq!(n, 3);
        assert!(!saturated);
    }

    #[test]
    fn label_space_first_token_crossing() {
        let r = row("x", None, &[("x", 0.97), ("y", 0.01)]);
        assert_eq!(label_space_size(&r, 0.95, 20), (1, false));
    }

    #[test]
    fn label_space_saturates_at_k_cap() {
        let r = row("x", None, &[("a", 0.30), ("b", 0.30), ("c", 0.30)]);
        assert_eq!(label_space_size(&r, 0.95, 20), (20, true));
    }

    #[test]
    fn rank_of_target_examples() {
        assert_eq!(rank_of_target(&example_row()), Some(3));
        let top = row("Pos", None, &[("Pos", 0.9), ("Neg", 0.05)]);
        assert_eq!(rank_of_target(&top), Some(1));
        let absent = row("Sarcastic", None, &[("Pos", 0.9), ("Neg", 0.05)]);
        assert_eq!(rank_of_target(&absent), None);
    }

    #[test]
    fn token_difficulty_examples() {
        assert!((token_difficulty(Some(3), 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_difficulty(Some(1), 7), 0.0);
        assert_eq!(token_difficulty(Some(4), 3), 1.0);
        assert_eq!(token_difficulty(None, 3), 1.0);
    }

    #[test]
    fn worked_example_end_to_end() {
        let params = RankingParams::default();
        let score = ranking_score("t1", &[example_row()], &params).unwrap();
        assert!((score.value - 2.0 / 3.0).abs() < 1e-12);
        assert!(score.flags.is_empty());
        assert_eq!(score.token_scores, Some(vec![2.0 / 3.0]));
    }

    #[test]
    fn worked_example_through_scripted_backend() {
        let mut backend = MockBackend::new(1);
        backend.script_rows("classify the review", "Neg", vec![example_row()]);
        let inputs = vec![ScoreInput {
            triple_id: "t1".into(),
            prompt: "classify the review".into(),
            response: "Neg".into(),
            user_text: "This product is a complete waste of money.".into(),
        }];
        let scores = score_dataset(
            &inputs,
            &backend,
            Metric::Ranking,
            &RankingParams {
                k_cap: 4,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        assert!((scores[0].value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_filters_format_tokens() {
        // Token difficulties 0.0, 0.5, 0.7: the zero-difficulty format
        // token is excluded from the mean.
        let rows = vec![
            row("a", None, &[("a", 0.96), ("b", 0.01)]),
            row("b", None, &[("x", 0.50), ("b", 0.46), ("y", 0.01)]),
            // N = 10: mass first exceeds 0.95 at the tenth slot; target at
            // rank 8 -> 0.7.
            row(
                "c",
                None,
                &[
                    ("t0", 0.0957),
                    ("t1", 0.0956),
                    ("t2", 0.0955),
                    ("t3", 0.0954),
                    ("t4", 0.0953),
                    ("t5", 0.0952),
                    ("t6", 0.0951),
                    ("c", 0.0950),
                    ("t8", 0.0949),
                    ("t9", 0.0948),
                ],
            ),
        ];
        let params = RankingParams::default();
        let (n2, _) = label_space_size(&rows[1], params.p, params.k_cap);
        assert_eq!(n2, 2);
        let (n3, _) = label_space_size(&rows[2], params.p, params.k_cap);
        assert_eq!(n3, 10);
        let score = ranking_score("t", &rows, &params).unwrap();
        assert!((score.value - 0.6).abs() < 1e-12, "got {}", score.value);
    }

    #[test]
    fn ranking_all_zero_fallback() {
        let rows = vec![
            row("a", None, &[("a", 0.96), ("b", 0.01)]),
            row("b", None, &[("b", 0.97), ("c", 0.01)]),
        ];
        let score = ranking_score("t", &rows, &RankingParams::default()).unwrap();
        assert_eq!(score.value, 0.0);
        assert!(score.flags.iter().any(|f| f == FLAG_ALL_BELOW_EPSILON));
    }

    #[test]
    fn ranking_requires_rows() {
        assert!(ranking_score("t", &[], &RankingParams::default()).is_err());
    }

    #[test]
    fn perplexity_examples() {
        let rows = vec![
            row("a", Some(0.5f64.ln()), &[("a", 0.5)]),
            row("b", Some(0.5f64.ln()), &[("b", 0.5)]),
        ];
        let score = perplexity_score("t", &rows).unwrap();
        assert!((score.value - 0.6931471805599453).abs() < 1e-12);

        let certain = vec![row("a", Some(0.0), &[("a", 1.0)])];
        assert_eq!(perplexity_score("t", &certain).unwrap().value, 0.0);

        let mixed = vec![
            row("a", Some(0.25f64.ln()), &[("a", 0.25)]),
            row("b", Some(0.5f64.ln()), &[("b", 0.5)]),
        ];
        let score = perplexity_score("t", &mixed).unwrap();
        assert!((score.value - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn perplexity_requires_target_logprobs() {
        let rows = vec![row("a", None, &[("a", 0.5)])];
        assert!(perplexity_score("t", &rows).is_err());
    }

    #[test]
    fn ifd_examples() {
        let cond = vec![row("a", Some(-0.5), &[("a", 0.5)])];
        let uncond = vec![row("a", Some(-0.5), &[("a", 0.5)])];
        assert_eq!(ifd_score("t", &cond, &uncond).unwrap().value, 1.0);

        let cond = vec![row("a", Some(-0.5), &[("a", 0.5)])];
        let uncond = vec![row("a", Some(-1.0), &[("a", 0.5)])];
        assert_eq!(ifd_score("t", &cond, &uncond).unwrap().value, 0.5);

        let cond = vec![row("a", Some(-1.2), &[("a", 0.5)])];
        let uncond = vec![row("a", Some(-0.6), &[("a", 0.5)])];
        assert!((ifd_score("t", &cond, &uncond).unwrap().value - 2.0).abs() < 1e-12);

        let cond = vec![row("a", Some(-0.5), &[("a", 0.5)])];
        let certain = vec![row("a", Some(0.0), &[("a", 1.0)])];
        assert_eq!(ifd_score("t", &cond, &certain).unwrap().value, 0.0);
    }

    #[test]
    fn ifd_rejects_mismatched_tokens() {
        let cond = vec![row("a", Some(-0.5), &[("a", 0.5)])];
        let uncond = vec![row("b", Some(-0.5), &[("b", 0.5)])];
        assert!(ifd_score("t", &cond, &uncond).is_err());
    }

    #[test]
    fn length_score_paths() {
        let backend = MockBackend::new(1);
        let s = length_score("t", "a b c", Some(&backend));
        assert_eq!(s.value, 3.0);
        assert!(s.flags.is_empty());

        let s = length_score("t", "a b c", None);
        assert_eq!(s.value, 3.0);
        assert!(s.flags.iter().any(|f| f == FLAG_TOKENIZER_FALLBACK));

        assert_eq!(length_score("t", "", None).value, 0.0);
    }

    #[test]
    fn warmup_split_properties() {
        let items: Vec<u32> = (0..10).collect();
        let (warmup, remainder) = warmup_split(&items, 3, 42).unwrap();
        assert_eq!(warmup.len(), 3);
        assert_eq!(remainder.len(), 7);
        let mut all: Vec<u32> = warmup.iter().chain(&remainder).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items, "disjoint partition covering the input");

        let (again, _) = warmup_split(&items, 3, 42).unwrap();
        assert_eq!(warmup, again, "same seed, same split");
        let (other, _) = warmup_split(&items, 3, 43).unwrap();
        assert_ne!(warmup, other);

        let (full, empty) = warmup_split(&items, 10, 1).unwrap();
        assert_eq!(full.len(), 10);
        assert!(empty.is_empty());

        assert!(warmup_split(&items, 11, 1).is_err());
    }

    #[test]
    fn proxy_comparison_examples() {
        let reference: BTreeMap<String, f64> =
            (0..5).map(|i| (format!("t{i}"), i as f64 * 0.2)).collect();
        let identity = reference.clone();
        let report = compare_proxy(&identity, &reference).unwrap();
        assert_eq!(report.mse, 0.0);
        assert!((report.rank_correlation - 1.0).abs() < 1e-12);
        assert_eq!(report.coverage, 1.0);

        let shifted: BTreeMap<String, f64> = reference
            .iter()
            .map(|(k, v)| (k.clone(), v + 0.1))
            .collect();
        let report = compare_proxy(&shifted, &reference).unwrap();
        assert!((report.mse - 0.01).abs() < 1e-12);
        assert!((report.rank_correlation - 1.0).abs() < 1e-12);

        let reversed: BTreeMap<String, f64> = reference
            .iter()
            .map(|(k, v)| (k.clone(), 1.0 - v))
            .collect();
        let report = compare_proxy(&reversed, &reference).unwrap();
        assert!((report.rank_correlation + 1.0).abs() < 1e-12);

        let disjoint: BTreeMap<String, f64> = [("zz".to_string(), 1.0)].into();
        assert!(compare_proxy(&disjoint, &reference).is_err());

        let partial: BTreeMap<String, f64> = reference.iter().take(2)
            .map(|(k, v)| (k.clone(), *v)).collect();
        let report = compare_proxy(&partial, &reference).unwrap();
        assert!((report.coverage - 0.4).abs() < 1e-12);
        assert_eq!(report.compared, 2);
    }

    #[test]
    fn score_dataset_orders_by_input_under_concurrency() {
        let backend = MockBackend::new(9);
        let inputs: Vec<ScoreInput> = (0..12)
            .map(|i| ScoreInput {
                triple_id: format!("t{i:02}"),
                prompt: format!("prompt {i}"),
                response: "The text conveys a negative stance".into(),
                user_text: "irrelevant".into(),
            })
            .collect();
        let params = RankingParams::default();
        let a = score_dataset(&inputs, &backend, Metric::Ranking, &params, 4).unwrap();
        let b = score_dataset(&inputs, &backend, Metric::Ranking, &params, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(&inputs).all(|(s, i)| s.triple_id == i.triple_id));
    }

    proptest! {
        #[test]
        fn token_difficulty_in_unit_range(r in 1usize..30, n in 1usize..30) {
            let d = token_difficulty(Some(r), n);
            prop_assert!((0.0..=1.0).contains(&d));
            let d_next = token_difficulty(Some(r + 1), n);
            prop_assert!(d_next >= d, "monotone in rank");
        }

        #[test]
        fn label_space_monotone_in_p(
            raw in proptest::collection::vec(0.01f64..1.0, 2..12),
            p1 in 0.05f64..0.95,
            delta in 0.0f64..0.05,
        ) {
            let total: f64 = raw.iter().sum::<f64>() * 1.01;
            let mut probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
            probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let r = TokenScoreRow {
                token: "t".into(),
                target_logprob: None,
                top_k: probs.iter().enumerate()
                    .map(|(i, p)| (format!("w{i}"), p.ln())).collect(),
            };
            let (n1, _) = label_space_size(&r, p1, 50);
            let (n2, _) = label_space_size(&r, p1 + delta, 50);
            prop_assert!(n1 <= n2);
        }

        #[test]
        fn perplexity_matches_brute_force(
            logprobs in proptest::collection::vec(-8.0f64..0.0, 1..20)
        ) {
            let rows: Vec<TokenScoreRow> = logprobs.iter()
                .map(|&lp| row("x", Some(lp), &[("x", lp.exp().min(0.999))]))
                .collect();
            let score = perplexity_score("t", &rows).unwrap();
            let mut brute = 0.0;
            for &lp in logprobs.iter().rev() {
                brute += -lp;
            }
            brute /= logprobs.len() as f64;
            prop_assert!((score.value - brute).abs() < 1e-12);
        }

        #[test]
        fn ranking_ignores_appended_easy_tokens(extra in 1usize..5) {
            let params = RankingParams::default();
            let mut rows = vec![example_row()];
            let base = ranking_score("t", &rows, &params).unwrap().value;
            for _ in 0..extra {
                rows.push(row("e", None, &[("e", 0.96), ("f", 0.01)]));
            }
            let padded = ranking_score("t", &rows, &params).unwrap().value;
            prop_assert!((base - padded).abs() < 1e-15);
        }
    }
}
