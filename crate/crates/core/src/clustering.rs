//! Frequency-weighted affinity propagation over attribute embeddings.
//! Attributes are replicated by their frequency weight, clustered with
//! synchronous damped message passing, and each cluster becomes a named
//! analytical perspective.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::attributes::frequency_weight;
use crate::types::{AttributePool, Perspective};
use crate::{Error, Result};

/// Pairwise similarities s(i,k) = -||v_i - v_k||^2 with the diagonal
/// reserved for the preference.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    s: Array2<f64>,
    preference: Option<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn preference(&self) -> Option<f64> {
        self.preference
    }

    /// Write `preference` to the diagonal. With `perturb`, a deterministic
    /// index-proportional offset of -1e-12 per index breaks exact symmetry
    /// degeneracies; it is subtracted so no point's preference ever rises
    /// above the configured value (a raised preference can mint spurious
    /// exemplars among identical points). Disable for exact textbook
    /// behavior.
    pub fn set_preference(&mut self, preference: f64, perturb: bool) {
        let n = self.n();
        for i in 0..n {
            let offset = if perturb { -1e-12 * i as f64 } else { 0.0 };
            self.s[(i, i)] = preference + offset;
        }
        self.preference = Some(preference);
    }
}

pub fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    if vectors.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 vectors to cluster, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Precondition("vectors have mixed dimensions".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite vector component".into()));
    }
    let n = vectors.len();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for k in (i + 1)..n {
            let d2: f64 = vectors[i]
                .iter()
                .zip(&vectors[k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            s[(i, k)] = -d2;
            s[(k, i)] = -d2;
        }
    }
    Ok(SimilarityMatrix {
        s,
        preference: None,
    })
}

/// Rate-quantile of `values` with linear interpolation between order
/// statistics.
pub fn quantile_linear(values: &[f64], rate: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let q = rate * (sorted.len() - 1) as f64;
    let lo = q.floor() as usize;
    let hi = q.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (q - lo as f64)
}

/// Quantile of the off-diagonal similarities with linear interpolation
/// between order statistics; rate 0.5 is the median.
pub fn preference_from_percentile(sim: &SimilarityMatrix, rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(Error::Precondition(format!(
            "percentile rate must be in (0,1), got {rate}"
        )));
    }
    let n = sim.n();
    if n < 2 {
        return Err(Error::Precondition("need at least 2 points".into()));
    }
    let mut values = Vec::with_capacity(n * n - n);
    for i in 0..n {
        for k in 0..n {
            if i != k {
                values.push(sim.s[(i, k)]);
            }
        }
    }
    Ok(quantile_linear(&values, rate))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ApParams {
    pub damping: f64,
    pub max_iter: usize,
    pub stable_window: usize,
    pub perturb_preference: bool,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams {
            damping: 0.9,
            max_iter: 1000,
            stable_window: 50,
            perturb_preference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterResult {
    /// exemplar_of[i] = index of the exemplar point i is assigned to.
    pub exemplar_of: Vec<usize>,
    /// Sorted exemplar indices.
    pub exemplars: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Synchronous damped affinity propagation.
///
/// Stops once the exemplar set {k : r(k,k)+a(k,k) > 0} has stayed the same
/// non-empty set for `stable_window` consecutive iterations (an empty set
/// never counts as stable, since messages start at zero), or at max_iter.
/// If the set is empty at termination, the point with maximal total
/// similarity becomes the sole exemplar and converged=false.
pub fn affinity_propagation(sim: &SimilarityMatrix, params: &ApParams) -> Result<ClusterResult> {
    if sim.preference.is_none() {
        return Err(Error::Precondition(
            "similarity matrix has no preference applied".into(),
        ));
    }
    if !(0.5..1.0).contains(&params.damping) {
        return Err(Error::Precondition(format!(
            "damping must be in [0.5, 1), got {}",
            params.damping
        )));
    }
    let n = sim.n();
    let s = &sim.s;
    let lambda = params.damping;
    let mut r: Array2<f64> = Array2::zeros((n, n));
    let mut a: Array2<f64> = Array2::zeros((n, n));
    let mut exemplars: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    for iter in 1..=params.max_iter {
        iterations = iter;

        // r(i,k) <- s(i,k) - max_{k' != k} (a(i,k') + s(i,k'))
        for i in 0..n {
            let mut max1 = f64::NEG_INFINITY;
            let mut max2 = f64::NEG_INFINITY;
            let mut arg1 = 0usize;
            for k in 0..n {
                let v = a[(i, k)] + s[(i, k)];
                if v > max1 {
                    max2 = max1;
                    max1 = v;
                    arg1 = k;
                } else if v > max2 {
                    max2 = v;
                }
            }
            for k in 0..n {
                let cap = if k == arg1 { max2 } else { max1 };
                let computed = s[(i, k)] - cap;
                r[(i, k)] = lambda * r[(i, k)] + (1.0 - lambda) * computed;
            }
        }

        // a(i,k) <- min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)))
        // a(k,k) <- sum_{i' != k} max(0, r(i',k))
        for k in 0..n {
            let mut col_pos = 0.0;
            for i in 0..n {
                if i != k {
                    col_pos += r[(i, k)].max(0.0);
                }
            }
            for i in 0..n {
                let computed = if i == k {
                    col_pos
                } else {
                    (r[(k, k)] + col_pos - r[(i, k)].max(0.0)).min(0.0)
                };
                a[(i, k)] = lambda * a[(i, k)] + (1.0 - lambda) * computed;
            }
        }

        let current: Vec<usize> = (0..n).filter(|&k| r[(k, k)] + a[(k, k)] > 0.0).collect();
        if !current.is_empty() && current == exemplars {
            stable += 1;
            if stable >= params.stable_window {
                converged = true;
                exemplars = current;
                break;
            }
        } else {
            stable = if current.is_empty() { 0 } else { 1 };
        }
        exemplars = current;
    }

    if exemplars.is_empty() {
        // Degenerate run: elect the point most similar to everything.
        let mut best = 0usize;
        let mut best_total = f64::NEG_INFINITY;
        for i in 0..n {
            let total: f64 = (0..n).map(|k| s[(i, k)]).sum();
            if total > best_total {
                best_total = total;
                best = i;
            }
        }
        exemplars = vec![best];
        converged = false;
    }

    let mut exemplar_of = vec![0usize; n];
    for i in 0..n {
        if exemplars.binary_search(&i).is_ok() {
            exemplar_of[i] = i;
            continue;
        }
        let mut best = exemplars[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &e in &exemplars {
            if s[(i, e)] > best_sim {
                best_sim = s[(i, e)];
                best = e;
            }
        }
        exemplar_of[i] = best;
    }

    Ok(ClusterResult {
        exemplar_of,
        exemplars,
        iterations,
        converged,
    })
}

/// Replicas for one attribute: round(1 + ln(1 + count)), at least 1.
pub fn replica_count(count: u64) -> usize {
    (frequency_weight(count as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClusterStats {
    pub points: usize,
    pub perspectives: usize,
    pub iterations: usize,
    pub converged: bool,
    pub preference: f64,
}

/// Cluster the attribute pool into perspectives. Each attribute is
/// replicated by its frequency weight before clustering; membership is
/// resolved per attribute (via its first replica), so replicas can never
/// split across perspectives.
pub fn weighted_cluster(
    pool: &AttributePool,
    vectors: &BTreeMap<String, Vec<f64>>,
    rate: f64,
    params: &ApParams,
) -> Result<(Vec<Perspective>, ClusterStats)> {
    if pool.is_empty() {
        return Err(Error::Precondition("attribute pool is empty".into()));
    }
    for name in pool.entries.keys() {
        if !vectors.contains_key(name) {
            return Err(Error::Invalid(format!(
                "no embedding vector for pool attribute {name:?}"
            )));
        }
    }
    let names: Vec<&String> = pool.entries.keys().collect();
    if names.len() == 1 {
        let name = names[0].clone();
        let perspective = Perspective {
            id: 0,
            name: name.clone(),
            members: vec![name.clone()],
            exemplar: name,
        };
        let stats = ClusterStats {
            points: 1,
            perspectives: 1,
            iterations: 0,
            converged: true,
            preference: 0.0,
        };
        return Ok((vec![perspective], stats));
    }

    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut first_point: Vec<usize> = Vec::with_capacity(names.len());
    for (attr_idx, name) in names.iter().enumerate() {
        let replicas = replica_count(pool.entries[*name].count);
        first_point.push(points.len());
        for _ in 0..replicas {
            points.push(vectors[*name].clone());
            owner.push(attr_idx);
        }
    }

    let mut sim = similarity_matrix(&points)?;
    let preference = preference_from_percentile(&sim, rate)?;
    sim.set_preference(preference, params.perturb_preference);
    let result = affinity_propagation(&sim, params)?;

    // attribute -> exemplar point, via each attribute's first replica
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (attr_idx, &fp) in first_point.iter().enumerate() {
        groups.entry(result.exemplar_of[fp]).or_default().push(attr_idx);
    }

    let mut perspectives = Vec::with_capacity(groups.len());
    for (id, (exemplar_point, attr_indices)) in groups.into_iter().enumerate() {
        let members: Vec<String> = attr_indices.iter().map(|&i| names[i].clone()).collect();
        let name = members
            .iter()
            .max_by(|a, b| {
                pool.count(a)
                    .cmp(&pool.count(b))
                    .then_with(|| b.cmp(a))
            })
            .expect("non-empty cluster")
            .clone();
        perspectives.push(Perspective {
            id: id as u32,
            name,
            members,
            exemplar: names[owner[exemplar_point]].clone(),
        });
    }
    let stats = ClusterStats {
        points: points.len(),
        perspectives: perspectives.len(),
        iterations: result.iterations,
        converged: result.converged,
        preference,
    };
    Ok((perspectives, stats))
}
