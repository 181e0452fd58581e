//! Partition management in discriminator feature space.
//!
//! Objectives reported here are within-cluster sums of squared distances.
//! The per-point expectation form is this value divided by the number of
//! clustered points; both have the same minimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 10;

/// Current cluster structure used to condition the GAN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub k: usize,
    /// Cluster id of each clustering-subset point (subset order).
    pub assignments: Vec<usize>,
    /// `k × feature_dim`
    pub centroids: Matrix,
    /// Per-cluster counts over the full training set.
    pub cluster_sizes: Vec<usize>,
    /// `cluster_sizes` normalized; the categorical `P_π`.
    pub sampling_weights: Vec<f64>,
    /// Clusters that ended Lloyd iteration with no subset members.
    pub empty: Vec<bool>,
    /// Within-cluster sum of squares of the subset clustering.
    pub objective: f64,
}

impl Partition {
    /// Builds a partition from a subset clustering and the full-set labels.
    pub fn new(fit: &KMeansFit, full_labels: &[usize]) -> Self {
        let k = fit.centroids.rows();
        let cluster_sizes = counts(full_labels, k);
        let sampling_weights = normalize_counts(&cluster_sizes);
        let subset_sizes = counts(&fit.assignments, k);
        Self {
            k,
            assignments: fit.assignments.clone(),
            centroids: fit.centroids.clone(),
            cluster_sizes,
            sampling_weights,
            empty: subset_sizes.iter().map(|&n| n == 0).collect(),
            objective: fit.objective,
        }
    }

    /// Recomputes sizes and `P_π` from full-set labels.
    pub fn refresh_sizes(&mut self, full_labels: &[usize]) {
        self.cluster_sizes = counts(full_labels, self.k);
        self.sampling_weights = normalize_counts(&self.cluster_sizes);
    }
}

/// Result of one k-means fit on the clustering subset.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub objective: f64,
    /// Objective after every Lloyd iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

pub fn counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    for &l in labels {
        out[l] += 1;
    }
    out
}

fn normalize_counts(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0.0; sizes.len()];
    }
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every row of `points`, with its squared distance.
/// Ties go to the lowest centroid index.
pub fn assign_nearest(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let n = points.rows();
    let k = centroids.rows();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    // |x - μ|² = |x|² - 2 x·μ + |μ|²; the dot products go through the GEMM kernel.
    let dots = points
        .matmul(&centroids.transpose())
        .expect("points and centroids share feature width");
    let centroid_norms: Vec<f64> = centroids.iter_rows().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let mut labels = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for (i, p) in points.iter_rows().enumerate() {
        let pn: f64 = p.iter().map(|x| x * x).sum();
        let row = dots.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = pn - 2.0 * row[c] + centroid_norms[c];
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels.push(best);
        dists.push(best_d.max(0.0));
    }
    (labels, dists)
}

/// Exact within-cluster sum of squares for given assignments and centroids.
pub fn sum_of_squares(points: &Matrix, assignments: &[usize], centroids: &Matrix) -> f64 {
    points
        .iter_rows()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, centroids.row(c)))
        .sum()
}

/// Per-cluster means; empty clusters keep their row from `fallback`.
pub fn cluster_means(points: &Matrix, assignments: &[usize], k: usize, fallback: &Matrix) -> Matrix {
    let d = points.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut n = vec![0usize; k];
    for (p, &c) in points.iter_rows().zip(assignments) {
        n[c] += 1;
        for (s, x) in sums.row_mut(c).iter_mut().zip(p) {
            *s += x;
        }
    }
    for (c, &count) in n.iter().enumerate() {
        if count == 0 {
            sums.row_mut(c).copy_from_slice(fallback.row(c));
        } else {
            let inv = count as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s /= inv);
        }
    }
    sums
}

/// Continues D² seeding: adds `extra` centroids to `chosen`, each drawn with
/// probability proportional to the squared distance to the nearest centroid
/// chosen so far. Falls back to a uniform draw among not-yet-chosen points
/// when every remaining point coincides with a centroid.
fn d2_extend(points: &Matrix, chosen: &mut Vec<Vec<f64>>, picked: &mut [bool], extra: usize, rng: &mut Rng) {
    let n = points.rows();
    let mut nearest: Vec<f64> = points
        .iter_rows()
        .map(|p| {
            chosen
                .iter()
                .map(|c| squared_distance(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    for _ in 0..extra {
        let idx = match rng.weighted_index(&nearest) {
            Some(i) => i,
            None => {
                let free: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
                free[rng.below(free.len())]
            }
        };
        picked[idx] = true;
        let centre = points.row(idx).to_vec();
        for (d, p) in nearest.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(p, &centre));
        }
        chosen.push(centre);
    }
}

/// k-means++ seeding: first centroid uniform, the rest by D² sampling.
pub fn kmeans_pp_init(features: &Matrix, k: usize, rng: &mut Rng) -> Result<Matrix> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if n < k {
        return Err(Error::InsufficientData { needed: k, available: n });
    }
    let first = rng.below(n);
    let mut picked = vec![false; n];
    picked[first] = true;
    let mut chosen = vec![features.row(first).to_vec()];
    d2_extend(features, &mut chosen, &mut picked, k - 1, rng);
    Ok(Matrix::from_rows(&chosen))
}

/// Lloyd iterations from `init` until the relative objective improvement
/// drops below `tol`, assignments stop changing, or `max_iters` is reached.
///
/// An empty cluster is re-seeded with the point that currently contributes
/// most to the objective (taken from a cluster with at least two members).
/// Panics if the objective ever increases, which would indicate a bug.
pub fn lloyd(features: &Matrix, init: &Matrix, max_iters: usize, tol: f64) -> KMeansFit {
    let k = init.rows();
    let mut centroids = init.clone();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let (mut labels, mut dists) = assign_nearest(features, &centroids);
        repair_empty(&mut labels, &mut dists, k);
        let unchanged = labels == assignments;
        assignments = labels;
        centroids = cluster_means(features, &assignments, k, &centroids);
        let objective = sum_of_squares(features, &assignments, &centroids);
        assert!(
            objective <= prev + 1e-9 * prev.abs().max(1e-300),
            "Lloyd objective increased: {prev} -> {objective}"
        );
        history.push(objective);
        let converged = objective == 0.0
            || unchanged
            || (prev.is_finite() && prev - objective <= tol * prev);
        prev = objective;
        if converged {
            break;
        }
    }

    KMeansFit {
        assignments,
        centroids,
        objective: prev,
        history,
        iterations,
    }
}

fn repair_empty(labels: &mut [usize], dists: &mut [f64], k: usize) {
    let mut sizes = counts(labels, k);
    for c in 0..k {
        if sizes[c] != 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| sizes[labels[i]] >= 2)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(i) = donor else { break };
        sizes[labels[i]] -= 1;
        labels[i] = c;
        sizes[c] = 1;
        dists[i] = 0.0;
    }
}

/// Best of `restarts` independent k-means++ + Lloyd runs by objective.
pub fn cluster_initial(features: &Matrix, k: usize, restarts: usize, rng: &mut Rng) -> Result<KMeansFit> {
    cluster_initial_with(features, k, restarts, DEFAULT_MAX_ITERS, DEFAULT_TOL, rng)
}

pub fn cluster_initial_with(
    features: &Matrix,
    k: usize,
    restarts: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp_init(features, k, rng)?;
        let fit = lloyd(features, &init, max_iters, tol);
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Initial centroids for reclustering: the mean of the new features over each
/// old cluster's members. Old clusters with no members get D²-seeded points.
pub fn warm_start_centroids(
    old_assignments: &[usize],
    k: usize,
    new_features: &Matrix,
    rng: &mut Rng,
) -> Result<Matrix> {
    if old_assignments.len() != new_features.rows() {
        return Err(Error::contract(format!(
            "old partition covers {} points but {} feature rows were given",
            old_assignments.len(),
            new_features.rows()
        )));
    }
    if new_features.rows() == 0 {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let d = new_features.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut n = vec![0usize; k];
    for (f, &c) in new_features.iter_rows().zip(old_assignments) {
        n[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(f) {
            *s += x;
        }
    }
    let mut chosen: Vec<Vec<f64>> = Vec::new();
    let mut slots = Vec::new();
    for c in 0..k {
        if n[c] > 0 {
            let inv = n[c] as f64;
            sums[c].iter_mut().for_each(|s| *s /= inv);
            chosen.push(sums[c].clone());
        } else {
            slots.push(c);
        }
    }
    if !slots.is_empty() {
        // Every point belongs to some old cluster, so `chosen` is non-empty.
        let base = chosen.len();
        let mut picked = vec![false; new_features.rows()];
        d2_extend(new_features, &mut chosen, &mut picked, slots.len(), rng);
        for (c, seed) in slots.into_iter().zip(chosen.drain(base..)) {
            sums[c] = seed;
        }
    }
    Ok(Matrix::from_rows(&sums))
}

/// Optimal old → new cluster correspondence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `rho[c_old] = c_new`
    pub rho: Vec<usize>,
    /// Σ_c |π_old[c] \ π_new[ρ(c)]|
    pub cost: usize,
}

impl Matching {
    pub fn identity(k: usize) -> Self {
        Self { rho: (0..k).collect(), cost: 0 }
    }

    /// Map from a new cluster id to the old id it takes over.
    pub fn relabel_map(&self) -> Vec<usize> {
        let mut inv = vec![0; self.rho.len()];
        for (old, &new) in self.rho.iter().enumerate() {
            inv[new] = old;
        }
        inv
    }
}

/// `cost[c_old][c_new] = |π_old[c_old] \ π_new[c_new]|`
pub fn matching_costs(old: &[usize], new: &[usize], k: usize) -> Vec<Vec<i64>> {
    let mut overlap = vec![vec![0i64; k]; k];
    let mut old_sizes = vec![0i64; k];
    for (&o, &n) in old.iter().zip(new) {
        overlap[o][n] += 1;
        old_sizes[o] += 1;
    }
    (0..k)
        .map(|o| (0..k).map(|n| old_sizes[o] - overlap[o][n]).collect())
        .collect()
}

/// Finds the permutation minimizing the number of old members lost.
pub fn match_clusters(old: &[usize], new: &[usize], k: usize) -> Result<Matching> {
    if old.len() != new.len() {
        return Err(Error::contract(format!(
            "partitions index different subsets ({} vs {} points)",
            old.len(),
            new.len()
        )));
    }
    if let Some(&bad) = old.iter().chain(new).find(|&&c| c >= k) {
        return Err(Error::contract(format!("cluster id {bad} out of range for k = {k}")));
    }
    let costs = matching_costs(old, new, k);
    let rho = hungarian(&costs);
    let cost = rho.iter().enumerate().map(|(o, &n)| costs[o][n]).sum::<i64>() as usize;
    Ok(Matching { rho, cost })
}

/// Minimum-cost perfect matching on a square integer cost matrix.
/// Returns `assignment[row] = column`.
///
/// Shortest augmenting paths with row/column potentials, O(n³). Rows are
/// inserted in index order and ties in the column scan resolve to the lowest
/// column, so the result is deterministic.
pub fn hungarian(costs: &[Vec<i64>]) -> Vec<usize> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = INF;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = costs[r - 1][col - 1] - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[row_of_col[col] - 1] = col - 1;
    }
    assignment
}

/// Labels, sizes and `P_π` for the full training set by nearest centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub labels: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub sampling_weights: Vec<f64>,
}

pub fn propagate_labels(centroids: &Matrix, all_features: &Matrix) -> Result<Propagation> {
    if centroids.rows() == 0 {
        return Err(Error::contract("no centroids to propagate from"));
    }
    let (labels, _) = assign_nearest(all_features, centroids);
    let cluster_sizes = counts(&labels, centroids.rows());
    let sampling_weights = normalize_counts(&cluster_sizes);
    Ok(Propagation {
        labels,
        cluster_sizes,
        sampling_weights,
    })
}

/// Sequential online k-means over a batch: each point moves its nearest
/// centroid by `(x - μ) / n` where `n` is that centroid's updated count.
/// Returns the cluster each point was assigned to.
pub fn online_update(centroids: &mut Matrix, counts: &mut [u64], batch_features: &Matrix) -> Result<Vec<usize>> {
    if counts.len() != centroids.rows() {
        return Err(Error::contract(format!(
            "{} counters for {} centroids",
            counts.len(),
            centroids.rows()
        )));
    }
    if batch_features.cols() != centroids.cols() {
        return Err(Error::Dimension {
            op: "online_update",
            lhs: batch_features.shape(),
            rhs: centroids.shape(),
        });
    }
    let mut assigned = Vec::with_capacity(batch_features.rows());
    for x in batch_features.iter_rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, mu) in centroids.iter_rows().enumerate() {
            let d = squared_distance(x, mu);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        counts[best] += 1;
        let step = 1.0 / counts[best] as f64;
        for (m, xi) in centroids.row_mut(best).iter_mut().zip(x) {
            *m += (xi - *m) * step;
        }
        assigned.push(best);
    }
    Ok(assigned)
}
