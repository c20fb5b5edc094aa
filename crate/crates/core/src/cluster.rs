//! Robust clustering of raw projections: ℓq K-means, removal of the
//! projections farthest from every centroid, and per-cluster averaging of
//! the survivors.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Projection;

/// Inner IRLS iterations for the `q < 1` centroid update.
const IRLS_ITERS: usize = 10;
/// Candidate sample size used for seeding when `Q` is large.
const MIN_SEED_CANDIDATES: usize = 2000;
/// Neighbour rank whose distance measures how isolated a projection is.
const ISOLATION_RANK: usize = 3;
/// Projections whose isolation distance exceeds median + this many robust
/// standard deviations are never used as seeds.
const ISOLATION_MADS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub clusters: usize,
    /// Quasi-norm exponent in `(0, 1]`.
    pub q: f64,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            clusters: 180,
            q: 1.0,
            seed: 7,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Projection>,
    pub discarded: Vec<bool>,
    pub q: f64,
    pub discard_fraction: f64,
    /// Objective after every assignment step; non-increasing.
    pub objective_trace: Vec<f64>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    /// Retained (non-discarded) members per cluster.
    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_clusters()];
        for (&a, &d) in self.assignments.iter().zip(&self.discarded) {
            if !d {
                counts[a] += 1;
            }
        }
        counts
    }

    /// Average number of retained projections per cluster (K̄).
    pub fn mean_occupancy(&self) -> f64 {
        let kept = self.discarded.iter().filter(|d| !**d).count();
        kept as f64 / self.num_clusters().max(1) as f64
    }

    pub fn with_discarded(mut self, mask: Vec<bool>, fraction: f64) -> Self {
        debug_assert_eq!(mask.len(), self.assignments.len());
        self.discarded = mask;
        self.discard_fraction = fraction;
        self
    }
}

/// Row-major copy of equal-length projections.
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn from_projections(projections: &[Projection]) -> Result<Self> {
        let cols = projections.first().map(|p| p.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(projections.len() * cols);
        for p in projections {
            if p.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    actual: p.len(),
                });
            }
            data.extend_from_slice(p.bins());
        }
        Ok(Self {
            rows: projections.len(),
            cols,
            data,
        })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Within-cluster cost `Σ |a - b|^q` (the ℓ1 norm when `q = 1`).
#[inline]
pub fn lq_cost(a: &[f64], b: &[f64], q: f64) -> f64 {
    if q == 1.0 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(q)).sum()
    }
}

#[inline]
fn l2_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, hi, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Minimizer of `Σ |x_i - c|^q` over `c`: the median for `q = 1`, otherwise
/// iteratively reweighted least squares started from the median.
fn lq_location(values: &mut [f64], q: f64) -> f64 {
    let med = median_in_place(values);
    if q == 1.0 {
        return med;
    }
    let cost = |c: f64| values.iter().map(|x| (x - c).abs().powf(q)).sum::<f64>();
    let mut best = med;
    let mut best_cost = cost(med);
    let mut c = med;
    let scale = values.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let eps = 1e-9 * scale;
    for _ in 0..IRLS_ITERS {
        let (mut num, mut den) = (0.0, 0.0);
        for &x in values.iter() {
            let w = (x - c).abs().max(eps).powf(q - 2.0);
            num += w * x;
            den += w;
        }
        c = num / den;
        let cc = cost(c);
        if cc < best_cost {
            best = c;
            best_cost = cc;
        }
    }
    best
}

/// Distance from each candidate to its `rank`-th nearest other candidate.
fn isolation_distances(data: &Matrix, candidates: &[usize], rank: usize) -> Vec<f64> {
    candidates
        .par_iter()
        .map(|&i| {
            let mut d: Vec<f64> = candidates
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| l2_sq(data.row(i), data.row(j)))
                .collect();
            if d.is_empty() {
                return 0.0;
            }
            let r = rank.min(d.len()) - 1;
            let (_, v, _) = d.select_nth_unstable_by(r, |a, b| a.total_cmp(b));
            v.sqrt()
        })
        .collect()
}

/// Projections eligible as seeds: a candidate sample with isolated points
/// (far from their nearest neighbours, typically foreign objects) removed.
fn seed_pool(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let budget = (10 * k).max(MIN_SEED_CANDIDATES);
    let mut candidates: Vec<usize> = if data.rows <= budget {
        (0..data.rows).collect()
    } else {
        index::sample(rng, data.rows, budget).into_vec()
    };
    candidates.sort_unstable();
    if candidates.len() <= k {
        return candidates;
    }
    let iso = isolation_distances(data, &candidates, ISOLATION_RANK);
    let mut sorted = iso.clone();
    let med = median_in_place(&mut sorted);
    let mut dev: Vec<f64> = iso.iter().map(|v| (v - med).abs()).collect();
    let mad = median_in_place(&mut dev) * 1.4826;
    let threshold = med + ISOLATION_MADS * mad;
    let kept: Vec<usize> = candidates
        .iter()
        .zip(&iso)
        .filter(|(_, &d)| d <= threshold)
        .map(|(&i, _)| i)
        .collect();
    if kept.len() >= k {
        return kept;
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| iso[a].total_cmp(&iso[b]).then(a.cmp(&b)));
    let mut pool: Vec<usize> = order[..k].iter().map(|&o| candidates[o]).collect();
    pool.sort_unstable();
    pool
}

/// k-means++ (squared ℓ2) seeding restricted to `pool`.
fn kmeanspp(data: &Matrix, pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut seeds = Vec::with_capacity(k);
    let first = pool[rng.random_range(0..pool.len())];
    seeds.push(first);
    let mut nearest: Vec<f64> = pool.iter().map(|&i| l2_sq(data.row(i), data.row(first))).collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = pool.len() - 1;
            for (idx, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = idx;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // every remaining candidate coincides with a seed
            match (0..pool.len()).find(|&idx| !seeds.contains(&pool[idx])) {
                Some(idx) => idx,
                None => break,
            }
        };
        let s = pool[pick];
        seeds.push(s);
        for (idx, &i) in pool.iter().enumerate() {
            let d = l2_sq(data.row(i), data.row(s));
            if d < nearest[idx] {
                nearest[idx] = d;
            }
        }
    }
    seeds
}

struct Lloyd<'a> {
    data: &'a Matrix,
    q: f64,
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    costs: Vec<f64>,
    reseed_pool: Vec<bool>,
}

impl<'a> Lloyd<'a> {
    /// Assigns every projection to its cheapest centroid, preferring the
    /// current one on ties. Returns whether any assignment changed.
    fn assign(&mut self) -> bool {
        let q = self.q;
        let centroids = &self.centroids;
        let data = self.data;
        let current = &self.assignments;
        let result: Vec<(usize, f64)> = (0..data.rows)
            .into_par_iter()
            .map(|i| {
                let row = data.row(i);
                let cur = current[i];
                let mut best = (cur, lq_cost(row, &centroids[cur], q));
                for (j, c) in centroids.iter().enumerate() {
                    if j == cur {
                        continue;
                    }
                    let cost = lq_cost(row, c, q);
                    if cost < best.1 {
                        best = (j, cost);
                    }
                }
                best
            })
            .collect();
        let mut changed = false;
        for (i, (j, cost)) in result.into_iter().enumerate() {
            changed |= self.assignments[i] != j;
            self.assignments[i] = j;
            self.costs[i] = cost;
        }
        changed
    }

    /// Re-seeds empty clusters to the most expensive non-isolated
    /// projection whose own cluster keeps at least one other member.
    fn repair_empty(&mut self) -> bool {
        let k = self.centroids.len();
        let mut sizes = vec![0usize; k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        let mut repaired = false;
        for j in 0..k {
            if sizes[j] > 0 {
                continue;
            }
            let pick = (0..self.data.rows)
                .filter(|&i| self.reseed_pool[i] && sizes[self.assignments[i]] >= 2)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if self.costs[b] >= self.costs[i] => Some(b),
                    _ => Some(i),
                });
            let Some(i) = pick else { break };
            sizes[self.assignments[i]] -= 1;
            sizes[j] = 1;
            self.assignments[i] = j;
            self.costs[i] = 0.0;
            self.centroids[j] = self.data.row(i).to_vec();
            repaired = true;
        }
        repaired
    }

    /// Moves each centroid to the element-wise ℓq location of its members,
    /// keeping the previous value wherever that is not an improvement.
    fn update(&mut self) {
        let k = self.centroids.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &a) in self.assignments.iter().enumerate() {
            members[a].push(i);
        }
        let data = self.data;
        let q = self.q;
        let updated: Vec<Vec<f64>> = self
            .centroids
            .par_iter()
            .zip(members.par_iter())
            .map(|(old, idx)| {
                if idx.is_empty() {
                    return old.clone();
                }
                let mut buf = vec![0.0; idx.len()];
                (0..data.cols)
                    .map(|b| {
                        for (slot, &i) in buf.iter_mut().zip(idx) {
                            *slot = data.data[i * data.cols + b];
                        }
                        let cand = lq_location(&mut buf, q);
                        let cost = |c: f64| buf.iter().map(|x| (x - c).abs().powf(q)).sum::<f64>();
                        if cost(cand) <= cost(old[b]) {
                            cand
                        } else {
                            old[b]
                        }
                    })
                    .collect()
            })
            .collect();
        self.centroids = updated;
        for (i, &a) in self.assignments.iter().enumerate() {
            self.costs[i] = lq_cost(data.row(i), &self.centroids[a], q);
        }
    }

    fn objective(&self) -> f64 {
        self.costs.iter().sum()
    }
}

fn validate_params(q_count: usize, params: &KMeansParams) -> Result<()> {
    if !(params.q > 0.0 && params.q <= 1.0) {
        return Err(Error::InvalidConfig(format!("q = {} must lie in (0, 1]", params.q)));
    }
    if params.clusters == 0 || params.clusters > q_count {
        return Err(Error::InvalidConfig(format!(
            "cluster count {} must be in [1, {q_count}]",
            params.clusters
        )));
    }
    Ok(())
}

/// ℓq K-means with isolation-filtered k-means++ seeding.
pub fn lq_kmeans(projections: &[Projection], params: &KMeansParams) -> Result<Clustering> {
    if projections.is_empty() {
        return Err(Error::EmptyInput("lq_kmeans needs projections"));
    }
    validate_params(projections.len(), params)?;
    let data = Matrix::from_projections(projections)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let pool = seed_pool(&data, params.clusters, &mut rng);
    let mut seeds = kmeanspp(&data, &pool, params.clusters, &mut rng);
    // Only possible when many projections coincide; pad deterministically.
    let mut extra = 0;
    while seeds.len() < params.clusters {
        if !seeds.contains(&extra) {
            seeds.push(extra);
        }
        extra += 1;
    }
    let init: Vec<Projection> = seeds.iter().map(|&i| projections[i].clone()).collect();
    let mut reseed = vec![false; data.rows];
    for &i in &pool {
        reseed[i] = true;
    }
    run_lloyd(&data, init, reseed, params)
}

/// ℓq K-means from explicit initial centroids.
pub fn lq_kmeans_from(projections: &[Projection], init: Vec<Projection>, params: &KMeansParams) -> Result<Clustering> {
    if projections.is_empty() {
        return Err(Error::EmptyInput("lq_kmeans needs projections"));
    }
    let params = KMeansParams {
        clusters: init.len(),
        ..params.clone()
    };
    validate_params(projections.len(), &params)?;
    let data = Matrix::from_projections(projections)?;
    if let Some(c) = init.iter().find(|c| c.len() != data.cols) {
        return Err(Error::LengthMismatch {
            expected: data.cols,
            actual: c.len(),
        });
    }
    run_lloyd(&data, init, vec![true; data.rows], &params)
}

fn run_lloyd(data: &Matrix, init: Vec<Projection>, reseed_pool: Vec<bool>, params: &KMeansParams) -> Result<Clustering> {
    let mut lloyd = Lloyd {
        data,
        q: params.q,
        centroids: init.into_iter().map(|p| p.into_bins()).collect(),
        assignments: vec![0; data.rows],
        costs: vec![0.0; data.rows],
        reseed_pool,
    };
    lloyd.assign();
    lloyd.repair_empty();
    let mut trace = vec![lloyd.objective()];
    for _ in 0..params.max_iters {
        lloyd.update();
        let changed = lloyd.assign();
        let repaired = lloyd.repair_empty();
        trace.push(lloyd.objective());
        if !changed && !repaired {
            break;
        }
    }
    log::debug!("lq_kmeans: {} iterations, objective {:.6e}", trace.len() - 1, trace.last().unwrap());
    Ok(Clustering {
        assignments: lloyd.assignments,
        centroids: lloyd
            .centroids
            .into_iter()
            .map(Projection::from_vec_unchecked)
            .collect(),
        discarded: vec![false; data.rows],
        q: params.q,
        discard_fraction: 0.0,
        objective_trace: trace,
    })
}

/// Marks the `floor(f Q)` projections with the largest ℓ2 distance to their
/// nearest centroid; ties go to the lower index.
pub fn detect_class1_outliers(projections: &[Projection], clustering: &Clustering, f: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::InvalidConfig(format!("discard fraction {f} must lie in [0, 1)")));
    }
    let n = projections.len();
    let count = (f * n as f64).floor() as usize;
    let mut mask = vec![false; n];
    if count == 0 {
        return Ok(mask);
    }
    let dist: Vec<f64> = projections
        .par_iter()
        .map(|p| {
            clustering
                .centroids
                .iter()
                .map(|c| l2_sq(p.bins(), c.bins()))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    for &i in &order[..count] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Mean of the retained members of every cluster.
pub fn robust_average(projections: &[Projection], clustering: &Clustering) -> Result<Vec<Projection>> {
    let k = clustering.num_clusters();
    let len = projections.first().map(|p| p.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; len]; k];
    let mut counts = vec![0usize; k];
    for ((p, &a), &d) in projections
        .iter()
        .zip(&clustering.assignments)
        .zip(&clustering.discarded)
    {
        if d {
            continue;
        }
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.bins()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(j, (s, c))| {
            if c == 0 {
                return Err(Error::ClusterFullyDiscarded { cluster: j });
            }
            let inv = 1.0 / c as f64;
            Ok(Projection::from_vec_unchecked(s.into_iter().map(|v| v * inv).collect()))
        })
        .collect()
}
