//! Seeded k-means over path embeddings with elbow-based choice of k.
//!
//! For each k in `1..=min(k_max, distinct points)` the best of several
//! k-means++ restarts is kept, alongside a warm start grown from the k-1
//! solution. The warm start can only lower inertia, so the curve is
//! non-increasing in k by construction.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedding};
use crate::error::{Error, Result};

/// How the cluster count is picked from the inertia curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElbowRule {
    /// k with the largest single inertia drop from k-1.
    #[default]
    LargestDrop,
    /// Knee of the normalized curve (maximum distance below the chord).
    MaxCurvature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k_max: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub elbow: ElbowRule,
    /// Above this many points, mini-batch updates replace Lloyd iterations.
    pub minibatch_cutoff: usize,
    pub minibatch_size: usize,
    pub minibatch_epochs: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k_max: 10,
            seed: 42,
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
            elbow: ElbowRule::LargestDrop,
            minibatch_cutoff: 1500,
            minibatch_size: 256,
            minibatch_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k_evaluated: Vec<usize>,
    /// `inertia[i]` belongs to `k_evaluated[i]`.
    pub inertia: Vec<f64>,
    pub chosen_k: usize,
    pub assignments: Vec<usize>,
    /// Unit-length centroids of the chosen clustering.
    pub centroids: Vec<Embedding>,
    pub representative: Option<usize>,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments.iter().enumerate().filter(move |(_, &c)| c == cluster).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone)]
struct Fit {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignments = points
        .iter()
        .map(|p| {
            let (i, d) = nearest(p, centroids);
            inertia += d;
            i
        })
        .collect();
    (assignments, inertia)
}

/// Means of the assigned points. An empty cluster is re-seeded at the point
/// farthest from its current centroid, which never raises inertia.
fn update_centroids(points: &[&[f64]], assignments: &mut [usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignments.iter()) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            for (s, &c) in sums.iter_mut().zip(&counts) {
                s.iter_mut().for_each(|x| *x /= c as f64);
            }
            return sums;
        };
        let centroids: Vec<Vec<f64>> =
            sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|x| x / c.max(1) as f64).collect()).collect();
        let mut far = (usize::MAX, -1.0);
        for (i, (p, &a)) in points.iter().zip(assignments.iter()).enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > far.1 {
                far = (i, d);
            }
        }
        if far.0 == usize::MAX {
            // Fewer points than clusters; callers cap k, so this is unreachable.
            return centroids;
        }
        assignments[far.0] = empty;
    }
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> Fit {
    let k = centroids.len();
    let dim = points[0].len();
    let (mut assignments, _) = assign(points, &centroids);
    for _ in 0..cfg.max_iter {
        let updated = update_centroids(points, &mut assignments, k, dim);
        let shift = centroids.iter().zip(&updated).map(|(a, b)| sq_dist(a, b).sqrt()).fold(0.0, f64::max);
        centroids = updated;
        let (next, _) = assign(points, &centroids);
        let stable = next == assignments;
        assignments = next;
        if stable || shift < cfg.tol {
            break;
        }
    }
    let (assignments, inertia) = assign(points, &centroids);
    Fit { centroids, assignments, inertia }
}

fn minibatch(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Fit {
    let mut counts = vec![0usize; centroids.len()];
    let mut order: Vec<usize> = (0..points.len()).collect();
    for _ in 0..cfg.minibatch_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.minibatch_size.max(1)) {
            let nearest_idx: Vec<usize> = batch.iter().map(|&i| nearest(points[i], &centroids).0).collect();
            for (&i, &c) in batch.iter().zip(&nearest_idx) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                centroids[c].iter_mut().zip(points[i].iter()).for_each(|(m, x)| *m += eta * (x - *m));
            }
        }
    }
    let (assignments, inertia) = assign(points, &centroids);
    Fit { centroids, assignments, inertia }
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        let c = points[idx].to_vec();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn run_once(points: &[&[f64]], init: Vec<Vec<f64>>, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Fit {
    if points.len() > cfg.minibatch_cutoff {
        minibatch(points, init, cfg, rng)
    } else {
        lloyd(points, init, cfg)
    }
}

/// Previous solution plus its worst-served point as a new centroid.
fn warm_start(points: &[&[f64]], prev: &Fit) -> Vec<Vec<f64>> {
    let mut far = (0, -1.0);
    for (i, (p, &a)) in points.iter().zip(&prev.assignments).enumerate() {
        let d = sq_dist(p, &prev.centroids[a]);
        if d > far.1 {
            far = (i, d);
        }
    }
    let mut init = prev.centroids.clone();
    init.push(points[far.0].to_vec());
    init
}

fn distinct_count(points: &[&[f64]]) -> usize {
    points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<u64>>()).collect::<HashSet<_>>().len()
}

fn fit_k(points: &[&[f64]], k: usize, prev: Option<&Fit>, cfg: &KMeansConfig) -> Fit {
    let mut best: Option<Fit> = None;
    for restart in 0..cfg.restarts.max(1) {
        let stream = (k as u64) << 32 | restart as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let init = kmeans_pp(points, k, &mut rng);
        let fit = run_once(points, init, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let mut best = best.expect("at least one restart");
    if let Some(prev) = prev {
        let init = warm_start(points, prev);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - k as u64);
        let mut warm = run_once(points, init.clone(), cfg, &mut rng);
        if warm.inertia > prev.inertia {
            // Mini-batch updates are not monotone; a single assignment to the
            // grown centroid set always is.
            let (assignments, inertia) = assign(points, &init);
            warm = Fit { centroids: init, assignments, inertia };
        }
        if warm.inertia < best.inertia {
            best = warm;
        }
    }
    best
}

/// Picks k from an inertia curve whose first entry belongs to k = 1.
pub fn choose_k(inertia: &[f64], rule: ElbowRule) -> usize {
    if inertia.len() < 2 {
        return 1;
    }
    match rule {
        ElbowRule::LargestDrop => largest_drop(inertia),
        ElbowRule::MaxCurvature => max_curvature(inertia).unwrap_or_else(|| largest_drop(inertia)),
    }
}

fn largest_drop(inertia: &[f64]) -> usize {
    let mut best = (1, 0.0);
    for k in 2..=inertia.len() {
        let drop = inertia[k - 2] - inertia[k - 1];
        if drop > best.1 {
            best = (k, drop);
        }
    }
    best.0
}

fn max_curvature(inertia: &[f64]) -> Option<usize> {
    let n = inertia.len();
    if n < 3 {
        return None;
    }
    let hi = inertia.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = inertia.iter().copied().fold(f64::INFINITY, f64::min);
    if hi - lo <= 0.0 {
        return None;
    }
    let mut best = (1, f64::NEG_INFINITY);
    for (i, &y) in inertia.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = (y - lo) / (hi - lo);
        // Distance below the chord from (0, 1) to (1, 0).
        let gap = 1.0 - x - y;
        if gap > best.1 {
            best = (i + 1, gap);
        }
    }
    Some(best.0)
}

/// Clusters embeddings for k = 1..k_max and keeps the elbow solution.
pub fn cluster_paths(embeddings: &[Embedding], cfg: &KMeansConfig) -> Result<ClusterResult> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("no embeddings to cluster"));
    }
    let dim = embeddings[0].dim();
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: bad.dim() });
    }
    let points: Vec<&[f64]> = embeddings.iter().map(Embedding::as_slice).collect();
    let k_limit = cfg.k_max.max(1).min(distinct_count(&points));

    let mut fits: Vec<Fit> = Vec::with_capacity(k_limit);
    for k in 1..=k_limit {
        let fit = fit_k(&points, k, fits.last(), cfg);
        fits.push(fit);
    }
    let inertia: Vec<f64> = fits.iter().map(|f| f.inertia).collect();
    let chosen_k = choose_k(&inertia, cfg.elbow);
    let chosen = &fits[chosen_k - 1];
    let centroids = chosen
        .centroids
        .iter()
        .enumerate()
        .map(|(c, mean)| {
            Embedding::new(mean.clone())?.normalized().or_else(|_| {
                // Antipodal members can cancel out; fall back to the first member.
                let first = chosen.assignments.iter().position(|&a| a == c).unwrap_or(0);
                embeddings[first].normalized()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterResult {
        k_evaluated: (1..=k_limit).collect(),
        inertia,
        chosen_k,
        assignments: chosen.assignments.clone(),
        centroids,
        representative: None,
    })
}

/// Index of the centroid most similar to `query`; ties go to the lowest index.
pub fn select_representative_cluster(query: &Embedding, result: &ClusterResult) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in result.centroids.iter().enumerate() {
        let s = cosine(query, c)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}
