//! Brute-force oracles and fixture generators shared by integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type RawTriple = (String, String, String);

/// Random labelled multigraph with `nodes` entities and up to `edges`
/// distinct triples over a small relation vocabulary.
pub fn random_triples(seed: u64, nodes: usize, edges: usize) -> Vec<RawTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relations = rng.gen_range(2..=6);
    let mut out = BTreeSet::new();
    for _ in 0..edges {
        let h = rng.gen_range(0..nodes);
        let t = rng.gen_range(0..nodes);
        if h == t {
            continue;
        }
        out.insert((format!("n{h}"), format!("rel.{}", rng.gen_range(0..relations)), format!("n{t}")));
    }
    out.into_iter().collect()
}

/// A path as (relation label, inverse) hops and the entity labels visited.
pub type RawPath = (Vec<(String, bool)>, Vec<String>);

/// Iterative-deepening DFS: the first depth with any walk from `from` to `to`
/// is the shortest distance; every walk of that length is returned.
pub fn dfs_shortest_paths(triples: &[RawTriple], from: &str, to: &str, allow_inverse: bool) -> BTreeSet<RawPath> {
    let mut adj: HashMap<&str, Vec<(String, bool, &str)>> = HashMap::new();
    for (h, r, t) in triples {
        adj.entry(h.as_str()).or_default().push((r.clone(), false, t.as_str()));
        if allow_inverse {
            adj.entry(t.as_str()).or_default().push((r.clone(), true, h.as_str()));
        }
    }
    let mut found = BTreeSet::new();
    // Flood fill first so unreachable pairs do not deepen forever.
    let mut reached = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(n) = stack.pop() {
        for (_, _, next) in adj.get(n).into_iter().flatten() {
            if reached.insert(*next) {
                stack.push(*next);
            }
        }
    }
    if from == to || !reached.contains(to) {
        return found;
    }
    for depth in 1.. {
        let mut hops = Vec::new();
        let mut nodes = vec![from.to_string()];
        walk(&adj, from, to, depth, &mut hops, &mut nodes, &mut found);
        if !found.is_empty() {
            break;
        }
    }
    found
}

fn walk(
    adj: &HashMap<&str, Vec<(String, bool, &str)>>,
    at: &str,
    to: &str,
    remaining: usize,
    hops: &mut Vec<(String, bool)>,
    nodes: &mut Vec<String>,
    found: &mut BTreeSet<RawPath>,
) {
    if remaining == 0 {
        if at == to {
            found.insert((hops.clone(), nodes.clone()));
        }
        return;
    }
    let Some(edges) = adj.get(at) else { return };
    for (r, inv, next) in edges {
        hops.push((r.clone(), *inv));
        nodes.push(next.to_string());
        walk(adj, next, to, remaining - 1, hops, nodes, found);
        hops.pop();
        nodes.pop();
    }
}

/// Unit vectors scattered around `centers` planted directions.
pub fn blobs(seed: u64, dim: usize, centers: usize, per_center: &[usize], spread: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut dirs = Vec::new();
    for _ in 0..centers {
        dirs.push(unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    }
    for (c, &n) in per_center.iter().enumerate() {
        for _ in 0..n {
            let v: Vec<f64> = dirs[c % centers].iter().map(|x| x + rng.gen_range(-spread..spread)).collect();
            out.push(unit(v));
        }
    }
    out
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm from uniformly drawn distinct seeds; returns
/// (assignments, inertia).
fn lloyd_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut centers: Vec<Vec<f64>> = idx[..k].iter().map(|&i| points[i].clone()).collect();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..500 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| (0..k).min_by(|&a, &b| d2(p, &centers[a]).total_cmp(&d2(p, &centers[b]))).unwrap())
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, x) in center.iter_mut().enumerate() {
                *x = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points.iter().zip(&assign).map(|(p, &a)| d2(p, &centers[a])).sum();
    (assign, inertia)
}

/// Best-of-`restarts` (inertia, assignments) for each k in 1..=k_max,
/// capped at the number of distinct points.
pub fn brute_force_kmeans(points: &[Vec<f64>], k_max: usize, restarts: usize, seed: u64) -> Vec<(f64, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distinct =
        points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<BTreeSet<_>>().len();
    (1..=k_max.min(distinct))
        .map(|k| {
            (0..restarts)
                .map(|_| {
                    let (a, i) = lloyd_once(points, k, &mut rng);
                    (i, a)
                })
                .min_by(|x, y| x.0.total_cmp(&y.0))
                .unwrap()
        })
        .collect()
}

pub fn brute_force_inertia(points: &[Vec<f64>], k_max: usize, restarts: usize, seed: u64) -> Vec<f64> {
    brute_force_kmeans(points, k_max, restarts, seed).into_iter().map(|(i, _)| i).collect()
}

/// Groups indices by label, ignoring the label values themselves.
pub fn partition(assignments: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (i, &a) in assignments.iter().enumerate() {
        groups.entry(a).or_default().insert(i);
    }
    groups.into_values().collect()
}

/// k after the largest single inertia drop; 1 when no drop is positive.
pub fn largest_drop_k(inertia: &[f64]) -> usize {
    let mut best = (1, 0.0);
    for k in 2..=inertia.len() {
        let drop = inertia[k - 2] - inertia[k - 1];
        if drop > best.1 + 1e-12 {
            best = (k, drop);
        }
    }
    best.0
}

/// Logistic function evaluated through `tanh`, a route independent of the
/// library's two-branch exponential form.
pub fn sigmoid_oracle(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}
