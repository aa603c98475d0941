//! Clustered federated learning.
//!
//! Two strategies share the round engine in [`crate::fedcore::training`]:
//!
//! * hierarchical: after a warm-up of global rounds, every client's update
//!   delta (local minus broadcast params) is clustered once with
//!   average-linkage agglomerative clustering under Euclidean distance, and
//!   each cluster then runs its own FedAvg;
//! * iterative self-selection (IFCA): the server keeps `k` models, every
//!   participant trains the one with the lowest loss on its own data, and
//!   models are aggregated per cluster. A cluster nobody picked keeps its
//!   previous parameters. The `k` models are seeded in the first round:
//!   every client trains the common initial model and the server runs
//!   k-means ([`kmeans_partition`]) on the resulting update deltas, so the
//!   starting models already differ along the directions clients disagree
//!   on instead of being `k` unrelated random draws.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::fedcore::client::ifca_assign;
pub use crate::fedcore::training::ifca_round;

/// Total map from client id to cluster id in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub clusters: BTreeMap<String, usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> + '_ {
        self.clusters.iter().filter(move |(_, c)| **c == cluster).map(|(id, _)| id.as_str())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average-linkage agglomerative clustering of update deltas.
///
/// Clusters merge while the closest pair is at distance `<= tau`. Ties go to
/// the pair whose members sort first. Cluster ids are numbered by each
/// cluster's smallest client id, so the result does not depend on map
/// iteration or client enumeration order.
pub fn hc_partition(deltas: &BTreeMap<String, Vec<f64>>, tau: f64) -> Result<ClusterAssignment> {
    let ids: Vec<&String> = deltas.keys().collect();
    let points: Vec<&Vec<f64>> = deltas.values().collect();
    let n = points.len();
    if n == 0 {
        return Err(Error::insufficient("no client deltas to cluster"));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::shape(format!(
            "delta of `{}` has {} entries, expected {dim}",
            ids[i],
            points[i].len()
        )));
    }

    // dist[i][j] for active clusters, kept up to date with the
    // Lance-Williams update for average linkage.
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(points[i], points[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    // each cluster is represented by its smallest member index
    let mut label: Vec<usize> = (0..n).collect();

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let Some((i, j, d)) = best else { break };
        if d > tau {
            break;
        }
        // merge j into i (i < j, so i stays the smallest member)
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in (0..n).filter(|&k| active[k] && k != i && k != j) {
            let merged = (si * dist[i][k] + sj * dist[j][k]) / (si + sj);
            dist[i][k] = merged;
            dist[k][i] = merged;
        }
        size[i] += size[j];
        active[j] = false;
        for l in label.iter_mut() {
            if *l == j {
                *l = i;
            }
        }
    }

    let mut reps: Vec<usize> = label.clone();
    reps.sort_unstable();
    reps.dedup();
    let cluster_of: BTreeMap<usize, usize> = reps.iter().enumerate().map(|(c, r)| (*r, c)).collect();
    Ok(ClusterAssignment {
        clusters: ids
            .iter()
            .zip(&label)
            .map(|(id, l)| ((*id).clone(), cluster_of[l]))
            .collect(),
        k: reps.len(),
    })
}

/// Deterministic k-means on update deltas.
///
/// Centers start from farthest-first traversal (first the point farthest
/// from the mean, then repeatedly the point farthest from every chosen
/// center), then Lloyd iterations run until labels stop changing (at most
/// 50). Distance ties go to the lower center index. An iteration that
/// would empty a cluster is not applied.
pub fn kmeans_partition(deltas: &BTreeMap<String, Vec<f64>>, k: usize) -> Result<ClusterAssignment> {
    let ids: Vec<&String> = deltas.keys().collect();
    let points: Vec<&Vec<f64>> = deltas.values().collect();
    let n = points.len();
    if k == 0 {
        return Err(Error::config("cluster.k must be >= 1"));
    }
    if n < k {
        return Err(Error::insufficient(format!("{n} clients cannot seed {k} clusters")));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::shape(format!(
            "delta of `{}` has {} entries, expected {dim}",
            ids[i],
            points[i].len()
        )));
    }

    let centroid = |members: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for &i in members {
            for (a, v) in c.iter_mut().zip(points[i]) {
                *a += v;
            }
        }
        c.iter_mut().for_each(|a| *a /= members.len() as f64);
        c
    };
    let argmax = |score: &dyn Fn(usize) -> f64| -> usize {
        (0..n).fold(0, |best, i| if score(i) > score(best) { i } else { best })
    };

    let all: Vec<usize> = (0..n).collect();
    let mean = centroid(&all);
    let mut centers: Vec<Vec<f64>> = vec![points[argmax(&|i| euclidean(points[i], &mean))].clone()];
    while centers.len() < k {
        let next = argmax(&|i| centers.iter().map(|c| euclidean(points[i], c)).fold(f64::INFINITY, f64::min));
        centers.push(points[next].clone());
    }

    let nearest = |centers: &[Vec<f64>], p: &[f64]| -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let d = euclidean(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
    for _ in 0..50 {
        let members: Vec<Vec<usize>> = (0..k).map(|j| (0..n).filter(|&i| labels[i] == j).collect()).collect();
        if members.iter().any(|m| m.is_empty()) {
            break;
        }
        centers = members.iter().map(|m| centroid(m)).collect();
        let next: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
        let sizes_ok = (0..k).all(|j| next.contains(&j));
        if next == labels || !sizes_ok {
            break;
        }
        labels = next;
    }
    Ok(ClusterAssignment {
        clusters: ids.iter().zip(&labels).map(|(id, l)| ((*id).clone(), *l)).collect(),
        k,
    })
}

/// Fraction of client pairs on which two labelings agree about "same
/// cluster vs different cluster"; 1.0 means equal up to relabeling.
pub fn pair_agreement(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> f64 {
    let ids: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let sa = a[ids[i]] == a[ids[j]];
            let sb = b[ids[i]] == b[ids[j]];
            agree += usize::from(sa == sb);
            total += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

/// True when two labelings induce the same partition of the same clients.
pub fn same_partition(a: &BTreeMap<String, i64>, b: &BTreeMap<String, i64>) -> bool {
    a.len() == b.len() && a.keys().all(|k| b.contains_key(k)) && pair_agreement(a, b) == 1.0
}
