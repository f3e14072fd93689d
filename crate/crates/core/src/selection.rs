//! Anchor/support partitioning: farthest point sampling, overlap-greedy,
//! K-means on camera centers, K-means on per-view feature embeddings, and
//! nearest-anchor support assignment.
//!
//! Ties break to the lowest index everywhere so every strategy is exactly
//! reproducible against brute-force oracles.

use crate::error::{Error, Result};
use crate::geometry::{DistanceMatrix, OverlapMatrix};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fps,
    Overlap,
    KmeansPose,
    KmeansFeature,
}

/// K views split into anchors and per-anchor support clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPartition {
    pub k: usize,
    pub anchors: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub strategy: Strategy,
}

impl AnchorPartition {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() || self.anchors.len() > self.k {
            return Err(Error::invalid("anchor count out of range"));
        }
        if self.clusters.len() != self.anchors.len() {
            return Err(Error::invalid("cluster count must equal anchor count"));
        }
        let mut seen = vec![false; self.k];
        for &a in &self.anchors {
            if a >= self.k || seen[a] {
                return Err(Error::invalid("anchors must be distinct valid indices"));
            }
            seen[a] = true;
        }
        for cluster in &self.clusters {
            for &s in cluster {
                if s >= self.k || seen[s] {
                    return Err(Error::invalid("support appears twice or is out of range"));
                }
                seen[s] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("some view is neither anchor nor support"));
        }
        Ok(())
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }
}

/// First-anchor choice for FPS: a fixed index (tests) or a seeded uniform draw.
#[derive(Debug, Clone, Copy)]
pub enum FirstAnchor {
    Index(usize),
    Seed(u64),
}

/// Greedy max-min farthest point sampling over a distance matrix.
pub fn select_anchors_fps(
    distances: &DistanceMatrix,
    n: usize,
    first: FirstAnchor,
) -> Result<Vec<usize>> {
    let k = distances.n();
    if n < 1 || n > k {
        return Err(Error::invalid(format!("anchor count {n} out of range 1..={k}")));
    }
    let first_idx = match first {
        FirstAnchor::Index(i) => {
            if i >= k {
                return Err(Error::invalid("first anchor index out of range"));
            }
            i
        }
        FirstAnchor::Seed(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..k),
    };
    let mut anchors = Vec::with_capacity(n);
    anchors.push(first_idx);
    // min distance of each view to the selected set
    let mut min_dist: Vec<f64> = (0..k).map(|j| distances.get(j, first_idx)).collect();
    let mut selected = vec![false; k];
    selected[first_idx] = true;
    while anchors.len() < n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..k {
            if !selected[j] && min_dist[j] > best_d {
                best = j;
                best_d = min_dist[j];
            }
        }
        selected[best] = true;
        anchors.push(best);
        for j in 0..k {
            let d = distances.get(j, best);
            if d < min_dist[j] {
                min_dist[j] = d;
            }
        }
    }
    Ok(anchors)
}

/// Greedy minimum-average-overlap selection: start at the view with the
/// lowest mean overlap to all others, then repeatedly add the view with the
/// lowest average overlap to the chosen set.
pub fn select_anchors_overlap(overlaps: &OverlapMatrix, n: usize) -> Result<Vec<usize>> {
    let k = overlaps.n();
    if n < 1 || n > k {
        return Err(Error::invalid(format!("anchor count {n} out of range 1..={k}")));
    }
    let mut selected = vec![false; k];
    let mut anchors = Vec::with_capacity(n);
    let first = (0..k)
        .min_by(|&a, &b| {
            let ma: f64 = (0..k).filter(|&j| j != a).map(|j| overlaps.get(a, j)).sum();
            let mb: f64 = (0..k).filter(|&j| j != b).map(|j| overlaps.get(b, j)).sum();
            ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
        })
        .unwrap();
    anchors.push(first);
    selected[first] = true;
    while anchors.len() < n {
        let next = (0..k)
            .filter(|&j| !selected[j])
            .min_by(|&a, &b| {
                let ma: f64 = anchors.iter().map(|&s| overlaps.get(a, s)).sum();
                let mb: f64 = anchors.iter().map(|&s| overlaps.get(b, s)).sum();
                ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        anchors.push(next);
        selected[next] = true;
    }
    Ok(anchors)
}

const KMEANS_MAX_ITER_DEFAULT: usize = 50;

/// Lloyd K-means with k-means++ seeding over arbitrary-dimension points.
/// Returns (anchors, clusters): the anchor of each cluster is its member
/// closest to the centroid, and clusters exclude their anchor.
fn kmeans_select(
    points: &[Vec<f64>],
    n: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let k = points.len();
    if n < 1 || n > k {
        return Err(Error::invalid(format!("cluster count {n} out of range 1..={k}")));
    }
    if max_iter < 1 {
        return Err(Error::invalid("max_iter must be >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("inconsistent point dimensions"));
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ init
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n);
    centroids.push(points[rng.gen_range(0..k)].clone());
    while centroids.len() < n {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            // all remaining points coincide with a centroid
            rng.gen_range(0..k)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = k - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[idx].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (ci, c) in centroids.iter().enumerate() {
                    let d = sq(p, c);
                    if d < best_d {
                        best_d = d;
                        best = ci;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignment = assign(&centroids);
    for _ in 0..max_iter {
        for (ci, c) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> =
                (0..k).filter(|&i| assignment[i] == ci).collect();
            if members.is_empty() {
                // empty-cluster repair: reseed to the point farthest from its centroid
                let far = (0..k)
                    .max_by(|&a, &b| {
                        sq(&points[a], &centroids_snapshot(points, &assignment, a))
                            .partial_cmp(&sq(
                                &points[b],
                                &centroids_snapshot(points, &assignment, b),
                            ))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                *c = points[far].clone();
            } else {
                for d in 0..dim {
                    c[d] = members.iter().map(|&i| points[i][d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let next = assign(&centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    // anchor = member closest to its centroid, lowest index on ties
    let mut anchors = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    for ci in 0..n {
        let members: Vec<usize> = (0..k).filter(|&i| assignment[i] == ci).collect();
        if members.is_empty() {
            anchors.push(usize::MAX);
            clusters.push(Vec::new());
            continue;
        }
        let anchor = *members
            .iter()
            .min_by(|&&a, &&b| {
                sq(&points[a], &centroids[ci])
                    .partial_cmp(&sq(&points[b], &centroids[ci]))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        anchors.push(anchor);
        clusters.push(members.into_iter().filter(|&m| m != anchor).collect());
    }
    // drop clusters that ended empty after repair failed (can only happen with
    // duplicated points); reassign their slot to an unused point
    if anchors.contains(&usize::MAX) {
        let mut used: Vec<bool> = vec![false; k];
        for &a in anchors.iter().filter(|&&a| a != usize::MAX) {
            used[a] = true;
        }
        for (ci, a) in anchors.iter_mut().enumerate() {
            if *a == usize::MAX {
                let free = (0..k).find(|&i| !used[i]).ok_or_else(|| {
                    Error::invalid("could not repair empty cluster")
                })?;
                used[free] = true;
                *a = free;
                // remove from whichever cluster held it
                for c in clusters.iter_mut() {
                    c.retain(|&m| m != free);
                }
                clusters[ci].clear();
            }
        }
    }
    Ok((anchors, clusters))
}

// distance target used by the empty-cluster repair rule
fn centroids_snapshot(points: &[Vec<f64>], assignment: &[usize], i: usize) -> Vec<f64> {
    let ci = assignment[i];
    let dim = points[0].len();
    let members: Vec<usize> = (0..points.len()).filter(|&j| assignment[j] == ci).collect();
    let mut c = vec![0.0; dim];
    for d in 0..dim {
        c[d] = members.iter().map(|&j| points[j][d]).sum::<f64>() / members.len() as f64;
    }
    c
}

/// K-means on 3D camera centers.
pub fn select_anchors_kmeans(
    positions: &[[f64; 3]],
    n: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let pts: Vec<Vec<f64>> = positions.iter().map(|p| p.to_vec()).collect();
    kmeans_select(&pts, n, seed, max_iter)
}

/// K-means in feature space over per-view embeddings (identical contract to
/// the pose variant, different metric space).
pub fn select_anchors_feature(
    embeddings: &[Vec<f64>],
    n: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    kmeans_select(embeddings, n, seed, max_iter)
}

pub fn default_kmeans_iters() -> usize {
    KMEANS_MAX_ITER_DEFAULT
}

/// Assign every non-anchor view to its nearest anchor (ties go to the anchor
/// listed earliest) and package the result as an [`AnchorPartition`].
pub fn assign_supports(
    distances: &DistanceMatrix,
    anchors: &[usize],
    strategy: Strategy,
) -> Result<AnchorPartition> {
    let k = distances.n();
    if anchors.is_empty() {
        return Err(Error::invalid("anchors must be non-empty"));
    }
    let mut seen = vec![false; k];
    for &a in anchors {
        if a >= k {
            return Err(Error::invalid("anchor index out of range"));
        }
        if seen[a] {
            return Err(Error::invalid("duplicate anchor"));
        }
        seen[a] = true;
    }
    let mut clusters = vec![Vec::new(); anchors.len()];
    for j in 0..k {
        if seen[j] {
            continue;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (ai, &a) in anchors.iter().enumerate() {
            let d = distances.get(j, a);
            if d < best_d {
                best_d = d;
                best = ai;
            }
        }
        clusters[best].push(j);
    }
    let part = AnchorPartition { k, anchors: anchors.to_vec(), clusters, strategy };
    part.validate()?;
    Ok(part)
}

/// Partition from a pre-clustered K-means result.
pub fn partition_from_kmeans(
    k: usize,
    anchors: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    strategy: Strategy,
) -> Result<AnchorPartition> {
    let part = AnchorPartition { k, anchors, clusters, strategy };
    part.validate()?;
    Ok(part)
}
