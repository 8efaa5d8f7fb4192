//! Average-linkage agglomerative clustering under cosine distance.
//!
//! Clusters merge greedily, always the pair with the smallest average
//! linkage, for as long as that linkage is at most the distance threshold.
//! The inter-cluster distance matrix is updated in place with the weighted
//! recurrence
//!
//! ```text
//! d(A ∪ B, C) = (|A| d(A, C) + |B| d(B, C)) / (|A| + |B|)
//! ```
//!
//! and each row caches its nearest higher-indexed neighbour so that a merge
//! step only rescans rows whose neighbour was invalidated.
//!
//! A cluster is identified by its smallest member index. Among pairs tied
//! at the minimal linkage the one with the smallest lower id wins, then the
//! one with the smallest higher id. All arithmetic is `f64` and comparisons
//! are exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::FactEmbedding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("nothing to cluster")]
    EmptyInput,
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("vector {0} is zero or not finite")]
    DegenerateVector(usize),
    #[error("distance threshold must be in (0, 2], got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub distance_threshold: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            distance_threshold: 0.15,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let t = self.distance_threshold;
        if t > 0.0 && t <= 2.0 {
            Ok(())
        } else {
            Err(ClusterError::BadThreshold(t))
        }
    }
}

/// `1 - <u, v>` for unit vectors, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, ClusterError> {
    if u.len() != v.len() {
        return Err(ClusterError::DimMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(unit_distance(u, v))
}

fn unit_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

/// One accepted merge. `pair` holds the two clusters' ids (smallest member
/// index), lower first; the merged cluster keeps the lower id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub step: usize,
    #[serde(rename = "merged")]
    pub pair: [usize; 2],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    /// Member indices per cluster, each sorted, clusters ordered by their
    /// smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Cluster number of every input index.
    pub fn assignments(&self) -> Vec<usize> {
        let n = self.clusters.iter().map(Vec::len).sum();
        let mut out = vec![0; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                out[m] = c;
            }
        }
        out
    }
}

/// Symmetric distance matrix with per-row nearest-neighbour caches.
struct LinkageState {
    n: usize,
    dist: Vec<f64>,
    size: Vec<usize>,
    active: Vec<bool>,
    /// Nearest active `j > i` and its distance, `None` if there is none.
    nearest: Vec<Option<(usize, f64)>>,
}

impl LinkageState {
    fn new(vectors: &[Vec<f64>]) -> Self {
        let n = vectors.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = unit_distance(&vectors[i], &vectors[j]);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let mut s = LinkageState {
            n,
            dist,
            size: vec![1; n],
            active: vec![true; n],
            nearest: vec![None; n],
        };
        for i in 0..n {
            s.rescan(i);
        }
        s
    }

    #[inline]
    fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.dist[i * self.n + j] = v;
        self.dist[j * self.n + i] = v;
    }

    fn rescan(&mut self, i: usize) {
        let mut best: Option<(usize, f64)> = None;
        for j in (i + 1)..self.n {
            if !self.active[j] {
                continue;
            }
            let d = self.d(i, j);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        self.nearest[i] = best;
    }

    /// Closest active pair, ties broken by lower id then higher id.
    fn closest_pair(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.n {
            if !self.active[i] {
                continue;
            }
            if let Some((j, d)) = self.nearest[i] {
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }

    /// Merges `b` into `a` (`a < b`).
    fn merge(&mut self, a: usize, b: usize) {
        let (sa, sb) = (self.size[a] as f64, self.size[b] as f64);
        for c in 0..self.n {
            if c == a || c == b || !self.active[c] {
                continue;
            }
            let merged = (sa * self.d(a, c) + sb * self.d(b, c)) / (sa + sb);
            self.set(a, c, merged);
        }
        self.active[b] = false;
        self.size[a] += self.size[b];
        self.size[b] = 0;

        self.rescan(a);
        for i in 0..b {
            if i == a || !self.active[i] {
                continue;
            }
            match self.nearest[i] {
                Some((j, _)) if j == a || j == b => self.rescan(i),
                Some((j, d)) if i < a => {
                    let da = self.d(i, a);
                    if da < d || (da == d && a < j) {
                        self.nearest[i] = Some((a, da));
                    }
                }
                _ => {}
            }
        }
    }
}

/// Clusters raw vectors. Each vector is L2-normalized first, so positive
/// rescaling of any input leaves the result unchanged.
pub fn agglomerate_vectors(
    vectors: &[Vec<f64>],
    cfg: &ClusteringConfig,
) -> Result<Dendrogram, ClusterError> {
    cfg.validate()?;
    let dim = vectors.first().ok_or(ClusterError::EmptyInput)?.len();
    let mut unit = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(ClusterError::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let mut v = v.clone();
        if v.iter().any(|x| !x.is_finite()) || !crate::embedding::l2_normalize(&mut v) {
            return Err(ClusterError::DegenerateVector(i));
        }
        unit.push(v);
    }

    let n = unit.len();
    let mut state = LinkageState::new(&unit);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut merges = Vec::new();
    while let Some((a, b, d)) = state.closest_pair() {
        if d > cfg.distance_threshold {
            break;
        }
        merges.push(Merge {
            step: merges.len(),
            pair: [a, b],
            distance: d,
        });
        parent[b] = a;
        state.merge(a, b);
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        by_root[root(i)].push(i);
    }
    // Roots are the smallest member of each cluster, so index order is
    // already "ordered by smallest member".
    let clusters = by_root.into_iter().filter(|c| !c.is_empty()).collect();
    Ok(Dendrogram { clusters, merges })
}

/// Clusters one question's fact embeddings, returning fact ids per cluster.
pub fn agglomerate(
    embeddings: &[FactEmbedding],
    cfg: &ClusteringConfig,
) -> Result<Vec<Vec<String>>, ClusterError> {
    Ok(agglomerate_with_trace(embeddings, cfg)?.0)
}

/// As [`agglomerate`], also returning the merge trace.
pub fn agglomerate_with_trace(
    embeddings: &[FactEmbedding],
    cfg: &ClusteringConfig,
) -> Result<(Vec<Vec<String>>, Vec<Merge>), ClusterError> {
    let vectors: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.vector.iter().map(|&x| x as f64).collect())
        .collect();
    let dendrogram = agglomerate_vectors(&vectors, cfg)?;
    let clusters = dendrogram
        .clusters
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|&i| embeddings[i].fact_id.clone())
                .collect()
        })
        .collect();
    Ok((clusters, dendrogram.merges))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    }

    #[test]
    fn cosine_distance_examples() {
        let v = vec![0.6, 0.8];
        assert_eq!(cosine_distance(&v, &v).unwrap(), 0.0);
        assert_eq!(cosine_distance(&v, &[-0.6, -0.8]).unwrap(), 2.0);
        assert_eq!(cosine_distance(&e(0), &e(1)).unwrap(), 1.0);
        assert!(matches!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(ClusterError::DimMismatch { .. })
        ));
    }

    #[test]
    fn single_vector_is_one_singleton() {
        let d = agglomerate_vectors(&[vec![1.0, 2.0]], &ClusteringConfig::default()).unwrap();
        assert_eq!(d.clusters, vec![vec![0]]);
        assert!(d.merges.is_empty());
    }

    #[test]
    fn three_copies_and_an_orthogonal_vector() {
        let v = vec![e(0), e(0), e(0), e(1)];
        let d = agglomerate_vectors(&v, &ClusteringConfig::default()).unwrap();
        assert_eq!(d.clusters, vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(d.merges.len(), 2);
        assert_eq!(d.merges[0].pair, [0, 1]);
        assert_eq!(d.merges[1].pair, [0, 2]);
    }

    #[test]
    fn merges_at_threshold_but_not_above() {
        let mut a = vec![1.0, 0.0];
        let mut b = vec![0.8, 0.6];
        crate::embedding::l2_normalize(&mut a);
        crate::embedding::l2_normalize(&mut b);
        let d = unit_distance(&a, &b);
        let at = ClusteringConfig { distance_threshold: d };
        let below = ClusteringConfig { distance_threshold: f64::from_bits(d.to_bits() - 1) };
        let v = vec![vec![1.0, 0.0], vec![0.8, 0.6]];
        assert_eq!(agglomerate_vectors(&v, &at).unwrap().clusters.len(), 1);
        assert_eq!(agglomerate_vectors(&v, &below).unwrap().clusters.len(), 2);
    }

    #[test]
    fn ties_prefer_smallest_ids() {
        // 0,1 identical and 2,3 identical: both pairs at distance 0.
        let v = vec![e(0), e(0), e(1), e(1)];
        let d = agglomerate_vectors(&v, &ClusteringConfig::default()).unwrap();
        assert_eq!(d.merges[0].pair, [0, 1]);
        assert_eq!(d.merges[1].pair, [2, 3]);
        assert_eq!(d.clusters, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn average_linkage_not_single_linkage() {
        // Angles 0, 0.3, 0.85 rad: d(b, c) = 0.1475 would chain under single
        // linkage, but the average from {a, b} to c is about 0.24.
        let at = |t: f64| vec![t.cos(), t.sin()];
        let v = vec![at(0.0), at(0.3), at(0.85)];
        let d = agglomerate_vectors(&v, &ClusteringConfig::default()).unwrap();
        assert_eq!(d.clusters, vec![vec![0, 1], vec![2]]);
        assert_eq!(d.merges.len(), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = ClusteringConfig::default();
        assert_eq!(agglomerate_vectors(&[], &cfg).unwrap_err(), ClusterError::EmptyInput);
        assert_eq!(
            agglomerate_vectors(&[vec![0.0, 0.0]], &cfg).unwrap_err(),
            ClusterError::DegenerateVector(0)
        );
        assert!(matches!(
            agglomerate_vectors(&[vec![1.0], vec![1.0, 0.0]], &cfg),
            Err(ClusterError::DimMismatch { .. })
        ));
        let bad = ClusteringConfig { distance_threshold: 0.0 };
        assert!(matches!(
            agglomerate_vectors(&[vec![1.0]], &bad),
            Err(ClusterError::BadThreshold(_))
        ));
    }

    #[test]
    fn fact_ids_follow_partition() {
        let embs = vec![
            FactEmbedding { fact_id: "q:0:0".into(), vector: vec![1.0, 0.0] },
            FactEmbedding { fact_id: "q:1:0".into(), vector: vec![0.0, 1.0] },
            FactEmbedding { fact_id: "q:2:0".into(), vector: vec![1.0, 0.0] },
        ];
        let c = agglomerate(&embs, &ClusteringConfig::default()).unwrap();
        assert_eq!(c, vec![vec!["q:0:0".to_string(), "q:2:0".into()], vec!["q:1:0".into()]]);
    }
}
