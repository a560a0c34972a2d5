//! Threshold-gated FINCH clustering.
//!
//! Every vector starts as its own cluster. Each round links clusters where
//! one is the other's nearest neighbour (by centroid, Euclidean) *and* the
//! centroid distance is below the round's threshold, merges the connected
//! components of those links and recomputes centroids as the mean of all
//! member vectors. Rounds continue until nothing links. Unlike the original
//! algorithm singletons survive, which keeps outliers (background crops) from
//! being absorbed into object clusters.
//!
//! [`original_finch_level0`] is the first partition of the original
//! parameter-free algorithm, kept for comparison.

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::embedding::FeatureVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Candidate ids, ascending.
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Per-round distance thresholds; rounds past the end reuse the last value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSchedule {
    initial: Vec<f64>,
}

impl ThresholdSchedule {
    pub fn new(initial: Vec<f64>) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::Config("threshold schedule is empty".into()));
        }
        if initial.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config(format!(
                "thresholds must be positive, got {initial:?}"
            )));
        }
        if initial.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "threshold schedule must be non-increasing, got {initial:?}"
            )));
        }
        Ok(Self { initial })
    }

    /// Single threshold used in every round.
    pub fn constant(theta: f64) -> Result<Self> {
        Self::new(vec![theta])
    }

    /// Single-class profile.
    pub fn single_class() -> Self {
        Self {
            initial: vec![12.0, 9.0, 7.75],
        }
    }

    /// Multi-class profile.
    pub fn multi_class() -> Self {
        Self {
            initial: vec![5.0, 4.0, 3.0],
        }
    }

    /// Threshold for 1-based round `round`.
    pub fn at(&self, round: usize) -> f64 {
        let i = round.max(1) - 1;
        *self.initial.get(i).unwrap_or_else(|| self.tail_ref())
    }

    pub fn tail(&self) -> f64 {
        *self.tail_ref()
    }

    fn tail_ref(&self) -> &f64 {
        self.initial.last().expect("schedule is never empty")
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }
}

impl TryFrom<Vec<f64>> for ThresholdSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ThresholdSchedule> for Vec<f64> {
    fn from(s: ThresholdSchedule) -> Self {
        s.initial
    }
}

impl std::str::FromStr for ThresholdSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad threshold {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

fn check_dims<V: AsRef<[f64]>>(vectors: &[V]) -> Result<usize> {
    let dim = vectors.first().map_or(0, |v| v.as_ref().len());
    if let Some(v) = vectors.iter().find(|v| v.as_ref().len() != dim) {
        return Err(Error::Data(format!(
            "feature dimension mismatch: {} vs {dim}",
            v.as_ref().len()
        )));
    }
    Ok(dim)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Nearest other point and its distance; ties go to the lower index.
fn nearest_neighbors<V: AsRef<[f64]>>(points: &[V]) -> Vec<Option<(usize, f64)>> {
    let n = points.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(points[i].as_ref(), points[j].as_ref());
            // j > i and i's candidates arrive in increasing order, so strict
            // comparisons keep the lowest index on ties.
            if best[i].is_none_or(|(_, bd)| d < bd) {
                best[i] = Some((j, d));
            }
            if best[j].is_none_or(|(_, bd)| d < bd) {
                best[j] = Some((i, d));
            }
        }
    }
    best
}

/// Links `(i, j)`, `i < j`, where one of the pair is the other's nearest
/// neighbour and their distance is strictly below `theta`.
pub fn partial_neighbor_edges<V: AsRef<[f64]>>(centroids: &[V], theta: f64) -> Result<Vec<(usize, usize)>> {
    check_dims(centroids)?;
    let mut edges: Vec<(usize, usize)> = nearest_neighbors(centroids)
        .into_iter()
        .enumerate()
        .filter_map(|(i, nn)| {
            let (j, d) = nn?;
            (d < theta).then_some((i.min(j), i.max(j)))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

/// Group `items` by the connected components of `edges`, ordered by each
/// component's smallest index.
fn components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::<usize>::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot_of_root = vec![usize::MAX; n];
    for i in 0..n {
        let r = uf.find(i);
        if slot_of_root[r] == usize::MAX {
            slot_of_root[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot_of_root[r]].push(i);
    }
    groups
}

fn mean_of(members: &[usize], vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    for &m in members {
        for (acc, v) in c.iter_mut().zip(&vectors[m]) {
            *acc += v;
        }
    }
    let n = members.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

fn to_f64(features: &[FeatureVector]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| f.values.iter().map(|&v| v as f64).collect())
        .collect()
}

fn finish(groups: Vec<Vec<usize>>, features: &[FeatureVector], vectors: &[Vec<f64>], dim: usize) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = groups
        .into_iter()
        .map(|g| {
            let centroid = mean_of(&g, vectors, dim);
            let mut members: Vec<usize> = g.iter().map(|&i| features[i].candidate_id).collect();
            members.sort_unstable();
            Cluster { members, centroid }
        })
        .collect();
    sort_clusters(&mut clusters);
    clusters
}

/// Size descending, then smallest member id.
pub fn sort_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| {
        b.size()
            .cmp(&a.size())
            .then(a.members.first().cmp(&b.members.first()))
    });
}

/// Threshold-gated FINCH over `features`.
pub fn finch_threshold_cluster(features: &[FeatureVector], sched: &ThresholdSchedule) -> Result<Vec<Cluster>> {
    let vectors = to_f64(features);
    let dim = check_dims(&vectors)?;
    // Each group holds indices into `features`.
    let mut groups: Vec<Vec<usize>> = (0..features.len()).map(|i| vec![i]).collect();
    let mut round = 1;
    loop {
        let centroids: Vec<Vec<f64>> = groups.iter().map(|g| mean_of(g, &vectors, dim)).collect();
        let edges = partial_neighbor_edges(&centroids, sched.at(round))?;
        if edges.is_empty() {
            break;
        }
        groups = components(groups.len(), &edges)
            .into_iter()
            .map(|comp| {
                let mut merged: Vec<usize> = comp.into_iter().flat_map(|c| groups[c].clone()).collect();
                merged.sort_unstable();
                merged
            })
            .collect();
        round += 1;
    }
    Ok(finish(groups, features, &vectors, dim))
}

/// First partition of the original FINCH: link `i`–`j` when either is the
/// other's nearest neighbour or both share one, with no distance gate.
pub fn original_finch_level0(features: &[FeatureVector]) -> Result<Vec<Cluster>> {
    let vectors = to_f64(features);
    let dim = check_dims(&vectors)?;
    let nn: Vec<Option<usize>> = nearest_neighbors(&vectors)
        .into_iter()
        .map(|o| o.map(|(j, _)| j))
        .collect();
    let mut edges = Vec::new();
    for (i, j) in nn.iter().enumerate() {
        if let Some(j) = j {
            edges.push((i, *j));
        }
    }
    // nn(i) = nn(j) puts i and j in the component of their shared neighbour,
    // which the direct links above already connect.
    Ok(finish(components(vectors.len(), &edges), features, &vectors, dim))
}
