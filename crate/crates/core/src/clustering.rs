//! Style-based client clustering.
//!
//! Clients are grouped by h-means over their mean styles; the number of
//! clusters is chosen by running h-means several times per candidate `h`,
//! keeping the run with the smallest total intra-cluster distance, and then
//! picking the `h` whose winner has the highest silhouette score.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::spectral::Style;

pub const MAX_ITERATIONS: usize = 300;
pub const CONVERGENCE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePoint {
    pub client: ClientId,
    pub vector: Vec<f64>,
}

impl StylePoint {
    pub fn new(client: ClientId, vector: Vec<f64>) -> Self {
        Self { client, vector }
    }

    pub fn from_style(client: ClientId, style: &Style) -> Self {
        Self { client, vector: style.values().to_vec() }
    }
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A partition of clients into non-empty clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPartition {
    points: Vec<StylePoint>,
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    silhouette: f64,
}

impl ClusterPartition {
    /// Builds a partition from per-point labels. Labels must cover `0..C`
    /// without gaps; centroids are the member means.
    pub fn from_labels(points: Vec<StylePoint>, labels: Vec<usize>) -> Result<Self> {
        validate_points(&points)?;
        if labels.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        let clusters = labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; clusters];
        for &l in &labels {
            sizes[l] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Clustering(format!("cluster {empty} is empty")));
        }
        let centroids = centroids_of(&points, &labels, clusters);
        let mut part = Self { points, labels, centroids, silhouette: 0.0 };
        if clusters >= 2 {
            part.silhouette = silhouette(&part)?;
        }
        Ok(part)
    }

    /// A single cluster holding every point.
    pub fn single(points: Vec<StylePoint>) -> Result<Self> {
        let n = points.len();
        Self::from_labels(points, vec![0; n])
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn num_clients(&self) -> usize {
        self.points.len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Silhouette score, or 0 for a single-cluster partition.
    pub fn silhouette(&self) -> f64 {
        self.silhouette
    }

    pub fn points(&self) -> &[StylePoint] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn index_of(&self, client: ClientId) -> Result<usize> {
        self.points
            .iter()
            .position(|p| p.client == client)
            .ok_or(Error::UnknownClient(client.0))
    }

    pub fn cluster_of(&self, client: ClientId) -> Result<usize> {
        Ok(self.labels[self.index_of(client)?])
    }

    pub fn assignments(&self) -> BTreeMap<ClientId, usize> {
        self.points.iter().map(|p| p.client).zip(self.labels.iter().copied()).collect()
    }

    /// Client ids of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<ClientId>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for (p, &l) in self.points.iter().zip(&self.labels) {
            out[l].push(p.client);
        }
        out.iter_mut().for_each(|c| c.sort());
        out
    }

    pub fn to_export(&self, h_range: (usize, usize), seeds: Vec<u64>) -> PartitionExport {
        PartitionExport {
            clusters: self.clusters().into_iter().map(|c| c.into_iter().map(|id| id.0).collect()).collect(),
            centroids: self.centroids.clone(),
            silhouette: self.silhouette,
            h_range: [h_range.0, h_range.1],
            seeds,
        }
    }
}

/// JSON form of a partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionExport {
    pub clusters: Vec<Vec<u32>>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: f64,
    pub h_range: [usize; 2],
    pub seeds: Vec<u64>,
}

fn validate_points(points: &[StylePoint]) -> Result<()> {
    let Some(first) = points.first() else {
        return Err(Error::Clustering("no points".into()));
    };
    let dim = first.vector.len();
    let mut seen = BTreeSet::new();
    for p in points {
        if p.vector.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "client {} has dimension {}, expected {dim}",
                p.client,
                p.vector.len()
            )));
        }
        if p.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("client {} has non-finite style", p.client)));
        }
        if !seen.insert(p.client) {
            return Err(Error::Clustering(format!("duplicate client {}", p.client)));
        }
    }
    Ok(())
}

fn centroids_of(points: &[StylePoint], labels: &[usize], clusters: usize) -> Vec<Vec<f64>> {
    let dim = points[0].vector.len();
    let mut sums = vec![vec![0.0; dim]; clusters];
    let mut counts = vec![0usize; clusters];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(&p.vector) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// Index of the nearest centroid; ties go to the smaller index.
pub fn nearest(vector: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(vector, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[StylePoint], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(&p.vector, &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // h <= n guarantees a donor cluster with at least two members.
        let i = far.expect("a cluster with two or more members exists");
        labels[i] = empty;
        centroids[empty] = points[i].vector.clone();
    }
}

/// Lloyd's h-means with seeded farthest-first initialization.
pub fn kmeans(points: &[StylePoint], h: usize, seed: u64) -> Result<ClusterPartition> {
    validate_points(points)?;
    let n = points.len();
    if h == 0 || h > n {
        return Err(Error::Clustering(format!("cannot form {h} clusters from {n} points")));
    }

    let mut rng = seed::rng(seed, &[seed::STREAM_KMEANS]);
    let mut centroids = Vec::with_capacity(h);
    centroids.push(points[rng.random_range(0..n)].vector.clone());
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(&p.vector, &centroids[0])).collect();
    while centroids.len() < h {
        let mut pick = 0;
        for i in 1..n {
            if min_d[i] > min_d[pick] {
                pick = i;
            }
        }
        let c = points[pick].vector.clone();
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(&p.vector, &c));
        }
        centroids.push(c);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..MAX_ITERATIONS {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(&p.vector, &centroids);
        }
        repair_empty(points, &mut labels, &mut centroids);
        let updated = centroids_of(points, &labels, h);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| dist(a, b))
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < CONVERGENCE_TOL {
            break;
        }
    }
    ClusterPartition::from_labels(points.to_vec(), labels)
}

fn members(part: &ClusterPartition, cluster: usize) -> impl Iterator<Item = usize> + '_ {
    part.labels.iter().enumerate().filter(move |(_, &l)| l == cluster).map(|(i, _)| i)
}

fn intra_by_index(part: &ClusterPartition, i: usize) -> f64 {
    let own = part.labels[i];
    let (mut sum, mut count) = (0.0, 0usize);
    for j in members(part, own) {
        if j != i {
            sum += dist(&part.points[i].vector, &part.points[j].vector);
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { sum / count as f64 }
}

fn inter_by_index(part: &ClusterPartition, i: usize) -> f64 {
    let own = part.labels[i];
    let c = part.num_clusters();
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (j, &l) in part.labels.iter().enumerate() {
        sums[l] += dist(&part.points[i].vector, &part.points[j].vector);
        counts[l] += 1;
    }
    (0..c)
        .filter(|&k| k != own)
        .map(|k| sums[k] / counts[k] as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Mean distance from `client` to the other members of its cluster (0 for a
/// singleton).
pub fn intra_cluster_dist(part: &ClusterPartition, client: ClientId) -> Result<f64> {
    Ok(intra_by_index(part, part.index_of(client)?))
}

/// Smallest mean distance from `client` to the members of another cluster.
pub fn inter_cluster_dist(part: &ClusterPartition, client: ClientId) -> Result<f64> {
    let i = part.index_of(client)?;
    if part.num_clusters() < 2 {
        return Err(Error::Clustering("inter-cluster distance needs two clusters".into()));
    }
    Ok(inter_by_index(part, i))
}

/// Mean per-client silhouette; singleton members contribute 0.
pub fn silhouette(part: &ClusterPartition) -> Result<f64> {
    let c = part.num_clusters();
    if c < 2 {
        return Err(Error::Clustering("silhouette needs two clusters".into()));
    }
    let mut sizes = vec![0usize; c];
    part.labels.iter().for_each(|&l| sizes[l] += 1);
    let total: f64 = (0..part.points.len())
        .map(|i| {
            if sizes[part.labels[i]] < 2 {
                return 0.0;
            }
            let a = intra_by_index(part, i);
            let b = inter_by_index(part, i);
            let m = a.max(b);
            if m == 0.0 { 0.0 } else { (b - a) / m }
        })
        .sum();
    Ok(total / part.points.len() as f64)
}

/// Hyper-parameters of the cluster-count search: `h` ranges over
/// `min_clusters..max_clusters_exclusive`, each tried `restarts` times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub min_clusters: usize,
    pub max_clusters_exclusive: usize,
    pub restarts: usize,
}

impl SelectionParams {
    /// `m = 2`, `n = min(K, 9)`, `N = 10`.
    pub fn defaults_for(clients: usize) -> Self {
        Self { min_clusters: 2, max_clusters_exclusive: clients.min(9), restarts: 10 }
    }

    pub fn is_feasible(&self, clients: usize) -> bool {
        self.min_clusters >= 2
            && self.min_clusters < self.max_clusters_exclusive
            && self.max_clusters_exclusive - 1 <= clients
            && self.restarts >= 1
    }
}

/// Winner of the restarts for one `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub clusters: usize,
    pub seed: u64,
    pub total_intra: f64,
    pub partition: ClusterPartition,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub partition: ClusterPartition,
    pub candidates: Vec<Candidate>,
    pub seeds: Vec<u64>,
}

pub fn restart_seed(base_seed: u64, h: usize, restart: usize) -> u64 {
    seed::derive(base_seed, &[h as u64, restart as u64])
}

/// Cluster-count selection; see the module docs.
pub fn select_clustering(
    points: &[StylePoint],
    params: SelectionParams,
    base_seed: u64,
) -> Result<ClusterPartition> {
    Ok(select_clustering_traced(points, params, base_seed)?.partition)
}

pub fn select_clustering_traced(
    points: &[StylePoint],
    params: SelectionParams,
    base_seed: u64,
) -> Result<Selection> {
    validate_points(points)?;
    if !params.is_feasible(points.len()) {
        return Err(Error::Clustering(format!(
            "infeasible search range h in [{}, {}) with {} restarts over {} points",
            params.min_clusters,
            params.max_clusters_exclusive,
            params.restarts,
            points.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = (params.min_clusters..params.max_clusters_exclusive)
        .flat_map(|h| (0..params.restarts).map(move |r| (h, r)))
        .collect();
    let runs: Vec<Result<(usize, u64, f64, ClusterPartition)>> = jobs
        .par_iter()
        .map(|&(h, r)| {
            let s = restart_seed(base_seed, h, r);
            let part = kmeans(points, h, s)?;
            let total: f64 = (0..part.points.len()).map(|i| intra_by_index(&part, i)).sum();
            Ok((h, s, total, part))
        })
        .collect();

    // Deterministic reduction: job order is (h, restart) ascending.
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut seeds = Vec::with_capacity(runs.len());
    for run in runs {
        let (h, s, total, part) = run?;
        seeds.push(s);
        match candidates.last_mut() {
            Some(best) if best.clusters == h => {
                if total < best.total_intra {
                    *best = Candidate { clusters: h, seed: s, total_intra: total, partition: part };
                }
            }
            _ => candidates.push(Candidate { clusters: h, seed: s, total_intra: total, partition: part }),
        }
    }
    let mut winner = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.partition.silhouette > candidates[winner].partition.silhouette {
            winner = i;
        }
    }
    Ok(Selection { partition: candidates[winner].partition.clone(), candidates, seeds })
}

/// Nearest centroid to `style`; ties go to the smaller cluster index.
pub fn assign_by_style(style: &Style, part: &ClusterPartition) -> Result<usize> {
    assign_vector(style.values(), part)
}

pub fn assign_vector(vector: &[f64], part: &ClusterPartition) -> Result<usize> {
    let dim = part.centroids[0].len();
    if vector.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "style has {} values, centroids have {dim}",
            vector.len()
        )));
    }
    Ok(nearest(vector, &part.centroids))
}

/// Fraction of clients whose true domain equals the majority domain of their
/// cluster (majority ties go to the smaller domain id).
pub fn cluster_accuracy(part: &ClusterPartition, truth: &BTreeMap<ClientId, usize>) -> Result<f64> {
    let ids: BTreeSet<ClientId> = part.points.iter().map(|p| p.client).collect();
    let truth_ids: BTreeSet<ClientId> = truth.keys().copied().collect();
    if ids != truth_ids {
        return Err(Error::InvalidInput(
            "partition and ground truth cover different clients".into(),
        ));
    }
    let mut correct = 0usize;
    for cluster in part.clusters() {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for id in &cluster {
            *votes.entry(truth[id]).or_default() += 1;
        }
        correct += votes.values().copied().max().unwrap_or(0);
    }
    Ok(correct as f64 / ids.len() as f64)
}
