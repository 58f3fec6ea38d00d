//! Mutual k-nearest-neighbour affinity graphs over feature embeddings.
//!
//! An edge (i, j) exists only when i and j appear in each other's k-NN
//! lists. Two weight schemes are supported: `NormalizedPsd` follows
//! `W = D^{-1/2}(A + D)D^{-1/2}` (off-diagonal `A_ij/sqrt(d_i*d_j)`), whose
//! theory-mode variant (unit diagonal) is positive semi-definite;
//! `ReciprocalMutualCount` uses `1/max(d_i, d_j)`, one reading of the
//! ambiguous "reciprocal of the number of mutual neighbours". Experiment mode
//! zeroes the diagonal.
//!
//! Nearest neighbours are exact. Small inputs use brute force; larger ones go
//! through a centroid-bucket index with triangle-inequality pruning, which
//! returns byte-identical results (ties always break by ascending index).

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

/// Distance used for neighbour search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Affinity weight scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `w_ij = 1/max(d_i, d_j)` over mutual degrees.
    ReciprocalMutualCount,
    /// `w_ij = A_ij / sqrt(d_i * d_j)`; PSD with a unit diagonal.
    NormalizedPsd,
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::ReciprocalMutualCount => "reciprocal_mutual_count",
            WeightScheme::NormalizedPsd => "normalized_psd",
        }
    }
}

/// Diagonal convention: unit self-weight (the PSD theory) or zero (the
/// experimental deviation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Theory,
    Experiment,
}

/// Feature embedding with its distance metric.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    matrix: DenseMatrix,
    metric: Metric,
}

impl FeatureSet {
    pub fn new(matrix: DenseMatrix, metric: Metric) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::data(format!(
                "feature set must be non-empty, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        matrix.check_finite("features")?;
        Ok(FeatureSet { matrix, metric })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Points in the space where squared euclidean distance realizes the
    /// metric: raw rows for euclidean, unit-normalized rows for cosine (rows
    /// with zero norm stay at the origin).
    fn prepared(&self) -> DenseMatrix {
        match self.metric {
            Metric::Euclidean => self.matrix.clone(),
            Metric::Cosine => {
                let mut out = self.matrix.clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for v in row.iter_mut() {
                            *v /= norm;
                        }
                    }
                }
                out
            }
        }
    }
}

/// Sparse symmetric mutual k-NN affinity graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualKnnGraph {
    n: usize,
    k: usize,
    scheme: WeightScheme,
    mode: GraphMode,
    self_weight: f64,
    /// CSR layout over off-diagonal neighbours, each list ascending.
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl MutualKnnGraph {
    /// Graph with no edges and zero diagonal; the λ=0 degenerate case.
    pub fn empty(n: usize) -> Self {
        MutualKnnGraph {
            n,
            k: 0,
            scheme: WeightScheme::NormalizedPsd,
            mode: GraphMode::Experiment,
            self_weight: 0.0,
            offsets: vec![0; n + 1],
            neighbors: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Graph from an explicit undirected edge list (i < j, positive finite
    /// weights, no duplicates); the diagonal follows `mode`. Used by tests
    /// and golden-file loading.
    pub fn from_edges(
        n: usize,
        k: usize,
        scheme: WeightScheme,
        mode: GraphMode,
        edges: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j, w) in edges {
            if i >= j || j >= n {
                return Err(Error::data(format!(
                    "edge ({i}, {j}) must satisfy i < j < n = {n}"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::data(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::data(format!("duplicate edge ({i}, {j})")));
            }
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        for list in &mut adjacency {
            list.sort_by(|a, b| a.0.cmp(&b.0));
            for &(j, w) in list.iter() {
                neighbors.push(j);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Ok(MutualKnnGraph {
            n,
            k,
            scheme,
            mode,
            self_weight: match mode {
                GraphMode::Theory => 1.0,
                GraphMode::Experiment => 0.0,
            },
            offsets,
            neighbors,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn self_weight(&self) -> f64 {
        self.self_weight
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Off-diagonal neighbours of node i as parallel (index, weight) slices.
    pub fn neighbors_of(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.offsets[i];
        let hi = self.offsets[i + 1];
        (&self.neighbors[lo..hi], &self.weights[lo..hi])
    }

    /// Mutual degree of node i (self-loop excluded).
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Undirected edge list with i < j, ascending, excluding the diagonal.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..self.n {
            let (nbrs, ws) = self.neighbors_of(i);
            for (&j, &w) in nbrs.iter().zip(ws.iter()) {
                if i < j {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Row i of `W * values`, diagonal included.
    pub fn weighted_sums(&self, values: &DenseMatrix) -> Result<DenseMatrix> {
        if values.rows() != self.n {
            return Err(Error::shape(format!(
                "graph has {} nodes, values have {} rows",
                self.n,
                values.rows()
            )));
        }
        let c = values.cols();
        let mut out = DenseMatrix::zeros(self.n, c);
        for i in 0..self.n {
            let (nbrs, ws) = self.neighbors_of(i);
            let acc = out.row_mut(i);
            if self.self_weight != 0.0 {
                let vi = values.row(i);
                for t in 0..c {
                    acc[t] += self.self_weight * vi[t];
                }
            }
            for (&j, &w) in nbrs.iter().zip(ws.iter()) {
                let vj = values.row(j);
                for t in 0..c {
                    acc[t] += w * vj[t];
                }
            }
        }
        Ok(out)
    }

    /// Dense `n x n` affinity matrix (test-scale helper).
    pub fn to_dense(&self) -> DenseMatrix {
        let mut w = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            w.set(i, i, self.self_weight);
            let (nbrs, ws) = self.neighbors_of(i);
            for (&j, &wij) in nbrs.iter().zip(ws.iter()) {
                w.set(i, j, wij);
            }
        }
        w
    }

    /// Edge dump as `i,j,w` lines (header included), i < j ascending, with
    /// shortest round-trip float formatting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("i,j,w\n");
        for (i, j, w) in self.edges() {
            out.push_str(&format!("{i},{j},{w}\n"));
        }
        out
    }

    /// JSON header describing the graph for golden files.
    pub fn header_json(&self) -> String {
        format!(
            "{{\"n\":{},\"k\":{},\"scheme\":\"{}\",\"mode\":\"{}\",\"self_weight\":{},\"edge_count\":{}}}",
            self.n,
            self.k,
            self.scheme.name(),
            match self.mode {
                GraphMode::Theory => "theory",
                GraphMode::Experiment => "experiment",
            },
            self.self_weight,
            self.edge_count()
        )
    }
}

/// Directed k-nearest-neighbour lists, self excluded, each list ordered by
/// ascending distance with ties broken toward the lower index. The raw
/// ingredient behind the mutual graph, exposed for neighbourhood baselines
/// that weigh reciprocal and one-way neighbours differently.
pub fn directed_knn(features: &FeatureSet, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.len();
    if k == 0 {
        return Err(Error::config("neighbour count k must be at least 1"));
    }
    if k >= n {
        return Err(Error::config(format!(
            "neighbour count k={k} must be smaller than the sample count {n}"
        )));
    }
    Ok(knn_lists(&features.prepared(), k))
}

/// Mutual k-NN graph in experiment mode (zero diagonal), the default used by
/// the adaptation loop.
pub fn build_mutual_knn(
    features: &FeatureSet,
    k: usize,
    scheme: WeightScheme,
) -> Result<MutualKnnGraph> {
    build_mutual_knn_mode(features, k, scheme, GraphMode::Experiment)
}

/// Mutual k-NN graph with an explicit diagonal convention.
pub fn build_mutual_knn_mode(
    features: &FeatureSet,
    k: usize,
    scheme: WeightScheme,
    mode: GraphMode,
) -> Result<MutualKnnGraph> {
    let n = features.len();
    if k == 0 {
        return Err(Error::config("neighbour count k must be at least 1"));
    }
    if k >= n {
        return Err(Error::config(format!(
            "neighbour count k={k} must be smaller than the sample count {n}"
        )));
    }
    let points = features.prepared();
    let lists = knn_lists(&points, k);

    // Mutual adjacency: j in knn(i) and i in knn(j). Lists are (dist, idx)
    // sorted; re-sort by index for binary search.
    let mut sorted_lists: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| {
            let mut v = l.clone();
            v.sort_unstable();
            v
        })
        .collect();
    for l in &mut sorted_lists {
        l.dedup();
    }
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in &sorted_lists[i] {
            if j > i && sorted_lists[j].binary_search(&i).is_ok() {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    for l in &mut adjacency {
        l.sort_unstable();
    }
    let degrees: Vec<usize> = adjacency.iter().map(Vec::len).collect();

    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut neighbors = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        for &j in &adjacency[i] {
            let w = match scheme {
                WeightScheme::ReciprocalMutualCount => 1.0 / degrees[i].max(degrees[j]) as f64,
                WeightScheme::NormalizedPsd => 1.0 / ((degrees[i] * degrees[j]) as f64).sqrt(),
            };
            neighbors.push(j);
            weights.push(w);
        }
        offsets.push(neighbors.len());
    }
    Ok(MutualKnnGraph {
        n,
        k,
        scheme,
        mode,
        self_weight: match mode {
            GraphMode::Theory => 1.0,
            GraphMode::Experiment => 0.0,
        },
        offsets,
        neighbors,
        weights,
    })
}

/// `W * probs`: each output row is the weighted sum of its neighbours' rows
/// (plus the diagonal term in theory mode). Isolated nodes give zero rows in
/// experiment mode.
pub fn laplacian_smooth(graph: &MutualKnnGraph, probs: &DenseMatrix) -> Result<DenseMatrix> {
    graph.weighted_sums(probs)
}

/// Whether `W + W^T` is positive semi-definite (smallest eigenvalue down to
/// `-1e-8`). Exact dense eigensolve; refuses n > 512.
pub fn check_psd(graph: &MutualKnnGraph) -> Result<bool> {
    if graph.n() > 512 {
        return Err(Error::range(format!(
            "check_psd is a test-scale utility; {} nodes exceeds the 512 cap",
            graph.n()
        )));
    }
    if graph.n() == 0 {
        return Ok(true);
    }
    let dense = graph.to_dense();
    let n = graph.n();
    let mut sym = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = dense.get(i, j) + dense.get(j, i);
        }
    }
    let eig = nalgebra::SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(min >= -1e-8)
}

const BRUTE_FORCE_CUTOFF: usize = 128;

/// Candidate ordered by (squared distance, index); the heap keeps the worst
/// of the current k on top.
#[derive(PartialEq)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Exact k-NN lists (self excluded), each sorted by (distance, index).
fn knn_lists(points: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    if points.rows() < BRUTE_FORCE_CUTOFF {
        knn_brute(points, k)
    } else {
        knn_bucketed(points, k)
    }
}

fn knn_brute(points: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = points.rows();
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let qi = points.row(i);
        let mut cands: Vec<Cand> = (0..n)
            .filter(|&j| j != i)
            .map(|j| Cand {
                d2: dist2(qi, points.row(j)),
                idx: j,
            })
            .collect();
        cands.select_nth_unstable_by(k - 1, Cand::cmp);
        cands.truncate(k);
        cands.sort_unstable_by(Cand::cmp);
        lists.push(cands.into_iter().map(|c| c.idx).collect());
    }
    lists
}

/// Centroid-bucket exact index. Points are clustered with a few fixed Lloyd
/// iterations; each query visits buckets in ascending lower-bound order
/// (`dist(q, centroid) - radius`, by the triangle inequality) and stops once
/// no remaining bucket can beat the current k-th candidate. A small relative
/// slack keeps floating-point noise from pruning a bucket holding an exact
/// tie.
fn knn_bucketed(points: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = points.rows();
    let d = points.cols();
    let nb = ((n as f64).sqrt().round() as usize).clamp(16, 2048).min(n);

    let mut centroids = DenseMatrix::zeros(nb, d);
    for b in 0..nb {
        let src = points.row(b * n / nb);
        centroids.row_mut(b).copy_from_slice(src);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..3 {
        for i in 0..n {
            let p = points.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for b in 0..nb {
                let dd = dist2(p, centroids.row(b));
                if dd < best_d {
                    best_d = dd;
                    best = b;
                }
            }
            assign[i] = best;
        }
        let mut sums = DenseMatrix::zeros(nb, d);
        let mut counts = vec![0usize; nb];
        for i in 0..n {
            let b = assign[i];
            counts[b] += 1;
            let row = sums.row_mut(b);
            for (s, v) in row.iter_mut().zip(points.row(i).iter()) {
                *s += v;
            }
        }
        for b in 0..nb {
            if counts[b] > 0 {
                let row = sums.row_mut(b);
                for v in row.iter_mut() {
                    *v /= counts[b] as f64;
                }
                centroids.row_mut(b).copy_from_slice(sums.row(b));
            }
        }
    }
    for i in 0..n {
        let p = points.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for b in 0..nb {
            let dd = dist2(p, centroids.row(b));
            if dd < best_d {
                best_d = dd;
                best = b;
            }
        }
        assign[i] = best;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for i in 0..n {
        members[assign[i]].push(i);
    }
    let radius: Vec<f64> = (0..nb)
        .map(|b| {
            members[b]
                .iter()
                .map(|&i| dist2(centroids.row(b), points.row(i)).sqrt())
                .fold(0.0, f64::max)
        })
        .collect();

    let mut lists = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(nb);
    let mut lower = vec![0.0f64; nb];
    for i in 0..n {
        let q = points.row(i);
        order.clear();
        for b in 0..nb {
            if members[b].is_empty() {
                continue;
            }
            let dc = dist2(q, centroids.row(b)).sqrt();
            lower[b] = (dc - radius[b]).max(0.0);
            order.push(b);
        }
        order.sort_unstable_by(|&a, &b| lower[a].total_cmp(&lower[b]).then(a.cmp(&b)));

        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        for &b in order.iter() {
            if heap.len() == k {
                let worst = heap.peek().expect("heap holds k candidates").d2.sqrt();
                if lower[b] > worst + 1e-9 * (1.0 + worst) {
                    break;
                }
            }
            for &j in &members[b] {
                if j == i {
                    continue;
                }
                let c = Cand {
                    d2: dist2(q, points.row(j)),
                    idx: j,
                };
                if heap.len() < k {
                    heap.push(c);
                } else if c.cmp(heap.peek().expect("non-empty heap")) == std::cmp::Ordering::Less {
                    heap.pop();
                    heap.push(c);
                }
            }
        }
        let mut cands = heap.into_vec();
        cands.sort_unstable_by(Cand::cmp);
        lists.push(cands.into_iter().map(|c| c.idx).collect());
    }
    lists
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(n: usize, d: usize, seed: u64, metric: Metric) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        FeatureSet::new(DenseMatrix::from_vec(n, d, data).unwrap(), metric).unwrap()
    }

    /// O(N^2) reference: full distance table, same tie rule.
    fn oracle_knn(points: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
        let n = points.rows();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (dist2(points.row(i), points.row(j)), j))
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.truncate(k);
                all.into_iter().map(|(_, j)| j).collect()
            })
            .collect()
    }

    fn oracle_mutual_edges(points: &DenseMatrix, k: usize) -> Vec<(usize, usize)> {
        let lists = oracle_knn(points, k);
        let mut edges = Vec::new();
        for i in 0..points.rows() {
            for &j in &lists[i] {
                if j > i && lists[j].contains(&i) {
                    edges.push((i, j));
                }
            }
        }
        edges.sort_unstable();
        edges
    }

    #[test]
    fn three_point_line_has_single_mutual_edge() {
        let fs = FeatureSet::new(
            DenseMatrix::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap(),
            Metric::Euclidean,
        )
        .unwrap();
        let g = build_mutual_knn(&fs, 1, WeightScheme::NormalizedPsd).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0)]);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn identical_points_pair_with_unit_weight() {
        let fs = FeatureSet::new(
            DenseMatrix::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap(),
            Metric::Euclidean,
        )
        .unwrap();
        let g = build_mutual_knn(&fs, 1, WeightScheme::NormalizedPsd).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0)]);
    }

    #[test]
    fn k_bounds_are_enforced() {
        let fs = random_features(5, 2, 0, Metric::Euclidean);
        assert!(matches!(
            build_mutual_knn(&fs, 0, WeightScheme::NormalizedPsd),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_mutual_knn(&fs, 5, WeightScheme::NormalizedPsd),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn brute_path_matches_oracle_edges_and_weights() {
        for seed in 0..5 {
            let fs = random_features(60, 8, seed, Metric::Euclidean);
            let g = build_mutual_knn(&fs, 5, WeightScheme::NormalizedPsd).unwrap();
            let expected = oracle_mutual_edges(fs.matrix(), 5);
            let got: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j, _)| (i, j)).collect();
            assert_eq!(got, expected);
            let mut deg = vec![0usize; 60];
            for &(i, j) in &expected {
                deg[i] += 1;
                deg[j] += 1;
            }
            for (i, j, w) in g.edges() {
                let want = 1.0 / ((deg[i] * deg[j]) as f64).sqrt();
                assert!((w - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reciprocal_scheme_uses_max_degree() {
        let fs = random_features(40, 4, 9, Metric::Euclidean);
        let g = build_mutual_knn(&fs, 4, WeightScheme::ReciprocalMutualCount).unwrap();
        let mut deg = vec![0usize; 40];
        for &(i, j, _) in &g.edges() {
            deg[i] += 1;
            deg[j] += 1;
        }
        for (i, j, w) in g.edges() {
            assert!((w - 1.0 / deg[i].max(deg[j]) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn bucketed_path_is_exact() {
        for seed in 0..4 {
            let fs = random_features(160, 6, 100 + seed, Metric::Euclidean);
            assert!(fs.len() >= BRUTE_FORCE_CUTOFF);
            let fast = knn_lists(&fs.prepared(), 7);
            let slow = oracle_knn(&fs.prepared(), 7);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn bucketed_path_is_exact_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        // 140 points drawn from only 30 distinct locations: heavy ties.
        let pool: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for _ in 0..140 {
            data.extend_from_slice(&pool[rng.gen_range(0..30)]);
        }
        let points = DenseMatrix::from_vec(140, 4, data).unwrap();
        assert_eq!(knn_lists(&points, 6), oracle_knn(&points, 6));
    }

    #[test]
    fn cosine_metric_matches_normalized_oracle() {
        let fs = random_features(50, 5, 11, Metric::Cosine);
        let g = build_mutual_knn(&fs, 4, WeightScheme::NormalizedPsd).unwrap();
        let expected = oracle_mutual_edges(&fs.prepared(), 4);
        let got: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn degree_never_exceeds_k() {
        let fs = random_features(80, 3, 13, Metric::Euclidean);
        for k in [1, 3, 7] {
            let g = build_mutual_knn(&fs, k, WeightScheme::NormalizedPsd).unwrap();
            for i in 0..80 {
                assert!(g.degree(i) <= k);
            }
        }
    }

    #[test]
    fn smooth_empty_graph_is_zero() {
        let g = MutualKnnGraph::empty(3);
        let p = DenseMatrix::from_vec(3, 2, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let out = laplacian_smooth(&g, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_single_edge_swaps_rows() {
        let fs = FeatureSet::new(
            DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap(),
            Metric::Euclidean,
        )
        .unwrap();
        let g = build_mutual_knn(&fs, 1, WeightScheme::NormalizedPsd).unwrap();
        let p = DenseMatrix::from_vec(2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let out = laplacian_smooth(&g, &p).unwrap();
        assert_eq!(out.row(0), &[0.3, 0.7]);
        assert_eq!(out.row(1), &[0.9, 0.1]);
    }

    #[test]
    fn smooth_matches_dense_matmul_oracle() {
        let fs = random_features(30, 4, 17, Metric::Euclidean);
        for mode in [GraphMode::Experiment, GraphMode::Theory] {
            let g = build_mutual_knn_mode(&fs, 4, WeightScheme::NormalizedPsd, mode).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(18);
            let p = DenseMatrix::from_vec(30, 3, (0..90).map(|_| rng.gen::<f64>()).collect())
                .unwrap();
            let fast = laplacian_smooth(&g, &p).unwrap();
            let dense = g.to_dense().matmul(&p).unwrap();
            assert!(fast.max_abs_diff(&dense).unwrap() < 1e-12);
        }
    }

    #[test]
    fn smooth_rejects_row_mismatch() {
        let g = MutualKnnGraph::empty(3);
        let p = DenseMatrix::zeros(4, 2);
        assert!(matches!(laplacian_smooth(&g, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn theory_mode_graphs_are_psd() {
        for seed in 0..20 {
            let fs = random_features(24, 5, 200 + seed, Metric::Euclidean);
            let g = build_mutual_knn_mode(&fs, 3, WeightScheme::NormalizedPsd, GraphMode::Theory)
                .unwrap();
            assert_eq!(g.self_weight(), 1.0);
            assert!(check_psd(&g).unwrap(), "seed {seed} graph not PSD");
        }
    }

    #[test]
    fn edgeless_theory_graph_is_psd_and_large_graphs_are_refused() {
        let mut g = MutualKnnGraph::empty(4);
        g.self_weight = 1.0;
        g.mode = GraphMode::Theory;
        assert!(check_psd(&g).unwrap());
        let big = MutualKnnGraph::empty(600);
        assert!(matches!(check_psd(&big), Err(Error::Range(_))));
    }

    #[test]
    fn csv_dump_is_stable() {
        let fs = FeatureSet::new(
            DenseMatrix::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap(),
            Metric::Euclidean,
        )
        .unwrap();
        let g = build_mutual_knn(&fs, 1, WeightScheme::NormalizedPsd).unwrap();
        assert_eq!(g.to_csv_string(), "i,j,w\n0,1,1\n");
        assert_eq!(
            g.header_json(),
            "{\"n\":3,\"k\":1,\"scheme\":\"normalized_psd\",\"mode\":\"experiment\",\"self_weight\":0,\"edge_count\":1}"
        );
    }
}
