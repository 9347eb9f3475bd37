//! k-NN graphs, least-squares normals and normal-similarity edge weights.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighbourhood size used when none is configured.
pub const DEFAULT_K_NN: usize = 16;

/// Relative eigenvalue threshold below which a neighbourhood counts as
/// rank-deficient (coincident or collinear points).
const RANK_TOL: f64 = 1e-10;

/// Normal assigned to degenerate neighbourhoods.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud must contain at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "point cloud" });
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    /// Centers the cloud at its centroid and scales it into the unit sphere.
    pub fn normalized(&self) -> PointCloud {
        let c = self.centroid();
        let centered: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let radius = centered
            .iter()
            .map(|p| norm(p))
            .fold(0.0, f64::max);
        let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        PointCloud {
            points: centered.iter().map(|p| p.map(|v| v * s)).collect(),
        }
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Unit normals, one per point.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub normals: Vec<[f64; 3]>,
}

/// Per-point neighbour lists. Row `i` holds `i` itself first, then its
/// `k_nn` nearest other points.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    k_nn: usize,
    indices: Vec<usize>,
    raw_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.indices.len() / self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn k_nn(&self) -> usize {
        self.k_nn
    }

    /// Entries per row, including the point itself.
    pub fn row_len(&self) -> usize {
        self.k_nn + 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        let k = self.row_len();
        &self.indices[i * k..(i + 1) * k]
    }

    pub fn raw_weights(&self, i: usize) -> &[f64] {
        let k = self.row_len();
        &self.raw_weights[i * k..(i + 1) * k]
    }

    /// Row-normalized edge weights; empty until [`edge_weights`] has run.
    pub fn weights(&self, i: usize) -> &[f64] {
        let k = self.row_len();
        &self.weights[i * k..(i + 1) * k]
    }

    pub fn has_weights(&self) -> bool {
        self.weights.len() == self.indices.len()
    }

    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn flat_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Graph whose rows carry arbitrary normalized weights. Intended for
    /// tests and for callers that compute their own smoothing weights.
    pub fn with_weights(indices: Vec<usize>, weights: Vec<f64>, k_nn: usize) -> Result<Self> {
        if indices.len() != weights.len() || indices.len() % (k_nn + 1) != 0 {
            return Err(Error::shape("knn graph", &[indices.len()], &[weights.len(), k_nn + 1]));
        }
        Ok(KnnGraph {
            k_nn,
            raw_weights: weights.clone(),
            indices,
            weights,
        })
    }
}

/// Exact neighbour search; distance ties go to the lower index.
pub fn build_knn(cloud: &PointCloud, k_nn: usize) -> Result<KnnGraph> {
    let m = cloud.len();
    if k_nn == 0 || k_nn >= m {
        return Err(Error::Parameter(format!(
            "k_nn must satisfy 1 <= k_nn < m, got k_nn={k_nn}, m={m}"
        )));
    }
    let pts = cloud.points();
    let mut indices = Vec::with_capacity(m * (k_nn + 1));
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        cand.clear();
        cand.extend((0..m).filter(|&j| j != i).map(|j| (dist2(&pts[i], &pts[j]), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k_nn - 1, cmp);
        cand[..k_nn].sort_by(cmp);
        indices.push(i);
        indices.extend(cand[..k_nn].iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph {
        k_nn,
        indices,
        raw_weights: Vec::new(),
        weights: Vec::new(),
    })
}

/// Least-squares plane normal of each point's neighbourhood: the
/// eigenvector of the neighbour covariance with the smallest eigenvalue,
/// signed so that its largest-magnitude component is positive.
pub fn estimate_normals(cloud: &PointCloud, graph: &KnnGraph) -> Result<NormalField> {
    if graph.len() != cloud.len() {
        return Err(Error::Contract(format!(
            "graph has {} rows but cloud has {} points",
            graph.len(),
            cloud.len()
        )));
    }
    let pts = cloud.points();
    let normals = (0..cloud.len())
        .map(|i| plane_normal(graph.neighbors(i).iter().map(|&j| &pts[j])))
        .collect();
    Ok(NormalField { normals })
}

fn plane_normal<'a>(neigh: impl Iterator<Item = &'a [f64; 3]> + Clone) -> [f64; 3] {
    let n = neigh.clone().count() as f64;
    let mut mean = Vector3::zeros();
    for p in neigh.clone() {
        mean += Vector3::from(*p);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in neigh {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if largest <= 0.0 || middle <= RANK_TOL * largest {
        return FALLBACK_NORMAL;
    }
    let v = eig.eigenvectors.column(order[0]).normalize();
    let mut out = [v[0], v[1], v[2]];
    orient(&mut out);
    out
}

/// Flips `n` so its largest-magnitude component (first on ties) is positive.
pub fn orient(n: &mut [f64; 3]) {
    let mut k = 0;
    for j in 1..3 {
        if n[j].abs() > n[k].abs() {
            k = j;
        }
    }
    if n[k] < 0.0 {
        for v in n.iter_mut() {
            *v = -*v;
        }
    }
}

/// Fills in `a_ij = |cos(n_i, n_j)|` and the row-normalized weights.
pub fn edge_weights(normals: &NormalField, graph: &KnnGraph) -> Result<KnnGraph> {
    if normals.normals.len() != graph.len() {
        return Err(Error::Contract(format!(
            "{} normals for a graph over {} points",
            normals.normals.len(),
            graph.len()
        )));
    }
    let k = graph.row_len();
    let mut raw = Vec::with_capacity(graph.indices.len());
    let mut weights = Vec::with_capacity(graph.indices.len());
    for i in 0..graph.len() {
        let ni = &normals.normals[i];
        let start = raw.len();
        for &j in graph.neighbors(i) {
            let nj = &normals.normals[j];
            let cos = (ni[0] * nj[0] + ni[1] * nj[1] + ni[2] * nj[2]) / (norm(ni) * norm(nj));
            raw.push(cos.abs().min(1.0));
        }
        let total: f64 = raw[start..start + k].iter().sum();
        weights.extend(raw[start..start + k].iter().map(|a| a / total));
    }
    Ok(KnnGraph {
        k_nn: graph.k_nn,
        indices: graph.indices.clone(),
        raw_weights: raw,
        weights,
    })
}

/// Full pipeline: normalize, neighbours, normals, weights. `k_nn` is
/// capped at `m - 1` for clouds smaller than the neighbourhood.
pub fn prepare(cloud: &PointCloud, k_nn: usize) -> Result<(PointCloud, NormalField, KnnGraph)> {
    let cloud = cloud.normalized();
    let k = k_nn.min(cloud.len().saturating_sub(1));
    let graph = build_knn(&cloud, k)?;
    let normals = estimate_normals(&cloud, &graph)?;
    let graph = edge_weights(&normals, &graph)?;
    Ok((cloud, normals, graph))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn collinear_neighbors_by_inspection() {
        let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let g = build_knn(&c, 1).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[1, 0]);
        assert_eq!(g.neighbors(2), &[2, 1]);
    }

    #[test]
    fn duplicates_are_taken_in_index_order() {
        let p = [0.5, 0.5, 0.5];
        let c = cloud(vec![p, [9.0, 9.0, 9.0], p, p, [0.5, 0.5, 0.6]]);
        let g = build_knn(&c, 3).unwrap();
        assert_eq!(g.neighbors(0), &[0, 2, 3, 4]);
        assert_eq!(g.neighbors(3), &[3, 0, 2, 4]);
    }

    #[test]
    fn k_nn_must_be_below_point_count() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(build_knn(&c, 2), Err(Error::Parameter(_))));
        assert!(matches!(build_knn(&c, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn flat_plane_normals() {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pts.push([i as f64 * 0.3, j as f64 * 0.2 + 0.01 * i as f64, 0.0]);
            }
        }
        let c = cloud(pts);
        let g = build_knn(&c, 8).unwrap();
        let n = estimate_normals(&c, &g).unwrap();
        for v in &n.normals {
            assert_eq!(*v, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn tilted_plane_normals() {
        let mut pts = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                let x = i as f64 * 0.25;
                let y = j as f64 * 0.15 - 0.02 * i as f64;
                pts.push([x, y, 1.0 - x - y]);
            }
        }
        let c = cloud(pts);
        let g = build_knn(&c, 10).unwrap();
        let n = estimate_normals(&c, &g).unwrap();
        let e = 1.0 / 3f64.sqrt();
        for v in &n.normals {
            for k in 0..3 {
                assert!((v[k] - e).abs() < 1e-9, "{v:?}");
            }
        }
    }

    #[test]
    fn degenerate_neighborhoods_fall_back() {
        let c = cloud((0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect());
        let g = build_knn(&c, 3).unwrap();
        let n = estimate_normals(&c, &g).unwrap();
        assert!(n.normals.iter().all(|v| *v == FALLBACK_NORMAL));
        let c = cloud(vec![[1.0; 3]; 4]);
        let g = build_knn(&c, 2).unwrap();
        let n = estimate_normals(&c, &g).unwrap();
        assert!(n.normals.iter().all(|v| *v == FALLBACK_NORMAL));
    }

    #[test]
    fn absolute_cosine_weights() {
        let normals = NormalField {
            normals: vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.6, 0.0, 0.8]],
        };
        let g = KnnGraph {
            k_nn: 3,
            indices: vec![0, 1, 2, 3, 1, 0, 2, 3, 2, 0, 1, 3, 3, 0, 1, 2],
            raw_weights: vec![],
            weights: vec![],
        };
        let g = edge_weights(&normals, &g).unwrap();
        assert_eq!(g.raw_weights(0), &[1.0, 1.0, 0.0, 0.8]);
        let w = g.weights(0);
        assert!((w[0] - 1.0 / 2.8).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(g.raw_weights(i)[0], 1.0);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let c = cloud(vec![[1.0, 2.0, 3.0], [4.0, -1.0, 0.5], [2.0, 2.0, 2.0], [0.0, 7.0, 1.0]]);
        let a = c.normalized();
        let b = a.normalized();
        for (p, q) in a.points().iter().zip(b.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() <= 1e-12);
            }
        }
        let r = a.points().iter().map(norm).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-15);
    }
}
