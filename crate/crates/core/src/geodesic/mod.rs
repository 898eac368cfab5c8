//! Edge-graph geodesics: Dijkstra distance maps, geodesic Voronoi labelling,
//! center-restricted distance matrices and diameter estimates.
//!
//! Distances are shortest paths on the mesh edge graph with Euclidean edge
//! weights.

mod cache;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::TriMesh;
use crate::scalar::Real;

pub use cache::{center_hash, load_matrix, mesh_fingerprint, store_matrix};

#[derive(Debug, Error)]
pub enum GeodesicError {
    #[error("vertex {vertex} out of range ({count} vertices)")]
    SourceOutOfRange { vertex: usize, count: usize },
    #[error("vertex {vertex} is unreachable from {from}; the graph is disconnected")]
    Unreachable { from: usize, vertex: usize },
    #[error("center list is empty")]
    NoCenters,
    #[error("cache file not found: {0}")]
    CacheNotFound(std::path::PathBuf),
    #[error("cache file {path} is invalid: {reason}")]
    CacheCorrupt {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error("cache file {path} was built for a different mesh or center set ({reason})")]
    CacheMismatch {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Weighted undirected graph view used by the shortest-path routines.
pub trait EdgeGraph<T> {
    fn num_nodes(&self) -> usize;
    fn edges_of(&self, v: usize) -> &[(usize, T)];
}

impl<T: Real> EdgeGraph<T> for TriMesh<T> {
    fn num_nodes(&self) -> usize {
        self.num_vertices()
    }

    fn edges_of(&self, v: usize) -> &[(usize, T)] {
        self.neighbors(v)
    }
}

/// Plain adjacency-list graph, handy for tests and non-mesh inputs.
#[derive(Debug, Clone)]
pub struct WeightedGraph<T> {
    adjacency: Vec<Vec<(usize, T)>>,
}

impl<T: Real> WeightedGraph<T> {
    pub fn from_edges(nodes: usize, edges: &[(usize, usize, T)]) -> Self {
        let mut adjacency = vec![Vec::new(); nodes];
        for &(a, b, w) in edges {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        Self { adjacency }
    }

    /// Path `0 - 1 - ... - (n-1)` with unit edges.
    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, T::one())).collect();
        Self::from_edges(n, &edges)
    }
}

impl<T: Real> EdgeGraph<T> for WeightedGraph<T> {
    fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    fn edges_of(&self, v: usize) -> &[(usize, T)] {
        &self.adjacency[v]
    }
}

/// Distances from one source vertex to every vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap<T> {
    pub source: usize,
    pub dist: Vec<T>,
}

impl<T: Real> DistanceMap<T> {
    pub fn max_distance(&self) -> T {
        self.dist.iter().copied().fold(T::zero(), T::max)
    }
}

/// Heap entry ordered so that `BinaryHeap` pops the smallest key first.
struct Entry<T> {
    dist: T,
    label: usize,
    vertex: usize,
}

impl<T: Real> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Entry<T> {}

impl<T: Real> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.label.cmp(&self.label))
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

fn check_source<T, G: EdgeGraph<T>>(g: &G, source: usize) -> Result<(), GeodesicError> {
    if source >= g.num_nodes() {
        return Err(GeodesicError::SourceOutOfRange {
            vertex: source,
            count: g.num_nodes(),
        });
    }
    Ok(())
}

/// Exact shortest-path distances from `source` (binary-heap Dijkstra).
pub fn single_source<T: Real, G: EdgeGraph<T>>(
    g: &G,
    source: usize,
) -> Result<DistanceMap<T>, GeodesicError> {
    check_source(g, source)?;
    let dist = dijkstra(g, source, T::infinity(), |_, _| false);
    if let Some(vertex) = dist.iter().position(|d| !d.is_finite()) {
        return Err(GeodesicError::Unreachable { from: source, vertex });
    }
    Ok(DistanceMap { source, dist })
}

/// Vertices within `cutoff` of `source`, with their distances, in settle order.
pub fn within_radius<T: Real, G: EdgeGraph<T>>(
    g: &G,
    source: usize,
    cutoff: T,
) -> Result<Vec<(usize, T)>, GeodesicError> {
    check_source(g, source)?;
    let mut settled = Vec::new();
    dijkstra(g, source, cutoff, |v, d| {
        settled.push((v, d));
        false
    });
    Ok(settled)
}

/// Distances from `source` to each vertex of `targets`; stops as soon as all
/// targets are settled.
pub fn distances_to<T: Real, G: EdgeGraph<T>>(
    g: &G,
    source: usize,
    targets: &[usize],
) -> Result<Vec<T>, GeodesicError> {
    check_source(g, source)?;
    let n = g.num_nodes();
    let mut wanted = vec![false; n];
    let mut remaining = 0;
    for &t in targets {
        check_source(g, t)?;
        if !wanted[t] {
            wanted[t] = true;
            remaining += 1;
        }
    }
    let dist = dijkstra(g, source, T::infinity(), |v, _| {
        if wanted[v] {
            remaining -= 1;
        }
        remaining == 0
    });
    targets
        .iter()
        .map(|&t| {
            if dist[t].is_finite() {
                Ok(dist[t])
            } else {
                Err(GeodesicError::Unreachable {
                    from: source,
                    vertex: t,
                })
            }
        })
        .collect()
}

/// Core Dijkstra. `on_settle(v, d)` is called once per settled vertex and may
/// request early termination by returning `true`.
fn dijkstra<T: Real, G: EdgeGraph<T>>(
    g: &G,
    source: usize,
    cutoff: T,
    mut on_settle: impl FnMut(usize, T) -> bool,
) -> Vec<T> {
    let n = g.num_nodes();
    let mut dist = vec![T::infinity(); n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = T::zero();
    heap.push(Entry {
        dist: T::zero(),
        label: 0,
        vertex: source,
    });
    while let Some(Entry { dist: d, vertex, .. }) = heap.pop() {
        if done[vertex] || d > dist[vertex] {
            continue;
        }
        if d > cutoff {
            break;
        }
        done[vertex] = true;
        if on_settle(vertex, d) {
            break;
        }
        for &(w, len) in g.edges_of(vertex) {
            let nd = d + len;
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(Entry {
                    dist: nd,
                    label: 0,
                    vertex: w,
                });
            }
        }
    }
    dist
}

/// Geodesic Voronoi labelling: each vertex gets the index (into `centers`) of
/// its nearest center, ties going to the lowest center index, plus the
/// distance to that center.
pub fn voronoi<T: Real, G: EdgeGraph<T>>(
    g: &G,
    centers: &[usize],
) -> Result<(Vec<usize>, Vec<T>), GeodesicError> {
    if centers.is_empty() {
        return Err(GeodesicError::NoCenters);
    }
    let n = g.num_nodes();
    let mut dist = vec![T::infinity(); n];
    let mut label = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    for (i, &c) in centers.iter().enumerate() {
        check_source(g, c)?;
        // A vertex listed twice keeps its first (lowest) label.
        if label[c] == usize::MAX {
            dist[c] = T::zero();
            label[c] = i;
            heap.push(Entry {
                dist: T::zero(),
                label: i,
                vertex: c,
            });
        }
    }
    // Lexicographic (distance, label) relaxation.
    while let Some(Entry {
        dist: d,
        label: l,
        vertex,
    }) = heap.pop()
    {
        if done[vertex] || d > dist[vertex] || (d == dist[vertex] && l != label[vertex]) {
            continue;
        }
        done[vertex] = true;
        for &(w, len) in g.edges_of(vertex) {
            let nd = d + len;
            if nd < dist[w] || (nd == dist[w] && l < label[w]) {
                dist[w] = nd;
                label[w] = l;
                heap.push(Entry {
                    dist: nd,
                    label: l,
                    vertex: w,
                });
            }
        }
    }
    if let Some(vertex) = label.iter().position(|&l| l == usize::MAX) {
        return Err(GeodesicError::Unreachable {
            from: centers[0],
            vertex,
        });
    }
    Ok((label, dist))
}

/// Lower bound on the graph diameter: the largest distance seen from
/// `samples` farthest-point-sampled sources (starting at vertex 0). Exact when
/// `samples >= |V|`.
pub fn geodesic_diameter<T: Real, G: EdgeGraph<T>>(g: &G, samples: usize) -> Result<T, GeodesicError> {
    let n = g.num_nodes();
    let samples = samples.clamp(1, n);
    let mut cover = vec![T::infinity(); n];
    let mut diameter = T::zero();
    let mut source = 0;
    for _ in 0..samples {
        let map = single_source(g, source)?;
        diameter = diameter.max(map.max_distance());
        for (c, &d) in cover.iter_mut().zip(&map.dist) {
            *c = c.min(d);
        }
        source = argmax(&cover);
    }
    Ok(diameter)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate() {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// Normalization applied to geodesic distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the square root of the surface area.
    #[default]
    SqrtArea,
    /// Divide by the (sampled) geodesic diameter.
    #[serde(alias = "diameter")]
    GeodesicDiameter,
    None,
}

impl Normalization {
    pub fn tag(self) -> u8 {
        match self {
            Self::SqrtArea => 0,
            Self::GeodesicDiameter => 1,
            Self::None => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::SqrtArea),
            1 => Some(Self::GeodesicDiameter),
            2 => Some(Self::None),
            _ => None,
        }
    }
}

/// Default number of sources for diameter estimation.
pub const DIAMETER_SAMPLES: usize = 32;

/// The divisor applied under `normalization`.
pub fn normalization_factor<T: Real>(
    mesh: &TriMesh<T>,
    normalization: Normalization,
) -> Result<T, GeodesicError> {
    Ok(match normalization {
        Normalization::SqrtArea => mesh.surface_area().sqrt(),
        Normalization::GeodesicDiameter => geodesic_diameter(mesh, DIAMETER_SAMPLES)?,
        Normalization::None => T::one(),
    })
}

/// Dense matrix of geodesic distances between two vertex sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T> {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Array2<T>,
    pub normalization: Normalization,
}

/// Pairwise distances between `centers`, divided by the normalization factor.
/// The result is exactly symmetric with a zero diagonal.
pub fn center_matrix<T: Real>(
    mesh: &TriMesh<T>,
    centers: &[usize],
    normalization: Normalization,
) -> Result<DistanceMatrix<T>, GeodesicError> {
    if centers.is_empty() {
        return Err(GeodesicError::NoCenters);
    }
    let factor = normalization_factor(mesh, normalization)?;
    let k = centers.len();
    let mut values = Array2::zeros((k, k));
    for (i, &c) in centers.iter().enumerate() {
        let map = single_source(mesh, c)?;
        for j in (i + 1)..k {
            let d = map.dist[centers[j]] / factor;
            values[[i, j]] = d;
            values[[j, i]] = d;
        }
    }
    Ok(DistanceMatrix {
        rows: centers.to_vec(),
        cols: centers.to_vec(),
        values,
        normalization,
    })
}

/// All-pairs distances (one Dijkstra per vertex), unnormalized.
pub fn all_pairs<T: Real, G: EdgeGraph<T>>(g: &G) -> Result<Array2<T>, GeodesicError> {
    let n = g.num_nodes();
    let mut out = Array2::zeros((n, n));
    for s in 0..n {
        let map = single_source(g, s)?;
        out.row_mut(s)
            .iter_mut()
            .zip(&map.dist)
            .for_each(|(o, &d)| *o = d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    /// Bellman-Ford relaxation to a fixed point.
    fn bellman_ford<G: EdgeGraph<f64>>(g: &G, source: usize) -> Vec<f64> {
        let n = g.num_nodes();
        let mut d = vec![f64::INFINITY; n];
        d[source] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for v in 0..n {
                for &(w, len) in g.edges_of(v) {
                    if d[v] + len < d[w] {
                        d[w] = d[v] + len;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        d
    }

    #[test]
    fn path_graph_distances() {
        let g = WeightedGraph::<f64>::path(5);
        assert_eq!(single_source(&g, 0).unwrap().dist, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tetrahedron_distances() {
        let m = synthetic::tetrahedron::<f64>();
        for s in 0..4 {
            let d = single_source(&m, s).unwrap().dist;
            for (v, &x) in d.iter().enumerate() {
                let expect = if v == s { 0.0 } else { 1.0 };
                assert!((x - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_matches_bellman_ford() {
        let m = synthetic::perturbed_grid::<f64>(10, 10, 0.3, 7);
        for s in [0, 17, 55, 99] {
            assert_eq!(single_source(&m, s).unwrap().dist, bellman_ford(&m, s));
        }
    }

    #[test]
    fn out_of_range_and_unreachable() {
        let g = WeightedGraph::<f64>::from_edges(3, &[(0, 1, 1.0)]);
        assert!(matches!(
            single_source(&g, 5),
            Err(GeodesicError::SourceOutOfRange { .. })
        ));
        assert!(matches!(
            single_source(&g, 0),
            Err(GeodesicError::Unreachable { vertex: 2, .. })
        ));
    }

    #[test]
    fn one_center_is_zero_matrix() {
        let m = synthetic::tetrahedron::<f64>();
        let d = center_matrix(&m, &[2], Normalization::SqrtArea).unwrap();
        assert_eq!(d.values, Array2::<f64>::zeros((1, 1)));
    }

    #[test]
    fn center_matrix_matches_single_source() {
        let m = synthetic::perturbed_grid::<f64>(6, 5, 0.2, 3);
        let centers = [0, 13, 29];
        let d = center_matrix(&m, &centers, Normalization::None).unwrap();
        for (i, &a) in centers.iter().enumerate() {
            let map = single_source(&m, a).unwrap();
            for (j, &b) in centers.iter().enumerate() {
                assert!((d.values[[i, j]] - map.dist[b]).abs() < 1e-12);
                assert_eq!(d.values[[i, j]], d.values[[j, i]]);
            }
        }
    }

    #[test]
    fn sqrt_area_normalization_is_scale_invariant() {
        let m = synthetic::perturbed_grid::<f64>(7, 6, 0.25, 11);
        let big = m.map_vertices(|p| [p[0] * 3.5, p[1] * 3.5, p[2] * 3.5]).unwrap();
        let c = [1, 20, 33, 41];
        let a = center_matrix(&m, &c, Normalization::SqrtArea).unwrap();
        let b = center_matrix(&big, &c, Normalization::SqrtArea).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn diameter_examples() {
        let g = WeightedGraph::<f64>::path(5);
        assert_eq!(geodesic_diameter(&g, 5).unwrap(), 4.0);
        let m = synthetic::tetrahedron::<f64>();
        assert!((geodesic_diameter(&m, 32).unwrap() - 1.0).abs() < 1e-12);

        let grid = synthetic::perturbed_grid::<f64>(8, 7, 0.3, 5);
        let all = all_pairs(&grid).unwrap();
        let max = all.iter().copied().fold(0.0, f64::max);
        assert_eq!(geodesic_diameter(&grid, grid.num_vertices()).unwrap(), max);
        assert!(geodesic_diameter(&grid, 2).unwrap() <= max);
    }

    #[test]
    fn voronoi_is_nearest_center() {
        let m = synthetic::perturbed_grid::<f64>(9, 9, 0.3, 2);
        let centers = [4, 40, 76, 80, 8];
        let (label, dist) = voronoi(&m, &centers).unwrap();
        let maps: Vec<_> = centers.iter().map(|&c| single_source(&m, c).unwrap()).collect();
        for v in 0..m.num_vertices() {
            let own = maps[label[v]].dist[v];
            assert!((own - dist[v]).abs() < 1e-12);
            for (i, map) in maps.iter().enumerate() {
                assert!(own <= map.dist[v] + 1e-12);
                if map.dist[v] == own {
                    assert!(label[v] <= i);
                }
            }
        }
    }

    #[test]
    fn radius_and_targets() {
        let g = WeightedGraph::<f64>::path(6);
        let within = within_radius(&g, 2, 1.5).unwrap();
        assert_eq!(within, vec![(2, 0.0), (1, 1.0), (3, 1.0)]);
        assert_eq!(distances_to(&g, 0, &[3, 1, 3]).unwrap(), vec![3.0, 1.0, 3.0]);
    }
}
