//! Triangle meshes: validation, derived geometry, file I/O and color coding.

mod color;
mod io;

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::scalar::{add3, cross3, norm3, scale3, sub3, Real, Vec3};

pub use color::{normal_coded_colors, normal_coded_colors_for_points, Rgb};
pub use io::{load_colored_ply, load_mesh, load_mesh_as, save_colored_mesh, save_mesh, MeshFormat};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {face} is degenerate: indices {indices:?} are not distinct")]
    DegenerateFace { face: usize, indices: [usize; 3] },
    #[error("mesh is disconnected: {components} edge-connected components")]
    Disconnected { components: usize },
    #[error("mesh has no vertices")]
    Empty,
    #[error("mean edge length is zero; all edges are collapsed")]
    ZeroEdgeLength,
    #[error("expected {expected} colors, got {got}")]
    ColorCount { expected: usize, got: usize },
    #[error("unsupported mesh format for {0}")]
    UnknownFormat(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Immutable, validated triangle mesh.
///
/// Vertex order is preserved exactly as given: correspondence files refer to
/// vertices by index.
#[derive(Debug, Clone)]
pub struct TriMesh<T> {
    vertices: Vec<Vec3<T>>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vec3<T>>,
    flagged_normals: Vec<usize>,
    surface_area: T,
    mean_edge_length: T,
    edges: Vec<[usize; 2]>,
    neighbors: Vec<Vec<(usize, T)>>,
    non_manifold_edges: usize,
}

impl<T: Real> TriMesh<T> {
    pub fn new(vertices: Vec<Vec3<T>>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let n = vertices.len();
        if n == 0 {
            return Err(MeshError::Empty);
        }
        for (f, tri) in faces.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange {
                    face: f,
                    index: bad,
                    count: n,
                });
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::DegenerateFace {
                    face: f,
                    indices: *tri,
                });
            }
        }

        // Undirected edges with their incident face count.
        let mut edge_faces: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for tri in &faces {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_faces.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        let non_manifold_edges = edge_faces.values().filter(|&&c| c > 2).count();
        if non_manifold_edges > 0 {
            log::warn!("mesh has {non_manifold_edges} non-manifold edges");
        }
        let edges: Vec<[usize; 2]> = edge_faces.into_keys().collect();

        let mut neighbors = vec![Vec::new(); n];
        let mut length_sum = T::zero();
        for &[a, b] in &edges {
            let len = norm3(sub3(vertices[a], vertices[b]));
            length_sum += len;
            neighbors[a].push((b, len));
            neighbors[b].push((a, len));
        }

        let components = count_components(&neighbors);
        if components > 1 {
            return Err(MeshError::Disconnected { components });
        }

        let mean_edge_length = if edges.is_empty() {
            T::zero()
        } else {
            length_sum / T::from_count(edges.len())
        };
        if !edges.is_empty() && mean_edge_length <= T::zero() {
            return Err(MeshError::ZeroEdgeLength);
        }

        let mut surface_area = T::zero();
        let mut accum = vec![[T::zero(); 3]; n];
        let half = T::lit(0.5);
        for tri in &faces {
            let [a, b, c] = *tri;
            // Twice-area-weighted face normal.
            let cr = cross3(sub3(vertices[b], vertices[a]), sub3(vertices[c], vertices[a]));
            surface_area += half * norm3(cr);
            for &v in tri {
                accum[v] = add3(accum[v], cr);
            }
        }
        let mut flagged_normals = Vec::new();
        let normals = accum
            .into_iter()
            .enumerate()
            .map(|(v, acc)| {
                let len = norm3(acc);
                if len > T::zero() && len.is_finite() {
                    scale3(acc, T::one() / len)
                } else {
                    flagged_normals.push(v);
                    [T::zero(), T::zero(), T::one()]
                }
            })
            .collect();

        Ok(Self {
            vertices,
            faces,
            normals,
            flagged_normals,
            surface_area,
            mean_edge_length,
            edges,
            neighbors,
            non_manifold_edges,
        })
    }

    pub fn vertices(&self) -> &[Vec3<T>] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Vec3<T> {
        self.vertices[v]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Unit vertex normals (area-weighted average of incident face normals).
    pub fn normals(&self) -> &[Vec3<T>] {
        &self.normals
    }

    /// Vertices whose star has zero area; their normal is the fixed +Z axis.
    pub fn flagged_normals(&self) -> &[usize] {
        &self.flagged_normals
    }

    pub fn surface_area(&self) -> T {
        self.surface_area
    }

    /// Mean length over undirected edges, each counted once.
    pub fn mean_edge_length(&self) -> T {
        self.mean_edge_length
    }

    /// Sorted undirected edges `[a, b]` with `a < b`.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Edge-graph neighbors with Euclidean edge lengths.
    pub fn neighbors(&self, v: usize) -> &[(usize, T)] {
        &self.neighbors[v]
    }

    pub fn non_manifold_edges(&self) -> usize {
        self.non_manifold_edges
    }

    pub fn bounding_box(&self) -> (Vec3<T>, Vec3<T>) {
        bounding_box(&self.vertices)
    }

    pub fn bounding_box_diagonal(&self) -> T {
        let (lo, hi) = self.bounding_box();
        norm3(sub3(hi, lo))
    }

    pub fn centroid(&self) -> Vec3<T> {
        let mut c = [T::zero(); 3];
        for &p in &self.vertices {
            c = add3(c, p);
        }
        scale3(c, T::one() / T::from_count(self.vertices.len()))
    }

    /// Same connectivity with every vertex mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(Vec3<T>) -> Vec3<T>) -> Result<Self, MeshError> {
        Self::new(self.vertices.iter().map(|&p| f(p)).collect(), self.faces.clone())
    }

    /// Same connectivity with replacement positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3<T>>) -> Result<Self, MeshError> {
        Self::new(vertices, self.faces.clone())
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> TriMesh<U> {
        let vertices = self
            .vertices
            .iter()
            .map(|p| p.map(|x| U::lit(x.to_f64_lossy())))
            .collect();
        TriMesh::new(vertices, self.faces.clone()).expect("validated connectivity")
    }
}

pub(crate) fn bounding_box<T: Real>(points: &[Vec3<T>]) -> (Vec3<T>, Vec3<T>) {
    let mut lo = [T::infinity(); 3];
    let mut hi = [T::neg_infinity(); 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn count_components<T>(neighbors: &[Vec<(usize, T)>]) -> usize {
    let n = neighbors.len();
    let mut seen = vec![false; n];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for &(w, _) in &neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    components
}

/// Area of a single triangle.
pub fn triangle_area<T: Real>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> T {
    T::lit(0.5) * norm3(cross3(sub3(b, a), sub3(c, a)))
}
