//! Procedural meshes and graphs for examples, tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geodesic::WeightedGraph;
use crate::mesh::TriMesh;
use crate::scalar::{Real, Vec3};

fn v3<T: Real>(x: f64, y: f64, z: f64) -> Vec3<T> {
    [T::lit(x), T::lit(y), T::lit(z)]
}

/// Regular tetrahedron with unit edges.
pub fn tetrahedron<T: Real>() -> TriMesh<T> {
    let h = 0.5f64.sqrt() / 2.0;
    TriMesh::new(
        vec![
            v3(0.5, 0.0, -h),
            v3(-0.5, 0.0, -h),
            v3(0.0, 0.5, h),
            v3(0.0, -0.5, h),
        ],
        vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
    )
    .expect("valid tetrahedron")
}

/// `nx` by `ny` vertex grid with unit spacing. Interior vertices are displaced
/// by up to `jitter` (in spacing units) in x/y and get a small z wobble, so
/// edge lengths are generic (no distance ties).
pub fn perturbed_grid<T: Real>(nx: usize, ny: usize, jitter: f64, seed: u64) -> TriMesh<T> {
    assert!(nx >= 2 && ny >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut dx = 0.0;
            let mut dy = 0.0;
            let dz = if jitter > 0.0 {
                rng.gen_range(-jitter..jitter) * 0.5
            } else {
                0.0
            };
            if jitter > 0.0 && i > 0 && j > 0 && i + 1 < nx && j + 1 < ny {
                dx = rng.gen_range(-jitter..jitter) * 0.5;
                dy = rng.gen_range(-jitter..jitter) * 0.5;
            }
            vertices.push(v3(i as f64 + dx, j as f64 + dy, dz));
        }
    }
    let mut faces = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let (b, c, d) = (a + 1, a + nx, a + nx + 1);
            if (i + j) % 2 == 0 {
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            } else {
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
    }
    TriMesh::new(vertices, faces).expect("valid grid")
}

/// UV sphere: two poles plus `rings` latitude circles of `segments` vertices.
pub fn uv_sphere<T: Real>(rings: usize, segments: usize, radius: f64) -> TriMesh<T> {
    assert!(rings >= 1 && segments >= 3);
    let mut vertices = vec![v3(0.0, 0.0, radius)];
    for r in 0..rings {
        let theta = std::f64::consts::PI * (r + 1) as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(v3(
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ));
        }
    }
    let south = vertices.len();
    vertices.push(v3(0.0, 0.0, -radius));
    let ring = |r: usize, s: usize| 1 + r * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s), ring(0, s + 1)]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            faces.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            faces.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    for s in 0..segments {
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    TriMesh::new(vertices, faces).expect("valid sphere")
}

/// Closed cylinder along z, centered at the origin: `rings` circles of
/// `segments` vertices plus one cap vertex at each end. Alternate rings are
/// rotated by half a segment.
pub fn capped_cylinder<T: Real>(rings: usize, segments: usize, radius: f64, height: f64) -> TriMesh<T> {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices = Vec::with_capacity(rings * segments + 2);
    for r in 0..rings {
        let z = -0.5 * height + height * r as f64 / (rings - 1) as f64;
        let offset = if r % 2 == 0 { 0.0 } else { 0.5 };
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * (s as f64 + offset) / segments as f64;
            vertices.push(v3(radius * phi.cos(), radius * phi.sin(), z));
        }
    }
    let bottom = vertices.len();
    vertices.push(v3(0.0, 0.0, -0.5 * height));
    let top = vertices.len();
    vertices.push(v3(0.0, 0.0, 0.5 * height));
    let idx = |r: usize, s: usize| r * segments + s % segments;
    let mut faces = Vec::new();
    for r in 0..rings - 1 {
        for s in 0..segments {
            if r % 2 == 0 {
                faces.push([idx(r, s), idx(r, s + 1), idx(r + 1, s)]);
                faces.push([idx(r, s + 1), idx(r + 1, s + 1), idx(r + 1, s)]);
            } else {
                faces.push([idx(r, s), idx(r + 1, s + 1), idx(r + 1, s)]);
                faces.push([idx(r, s), idx(r, s + 1), idx(r + 1, s + 1)]);
            }
        }
    }
    for s in 0..segments {
        faces.push([bottom, idx(0, s + 1), idx(0, s)]);
        faces.push([top, idx(rings - 1, s), idx(rings - 1, s + 1)]);
    }
    TriMesh::new(vertices, faces).expect("valid cylinder")
}

/// Bends a z-aligned shape of the given `length` into a circular arc of total
/// angle `angle` (radians) in the x-z plane. The central axis is mapped
/// isometrically; the mid-plane `z = 0` is fixed.
pub fn bend_z<T: Real>(mesh: &TriMesh<T>, length: f64, angle: f64) -> TriMesh<T> {
    if angle == 0.0 {
        return mesh.clone();
    }
    let radius = length / angle;
    mesh.map_vertices(|p| {
        let (x, y, z) = (p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy());
        let phi = z / radius;
        let r = radius - x;
        v3(radius - r * phi.cos(), y, r * phi.sin())
    })
    .expect("bending preserves connectivity")
}

/// Random connected graph: a random spanning tree plus `extra` random edges,
/// weights uniform in `[0.5, 2)`.
pub fn random_connected_graph<T: Real>(nodes: usize, extra: usize, seed: u64) -> WeightedGraph<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for v in 1..nodes {
        let parent = rng.gen_range(0..v);
        edges.push((parent, v, T::lit(rng.gen_range(0.5..2.0))));
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..nodes);
        let b = rng.gen_range(0..nodes);
        if a != b {
            edges.push((a, b, T::lit(rng.gen_range(0.5..2.0))));
        }
    }
    WeightedGraph::from_edges(nodes, &edges)
}

/// Random perturbed grid mesh with at most `max_vertices` vertices.
pub fn random_mesh<T: Real>(max_vertices: usize, seed: u64) -> TriMesh<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let side = (max_vertices as f64).sqrt() as usize;
    let nx = rng.gen_range(2..=side.max(2));
    let ny = rng.gen_range(2..=(max_vertices / nx).max(2));
    perturbed_grid(nx, ny, 0.4, seed)
}
