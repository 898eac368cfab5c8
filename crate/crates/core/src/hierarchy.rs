//! Multi-resolution surface patches.
//!
//! A single geodesic farthest-point-sampling run provides nested sample
//! prefixes; every coarse level takes the first `n_l` samples as centers and
//! their geodesic Voronoi cells as patches. Level 0 is the vertex level.
//! Patches of neighboring levels are not nested, so moving features between
//! levels always goes through the vertices (unpool, then max-pool).

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesic::{self, argmax, EdgeGraph, GeodesicError};
use crate::kernels::{gather_rows, segment_max};
use crate::mesh::TriMesh;
use crate::scalar::{Real, Vec3};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("sample target {target} exceeds vertex count {count}")]
    TargetTooLarge { target: usize, count: usize },
    #[error("sample targets must be nonempty and strictly ascending: {0:?}")]
    TargetsNotAscending(Vec<usize>),
    #[error("patch counts must be nonempty and strictly descending: {0:?}")]
    CountsNotDescending(Vec<usize>),
    #[error("level {level} patch {patch} is empty")]
    EmptyPatch { level: usize, patch: usize },
    #[error("level {level} does not exist (hierarchy has {levels} levels)")]
    NoSuchLevel { level: usize, levels: usize },
    #[error("expected {expected} rows, got {got}")]
    RowCount { expected: usize, got: usize },
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
}

/// Farthest point sampling output.
#[derive(Debug, Clone, PartialEq)]
pub struct FpsSamples<T> {
    /// Samples in selection order; the first `t` form the `t`-sample set.
    pub samples: Vec<usize>,
    /// The requested prefix lengths.
    pub prefixes: Vec<usize>,
    /// `covering_radius[k]`: max over vertices of the distance to the first
    /// `k + 1` samples.
    pub covering_radius: Vec<T>,
}

impl<T> FpsSamples<T> {
    pub fn prefix(&self, k: usize) -> &[usize] {
        &self.samples[..self.prefixes[k]]
    }
}

fn check_targets(targets: &[usize], count: usize) -> Result<(), HierarchyError> {
    if targets.is_empty() || targets.windows(2).any(|w| w[0] >= w[1]) || targets[0] == 0 {
        return Err(HierarchyError::TargetsNotAscending(targets.to_vec()));
    }
    let max = *targets.last().unwrap();
    if max > count {
        return Err(HierarchyError::TargetTooLarge { target: max, count });
    }
    Ok(())
}

/// Greedy geodesic FPS with a seeded random start vertex.
pub fn fps_sample<T: Real, G: EdgeGraph<T>>(
    g: &G,
    targets: &[usize],
    seed: u64,
) -> Result<FpsSamples<T>, HierarchyError> {
    check_targets(targets, g.num_nodes())?;
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..g.num_nodes());
    fps_from(g, start, targets)
}

/// Greedy geodesic FPS from a given start vertex. Each new sample is the
/// vertex farthest from the current set (lowest index on ties).
pub fn fps_from<T: Real, G: EdgeGraph<T>>(
    g: &G,
    start: usize,
    targets: &[usize],
) -> Result<FpsSamples<T>, HierarchyError> {
    let n = g.num_nodes();
    check_targets(targets, n)?;
    let total = *targets.last().unwrap();
    let mut cover = vec![T::infinity(); n];
    let mut chosen = vec![false; n];
    let mut samples = Vec::with_capacity(total);
    let mut covering_radius = Vec::with_capacity(total);
    let mut next = start;
    while samples.len() < total {
        samples.push(next);
        chosen[next] = true;
        let map = geodesic::single_source(g, next)?;
        for (c, &d) in cover.iter_mut().zip(&map.dist) {
            *c = c.min(d);
        }
        covering_radius.push(cover.iter().copied().fold(T::zero(), T::max));
        // Already-selected vertices are excluded so duplicate positions
        // (zero-length edges) cannot be picked twice.
        let masked: Vec<T> = cover
            .iter()
            .zip(&chosen)
            .map(|(&c, &done)| if done { T::neg_infinity() } else { c })
            .collect();
        next = argmax(&masked);
    }
    Ok(FpsSamples {
        samples,
        prefixes: targets.to_vec(),
        covering_radius,
    })
}

/// One resolution of the hierarchy.
#[derive(Debug, Clone)]
pub struct PatchLevel<T> {
    /// Patch id of every vertex.
    pub assignment: Vec<usize>,
    /// Center vertex of every patch.
    pub centers: Vec<usize>,
    pub center_positions: Vec<Vec3<T>>,
    /// Vertices of every patch, ascending.
    pub members: Vec<Vec<usize>>,
    /// Patches joined to each patch by at least one mesh edge, ascending.
    pub adjacency: Vec<Vec<usize>>,
    /// Mean geodesic distance of a patch's vertices to its center.
    pub patch_radius: Vec<T>,
    /// Geodesic distance of every vertex to its own patch center.
    pub center_distance: Vec<T>,
}

impl<T: Real> PatchLevel<T> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn vertex_level(mesh: &TriMesh<T>) -> Self {
        let n = mesh.num_vertices();
        let adjacency = (0..n)
            .map(|v| {
                let mut a: Vec<usize> = mesh.neighbors(v).iter().map(|&(w, _)| w).collect();
                a.sort_unstable();
                a.dedup();
                a
            })
            .collect();
        Self {
            assignment: (0..n).collect(),
            centers: (0..n).collect(),
            center_positions: mesh.vertices().to_vec(),
            members: (0..n).map(|v| vec![v]).collect(),
            adjacency,
            patch_radius: vec![T::zero(); n],
            center_distance: vec![T::zero(); n],
        }
    }

    fn from_centers(mesh: &TriMesh<T>, level: usize, centers: &[usize]) -> Result<Self, HierarchyError> {
        let (assignment, center_distance) = geodesic::voronoi(mesh, centers)?;
        let k = centers.len();
        let mut members = vec![Vec::new(); k];
        for (v, &p) in assignment.iter().enumerate() {
            members[p].push(v);
        }
        if let Some(patch) = members.iter().position(Vec::is_empty) {
            return Err(HierarchyError::EmptyPatch { level, patch });
        }
        let mut adjacency = vec![Vec::new(); k];
        for &[a, b] in mesh.edges() {
            let (pa, pb) = (assignment[a], assignment[b]);
            if pa != pb {
                adjacency[pa].push(pb);
                adjacency[pb].push(pa);
            }
        }
        for a in &mut adjacency {
            a.sort_unstable();
            a.dedup();
        }
        let patch_radius = members
            .iter()
            .map(|m| {
                let sum: T = m.iter().map(|&v| center_distance[v]).sum();
                sum / T::from_count(m.len())
            })
            .collect();
        Ok(Self {
            assignment,
            centers: centers.to_vec(),
            center_positions: centers.iter().map(|&c| mesh.vertex(c)).collect(),
            members,
            adjacency,
            patch_radius,
            center_distance,
        })
    }
}

/// Levels `0..=L`, finest first.
#[derive(Debug, Clone)]
pub struct PatchHierarchy<T> {
    levels: Vec<PatchLevel<T>>,
    samples: Vec<usize>,
    seed: u64,
}

/// Builds level 0 plus one Voronoi level per entry of `patch_counts`
/// (strictly descending, e.g. `[800, 200, 50]`).
pub fn build_hierarchy<T: Real>(
    mesh: &TriMesh<T>,
    patch_counts: &[usize],
    seed: u64,
) -> Result<PatchHierarchy<T>, HierarchyError> {
    if patch_counts.windows(2).any(|w| w[0] <= w[1]) || patch_counts.contains(&0) {
        return Err(HierarchyError::CountsNotDescending(patch_counts.to_vec()));
    }
    let mut levels = vec![PatchLevel::vertex_level(mesh)];
    let mut samples = Vec::new();
    if !patch_counts.is_empty() {
        let mut targets = patch_counts.to_vec();
        targets.reverse();
        let fps = fps_sample(mesh, &targets, seed)?;
        for (i, &count) in patch_counts.iter().enumerate() {
            levels.push(PatchLevel::from_centers(mesh, i + 1, &fps.samples[..count])?);
        }
        samples = fps.samples;
    }
    Ok(PatchHierarchy {
        levels,
        samples,
        seed,
    })
}

impl<T: Real> PatchHierarchy<T> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Index of the coarsest level.
    pub fn top(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, l: usize) -> &PatchLevel<T> {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[PatchLevel<T>] {
        &self.levels
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(PatchLevel::len).collect()
    }

    pub fn num_vertices(&self) -> usize {
        self.levels[0].len()
    }

    /// The full FPS order the coarse levels were cut from.
    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn checked(&self, l: usize) -> Result<&PatchLevel<T>, HierarchyError> {
        self.levels.get(l).ok_or(HierarchyError::NoSuchLevel {
            level: l,
            levels: self.levels.len(),
        })
    }

    /// Broadcasts per-patch rows of level `l` to the vertices.
    pub fn unpool_to_vertices(&self, l: usize, values: ArrayView2<T>) -> Result<Array2<T>, HierarchyError> {
        let level = self.checked(l)?;
        if values.nrows() != level.len() {
            return Err(HierarchyError::RowCount {
                expected: level.len(),
                got: values.nrows(),
            });
        }
        Ok(gather_rows(values, &level.assignment))
    }

    /// Component-wise max of per-vertex rows over every patch of level `l`.
    pub fn maxpool_to_level(&self, l: usize, rows: ArrayView2<T>) -> Result<Array2<T>, HierarchyError> {
        let level = self.checked(l)?;
        if rows.nrows() != self.num_vertices() {
            return Err(HierarchyError::RowCount {
                expected: self.num_vertices(),
                got: rows.nrows(),
            });
        }
        Ok(segment_max(rows, &level.assignment, level.len()).0)
    }

    /// Moves rows from level `from` to level `to`: unpool to the vertices, then
    /// max-pool.
    pub fn repool(&self, from: usize, to: usize, rows: ArrayView2<T>) -> Result<Array2<T>, HierarchyError> {
        let per_vertex = self.unpool_to_vertices(from, rows)?;
        self.maxpool_to_level(to, per_vertex.view())
    }

    pub fn export(&self) -> HierarchyExport {
        HierarchyExport {
            num_vertices: self.num_vertices(),
            seed: self.seed,
            level_sizes: self.level_sizes(),
            levels: self
                .levels
                .iter()
                .enumerate()
                .map(|(l, level)| LevelExport {
                    level: l,
                    size: level.len(),
                    centers: level.centers.clone(),
                    assignment: level.assignment.clone(),
                })
                .collect(),
        }
    }
}

/// JSON form of a hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyExport {
    pub num_vertices: usize,
    pub seed: u64,
    pub level_sizes: Vec<usize>,
    pub levels: Vec<LevelExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelExport {
    pub level: usize,
    pub size: usize,
    pub centers: Vec<usize>,
    pub assignment: Vec<usize>,
}
