//! Patch-wise rigid motions blended into a smooth deformation.
//!
//! Patch `i` carries a rotation (6-D Gram-Schmidt parametrization) and a new
//! center position `u_i`; vertex `v` moves to the blend
//! `Σ_i α_i(v) (R_i (x(v) - c_i) + u_i)` with normalized Gaussian weights of
//! the geodesic distance to each center.

use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, NodeId, Tape};
use crate::geodesic::{self, GeodesicError};
use crate::hierarchy::PatchHierarchy;
use crate::kernels::{points_to_rows, rows_to_points};
use crate::mesh::TriMesh;
use crate::scalar::{sub3, Mat3, Real, Vec3};

/// Support radius of a blending Gaussian, in multiples of its bandwidth.
pub const TRUNCATION: f64 = 6.0;

#[derive(Debug, Error)]
pub enum DeformationError {
    #[error("rotation parameters of patch {0} are degenerate")]
    DegenerateRotation(usize),
    #[error("sigma scale must be positive")]
    SigmaScale,
    #[error("level {level}: expected {expected} patches, got {got}")]
    PatchCount {
        level: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Tape(AutodiffError),
}

fn remap(e: AutodiffError) -> DeformationError {
    match e {
        AutodiffError::DegenerateRotation { row, .. } => DeformationError::DegenerateRotation(row),
        other => DeformationError::Tape(other),
    }
}

/// Gram-Schmidt decoding of `(a, b)`; the frame vectors are the columns.
pub fn decode_rotation<T: Real>(rot6: &[T; 6]) -> Result<Mat3<T>, DeformationError> {
    let m = autodiff::rot6_to_matrix(rot6).ok_or(DeformationError::DegenerateRotation(0))?;
    Ok([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]])
}

/// Per-patch motion parameters of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationParams<T> {
    /// `n×6`
    pub rot6: Array2<T>,
    /// `n×3` new center positions.
    pub translation: Array2<T>,
}

impl<T: Real> DeformationParams<T> {
    /// Identity rotations with every center left in place.
    pub fn identity(center_positions: &[Vec3<T>]) -> Self {
        let n = center_positions.len();
        let mut rot6 = Array2::zeros((n, 6));
        for i in 0..n {
            rot6[[i, 0]] = T::one();
            rot6[[i, 4]] = T::one();
        }
        Self {
            rot6,
            translation: points_to_rows(center_positions),
        }
    }

    pub fn len(&self) -> usize {
        self.rot6.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rot6.nrows() == 0
    }

    /// Resets rows whose rotation cannot be decoded to the identity.
    /// Returns the patches that were reset.
    pub fn repair_rotations(&mut self) -> Vec<usize> {
        let mut fixed = Vec::new();
        for (i, mut row) in self.rot6.rows_mut().into_iter().enumerate() {
            let r = [row[0], row[1], row[2], row[3], row[4], row[5]];
            if autodiff::rot6_to_matrix(&r).is_none() || r.iter().any(|x| !x.is_finite()) {
                row.fill(T::zero());
                row[0] = T::one();
                row[4] = T::one();
                fixed.push(i);
            }
        }
        fixed
    }
}

/// Sparse normalized blending weights of one level.
#[derive(Debug, Clone)]
pub struct BlendWeights<T> {
    pub level: usize,
    /// Gaussian bandwidth of every patch.
    pub sigma: Vec<T>,
    /// Per vertex: `(patch, α)` sorted by patch, summing to one.
    pub rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> BlendWeights<T> {
    pub fn weight(&self, v: usize, patch: usize) -> T {
        self.rows[v]
            .binary_search_by_key(&patch, |&(p, _)| p)
            .map_or(T::zero(), |k| self.rows[v][k].1)
    }
}

/// Blending weights with support truncated at [`TRUNCATION`] bandwidths.
pub fn blend_weights<T: Real>(
    mesh: &TriMesh<T>,
    hierarchy: &PatchHierarchy<T>,
    level: usize,
    sigma_scale: T,
) -> Result<BlendWeights<T>, DeformationError> {
    blend_weights_with_support(mesh, hierarchy, level, sigma_scale, Some(T::lit(TRUNCATION)))
}

/// Blending weights; `truncation: None` keeps the full support.
///
/// Patches with zero bandwidth (single-vertex patches) influence only their
/// own vertices. Every vertex is influenced by its own patch.
pub fn blend_weights_with_support<T: Real>(
    mesh: &TriMesh<T>,
    hierarchy: &PatchHierarchy<T>,
    level: usize,
    sigma_scale: T,
    truncation: Option<T>,
) -> Result<BlendWeights<T>, DeformationError> {
    if !(sigma_scale > T::zero()) {
        return Err(DeformationError::SigmaScale);
    }
    let lv = hierarchy.level(level);
    let n = mesh.num_vertices();
    let sigma: Vec<T> = lv.patch_radius.iter().map(|&r| r * sigma_scale).collect();
    // Per vertex: (patch, log weight).
    let mut logs: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
    let two = T::lit(2.0);
    for (i, &c) in lv.centers.iter().enumerate() {
        let s = sigma[i];
        if s > T::zero() {
            let reached = match truncation {
                Some(k) => geodesic::within_radius(mesh, c, k * s)?,
                None => geodesic::single_source(mesh, c)?
                    .dist
                    .into_iter()
                    .enumerate()
                    .collect(),
            };
            for (v, d) in reached {
                logs[v].push((i, -(d * d) / (two * s * s)));
            }
        }
    }
    for (v, row) in logs.iter_mut().enumerate() {
        let own = lv.assignment[v];
        if sigma[own] > T::zero() {
            if !row.iter().any(|&(p, _)| p == own) {
                let d = lv.center_distance[v];
                let s = sigma[own];
                row.push((own, -(d * d) / (two * s * s)));
            }
        } else {
            row.push((own, T::zero()));
        }
    }
    let rows = logs
        .into_iter()
        .map(|mut row| {
            row.sort_unstable_by_key(|&(p, _)| p);
            let max = row.iter().map(|&(_, l)| l).fold(T::neg_infinity(), T::max);
            let mut w: Vec<(usize, T)> = row.iter().map(|&(p, l)| (p, (l - max).exp())).collect();
            let total: T = w.iter().map(|&(_, x)| x).sum();
            for e in &mut w {
                e.1 /= total;
            }
            w
        })
        .collect();
    Ok(BlendWeights { level, sigma, rows })
}

/// Constant index and offset tables for evaluating one level's deformation
/// and rigidity energy on a tape.
#[derive(Debug, Clone)]
pub struct DeformationLayout<T> {
    pub level: usize,
    num_vertices: usize,
    num_patches: usize,
    centers: Arc<Vec<usize>>,
    blend_patch: Arc<Vec<usize>>,
    blend_vertex: Arc<Vec<usize>>,
    blend_offset: Array2<T>,
    blend_alpha: Arc<Vec<T>>,
    rig_i: Arc<Vec<usize>>,
    rig_j: Arc<Vec<usize>>,
    rig_offset_i: Array2<T>,
    rig_offset_j: Array2<T>,
    rig_sqrt_weight: Arc<Vec<T>>,
}

/// Tape nodes of one deformed level.
#[derive(Debug, Clone, Copy)]
pub struct DeformedNodes {
    /// `n×9` decoded rotations.
    pub rotations: NodeId,
    /// `V×3` deformed vertex positions.
    pub positions: NodeId,
    /// Deformed positions of the center vertices.
    pub centers: NodeId,
}

impl<T: Real> DeformationLayout<T> {
    pub fn new(mesh: &TriMesh<T>, hierarchy: &PatchHierarchy<T>, weights: &BlendWeights<T>) -> Self {
        let lv = hierarchy.level(weights.level);
        let x = mesh.vertices();
        let c = &lv.center_positions;
        let (mut bp, mut bv, mut ba, mut bo) = (vec![], vec![], vec![], vec![]);
        for (v, row) in weights.rows.iter().enumerate() {
            for &(p, a) in row {
                bp.push(p);
                bv.push(v);
                ba.push(a);
                bo.push(sub3(x[v], c[p]));
            }
        }
        let (mut ri, mut rj, mut oi, mut oj, mut rw) = (vec![], vec![], vec![], vec![], vec![]);
        for (i, adj) in lv.adjacency.iter().enumerate() {
            for &j in adj {
                for &v in lv.members[i].iter().chain(&lv.members[j]) {
                    ri.push(i);
                    rj.push(j);
                    oi.push(sub3(x[v], c[i]));
                    oj.push(sub3(x[v], c[j]));
                    rw.push((weights.weight(v, i) + weights.weight(v, j)).sqrt());
                }
            }
        }
        Self {
            level: weights.level,
            num_vertices: mesh.num_vertices(),
            num_patches: lv.len(),
            centers: Arc::new(lv.centers.clone()),
            blend_patch: Arc::new(bp),
            blend_vertex: Arc::new(bv),
            blend_offset: points_to_rows(&bo),
            blend_alpha: Arc::new(ba),
            rig_i: Arc::new(ri),
            rig_j: Arc::new(rj),
            rig_offset_i: points_to_rows(&oi),
            rig_offset_j: points_to_rows(&oj),
            rig_sqrt_weight: Arc::new(rw),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    fn check(&self, params: &DeformationParams<T>) -> Result<(), DeformationError> {
        if params.rot6.nrows() != self.num_patches || params.translation.nrows() != self.num_patches {
            return Err(DeformationError::PatchCount {
                level: self.level,
                expected: self.num_patches,
                got: params.rot6.nrows(),
            });
        }
        Ok(())
    }

    pub fn deform_on_tape(
        &self,
        tape: &mut Tape<T>,
        rot6: NodeId,
        translation: NodeId,
    ) -> Result<DeformedNodes, DeformationError> {
        let rotations = tape.rot6_to_matrix(rot6).map_err(remap)?;
        let r = tape.gather_rows(rotations, self.blend_patch.clone());
        let offset = tape.constant(self.blend_offset.clone());
        let rotated = tape.rotate_rows(r, offset);
        let u = tape.gather_rows(translation, self.blend_patch.clone());
        let moved = tape.add(rotated, u);
        let weighted = tape.scale_rows(moved, self.blend_alpha.clone());
        let positions = tape.scatter_add_rows(weighted, self.blend_vertex.clone(), self.num_vertices);
        let centers = tape.gather_rows(positions, self.centers.clone());
        Ok(DeformedNodes {
            rotations,
            positions,
            centers,
        })
    }

    /// Σ over ordered adjacent pairs `(i, j)` and `v ∈ P_i ∪ P_j` of
    /// `(α_i(v) + α_j(v)) ‖x_i(v) - x_j(v)‖²`.
    pub fn rigidity_on_tape(&self, tape: &mut Tape<T>, rotations: NodeId, translation: NodeId) -> NodeId {
        let side = |tape: &mut Tape<T>, idx: &Arc<Vec<usize>>, offset: &Array2<T>| {
            let r = tape.gather_rows(rotations, idx.clone());
            let o = tape.constant(offset.clone());
            let rotated = tape.rotate_rows(r, o);
            let u = tape.gather_rows(translation, idx.clone());
            tape.add(rotated, u)
        };
        let xi = side(tape, &self.rig_i, &self.rig_offset_i);
        let xj = side(tape, &self.rig_j, &self.rig_offset_j);
        let diff = tape.sub(xi, xj);
        let scaled = tape.scale_rows(diff, self.rig_sqrt_weight.clone());
        tape.sum_squares(scaled)
    }
}

/// Deformed vertex positions and deformed center positions.
/// Deformed vertex positions and deformed patch centers.
pub type Deformed<T> = (Vec<Vec3<T>>, Vec<Vec3<T>>);

pub fn deform<T: Real>(
    layout: &DeformationLayout<T>,
    params: &DeformationParams<T>,
) -> Result<Deformed<T>, DeformationError> {
    layout.check(params)?;
    let mut tape = Tape::new();
    let r = tape.constant(params.rot6.clone());
    let u = tape.constant(params.translation.clone());
    let out = layout.deform_on_tape(&mut tape, r, u)?;
    Ok((
        rows_to_points(tape.value(out.positions).view()),
        rows_to_points(tape.value(out.centers).view()),
    ))
}

pub fn rigidity_energy<T: Real>(
    layout: &DeformationLayout<T>,
    params: &DeformationParams<T>,
) -> Result<T, DeformationError> {
    layout.check(params)?;
    let mut tape = Tape::new();
    let r = tape.constant(params.rot6.clone());
    let u = tape.constant(params.translation.clone());
    let rot = tape.rot6_to_matrix(r).map_err(remap)?;
    let e = layout.rigidity_on_tape(&mut tape, rot, u);
    Ok(tape.scalar(e))
}

/// Row-major 3×3 rotation as 6-D parameters (its first two columns).
pub fn encode_rotation<T: Real>(m: &Mat3<T>) -> [T; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Parameters realizing the global motion `x ↦ R x + t` on every patch.
pub fn global_motion<T: Real>(centers: &[Vec3<T>], r: &Mat3<T>, t: Vec3<T>) -> DeformationParams<T> {
    let enc = encode_rotation(r);
    let n = centers.len();
    let rot6 = Array2::from_shape_fn((n, 6), |(_, k)| enc[k]);
    let moved: Vec<Vec3<T>> = centers
        .iter()
        .map(|&c| crate::scalar::add3(crate::scalar::mat_vec3(r, c), t))
        .collect();
    DeformationParams {
        rot6,
        translation: points_to_rows(&moved),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;
    use crate::scalar::{det3, norm3};
    use crate::synthetic;
    use ndarray::ArrayView2;

    fn max_row_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
        a.rows()
            .into_iter()
            .zip(b.rows())
            .map(|(x, y)| (&x - &y).mapv(|d| d * d).sum().sqrt())
            .fold(0.0, f64::max)
    }

    fn rotation_about(axis: Vec3<f64>, angle: f64) -> Mat3<f64> {
        let n = norm3(axis);
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    #[test]
    fn decode_examples() {
        let id = decode_rotation(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(decode_rotation(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), id);
        let m = decode_rotation(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(det3(&m), 1.0);
        assert_eq!([m[0][0], m[1][0], m[2][0]], [0.0, 1.0, 0.0]);
        assert!(matches!(
            decode_rotation(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            Err(DeformationError::DegenerateRotation(_))
        ));
        assert!(matches!(
            decode_rotation(&[1.0, 0.0, 0.0, -3.0, 0.0, 0.0]),
            Err(DeformationError::DegenerateRotation(_))
        ));
        let r = rotation_about([0.3, -1.0, 0.4], 1.1);
        let back = decode_rotation(&encode_rotation(&r)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - r[i][j]).abs() < 1e-14);
            }
        }
    }

    fn setup(counts: &[usize]) -> (TriMesh<f64>, PatchHierarchy<f64>) {
        let m = synthetic::perturbed_grid::<f64>(10, 10, 0.3, 2);
        let h = build_hierarchy(&m, counts, 5).unwrap();
        (m, h)
    }

    #[test]
    fn rows_sum_to_one_with_own_patch() {
        let (m, h) = setup(&[10]);
        for l in 0..2 {
            let w = blend_weights(&m, &h, l, 1.0).unwrap();
            for (v, row) in w.rows.iter().enumerate() {
                let s: f64 = row.iter().map(|e| e.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(w.weight(v, h.level(l).assignment[v]) > 0.0);
                assert!(row.iter().all(|e| e.1 >= 0.0));
            }
        }
        assert!(matches!(
            blend_weights(&m, &h, 1, 0.0),
            Err(DeformationError::SigmaScale)
        ));
    }

    #[test]
    fn isolated_center_gets_full_weight() {
        // Two clusters joined by one long edge: each center is far from the
        // other one in bandwidth units.
        let mut v: Vec<Vec3<f64>> = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0]];
        v.extend([[10.0, 0.0, 0.0], [10.1, 0.0, 0.0], [10.0, 0.1, 0.0]]);
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5], [1, 3, 2]]).unwrap();
        let h = build_hierarchy(&m, &[2], 0).unwrap();
        let w = blend_weights(&m, &h, 1, 1.0).unwrap();
        for (p, &c) in h.level(1).centers.iter().enumerate() {
            assert_eq!(w.rows[c], vec![(p, 1.0)]);
        }
    }

    #[test]
    fn equidistant_vertex_splits_evenly() {
        // Path 0 - 1 - 2 embedded as a strip; centers at both ends.
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [2.0, 1.0, 0.0],
        ];
        let m = TriMesh::new(v, vec![[0, 1, 3], [1, 4, 3], [1, 2, 4], [2, 5, 4]]).unwrap();
        let h = build_hierarchy(&m, &[2], 0).unwrap();
        let lv = h.level(1);
        let w = blend_weights_with_support(&m, &h, 1, 1.0, None).unwrap();
        for v in 0..6 {
            let d: Vec<f64> = lv
                .centers
                .iter()
                .map(|&c| geodesic::single_source(&m, c).unwrap().dist[v])
                .collect();
            if d[0] == d[1] && lv.patch_radius[0] == lv.patch_radius[1] {
                assert!((w.weight(v, 0) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_parameters_reproduce_mesh() {
        let (m, h) = setup(&[20, 6]);
        for l in 0..3 {
            let w = blend_weights(&m, &h, l, 1.0).unwrap();
            let layout = DeformationLayout::new(&m, &h, &w);
            let p = DeformationParams::identity(&h.level(l).center_positions);
            let (x, c) = deform(&layout, &p).unwrap();
            for (a, b) in x.iter().zip(m.vertices()) {
                assert!(norm3(sub3(*a, *b)) < 1e-12);
            }
            for (a, b) in c.iter().zip(&h.level(l).center_positions) {
                assert!(norm3(sub3(*a, *b)) < 1e-12);
            }
            assert!(rigidity_energy(&layout, &p).unwrap() < 1e-24);
        }
    }

    #[test]
    fn shared_motion_is_exact() {
        let (m, h) = setup(&[20, 6]);
        let r = rotation_about([1.0, 2.0, -0.5], 0.7);
        let t = [0.3, -1.2, 2.0];
        for l in 0..3 {
            let w = blend_weights(&m, &h, l, 1.0).unwrap();
            let layout = DeformationLayout::new(&m, &h, &w);
            let p = global_motion(&h.level(l).center_positions, &r, t);
            let (x, _) = deform(&layout, &p).unwrap();
            for (a, b) in x.iter().zip(m.vertices()) {
                let want = crate::scalar::add3(crate::scalar::mat_vec3(&r, *b), t);
                assert!(norm3(sub3(*a, want)) < 1e-9);
            }
            assert!(rigidity_energy(&layout, &p).unwrap() < 1e-18);
        }
    }

    #[test]
    fn single_patch_is_rigid() {
        let (m, h) = setup(&[1]);
        let w = blend_weights(&m, &h, 1, 1.0).unwrap();
        let layout = DeformationLayout::new(&m, &h, &w);
        let r = rotation_about([0.0, 0.0, 1.0], 0.4);
        let mut p = DeformationParams::identity(&h.level(1).center_positions);
        let enc = encode_rotation(&r);
        for (k, &e) in enc.iter().enumerate() {
            p.rot6[[0, k]] = e;
        }
        p.translation[[0, 2]] += 1.0;
        let c = h.level(1).center_positions[0];
        let (x, _) = deform(&layout, &p).unwrap();
        for (a, b) in x.iter().zip(m.vertices()) {
            let want =
                crate::scalar::add3(crate::scalar::mat_vec3(&r, sub3(*b, c)), [c[0], c[1], c[2] + 1.0]);
            assert!(norm3(sub3(*a, want)) < 1e-12);
        }
    }

    #[test]
    fn translated_patch_on_tetrahedron() {
        let m = synthetic::tetrahedron::<f64>();
        let h = build_hierarchy(&m, &[2], 3).unwrap();
        let w = blend_weights(&m, &h, 1, 1.0).unwrap();
        let layout = DeformationLayout::new(&m, &h, &w);
        let mut p = DeformationParams::identity(&h.level(1).center_positions);
        let t = [0.2, -0.1, 0.3];
        for (k, &tk) in t.iter().enumerate() {
            p.translation[[1, k]] += tk;
        }
        // Both ordered pairs visit all four vertices; x_1(v) - x_0(v) = t.
        let tt = t.iter().map(|x| x * x).sum::<f64>();
        let mut want = 0.0;
        for v in 0..4 {
            want += 2.0 * (w.weight(v, 0) + w.weight(v, 1)) * tt;
        }
        assert!((rigidity_energy(&layout, &p).unwrap() - want).abs() < 1e-15);
        assert!((want - 8.0 * tt).abs() < 1e-15);
    }

    #[test]
    fn truncation_error_is_small() {
        let m = synthetic::uv_sphere::<f64>(14, 20, 1.0);
        let h = build_hierarchy(&m, &[40, 10], 3).unwrap();
        let diag = m.bounding_box_diagonal();
        for l in 1..3 {
            for scale in [0.5, 1.0] {
                let trunc = blend_weights(&m, &h, l, scale).unwrap();
                let full = blend_weights_with_support(&m, &h, l, scale, None).unwrap();
                let centers = &h.level(l).center_positions;
                let mut p = DeformationParams::identity(centers);
                for (i, mut row) in p.rot6.rows_mut().into_iter().enumerate() {
                    let r = rotation_about([1.0, i as f64, 0.5], 0.3 * i as f64);
                    let e = encode_rotation(&r);
                    for k in 0..6 {
                        row[k] = e[k];
                    }
                }
                let a = deform(&DeformationLayout::new(&m, &h, &trunc), &p).unwrap().0;
                let b = deform(&DeformationLayout::new(&m, &h, &full), &p).unwrap().0;
                let err = max_row_distance(points_to_rows(&a).view(), points_to_rows(&b).view());
                assert!(err < 1e-6 * diag, "level {l} scale {scale}: {err}");
            }
        }
    }

    #[test]
    fn repair_resets_degenerate_rows() {
        let mut p = DeformationParams::identity(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        p.rot6[[1, 3]] = 1.0;
        p.rot6[[1, 4]] = 0.0;
        assert_eq!(p.repair_rotations(), vec![1]);
        assert_eq!(p.rot6[[1, 4]], 1.0);
    }
}
