use super::{bounding_box, TriMesh};
use crate::scalar::{Real, Vec3};

/// 8-bit RGB triple.
pub type Rgb = [u8; 3];

/// Deterministic position-based coloring used for correspondence transfer plots.
///
/// Each vertex is normalized into the bounding box (`p ∈ [0,1]³`, flat axes map
/// to 0.5); a channel takes half of its own coordinate plus a fixed mix of the
/// other two, which keeps the eight box corners distinct.
pub fn normal_coded_colors<T: Real>(mesh: &TriMesh<T>) -> Vec<Rgb> {
    normal_coded_colors_for_points(mesh.vertices())
}

pub fn normal_coded_colors_for_points<T: Real>(points: &[Vec3<T>]) -> Vec<Rgb> {
    if points.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = bounding_box(points);
    let half = T::lit(0.5);
    points
        .iter()
        .map(|p| {
            let mut q = [half; 3];
            for k in 0..3 {
                let extent = hi[k] - lo[k];
                if extent > T::zero() {
                    q[k] = (p[k] - lo[k]) / extent;
                }
            }
            let q = q.map(|x| x.to_f64_lossy());
            let channel = |a: usize, b: usize, c: usize| {
                let x = 0.5 * q[a] + 0.3 * q[b] + 0.2 * q[c];
                (255.0 * x).round().clamp(0.0, 255.0) as u8
            };
            [channel(0, 1, 2), channel(1, 2, 0), channel(2, 0, 1)]
        })
        .collect()
}
