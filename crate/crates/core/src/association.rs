//! Optimizable per-patch features and the soft associations they induce.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, NodeId, Tape};
use crate::geodesic::argmax;
use crate::hierarchy::PatchHierarchy;
use crate::kernels::Csr;
use crate::mesh::TriMesh;
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AssociationError {
    #[error("expected {expected} feature levels, got {got}")]
    LevelCount { expected: usize, got: usize },
    #[error("level {level}: expected {expected} rows, got {got}")]
    RowCount {
        level: usize,
        expected: usize,
        got: usize,
    },
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("feature dimension must be positive (level {0})")]
    ZeroDimension(usize),
    #[error("temperature must be positive")]
    Temperature,
    #[error("feature row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error(transparent)]
    Tape(#[from] AutodiffError),
}

fn remap(e: AutodiffError) -> AssociationError {
    match e {
        AutodiffError::ZeroRow { row, .. } => AssociationError::ZeroRow { row },
        other => AssociationError::Tape(other),
    }
}

/// One feature matrix per hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField<T> {
    pub levels: Vec<Array2<T>>,
}

impl<T: Real> FeatureField<T> {
    /// I.i.d. uniform entries in `[-0.1, 0.1]`.
    pub fn random<U: Real>(
        hierarchy: &PatchHierarchy<U>,
        dims: &[usize],
        seed: u64,
    ) -> Result<Self, AssociationError> {
        let sizes = hierarchy.level_sizes();
        if dims.len() != sizes.len() {
            return Err(AssociationError::LevelCount {
                expected: sizes.len(),
                got: dims.len(),
            });
        }
        if let Some(l) = dims.iter().position(|&d| d == 0) {
            return Err(AssociationError::ZeroDimension(l));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = sizes
            .iter()
            .zip(dims)
            .map(|(&n, &d)| Array2::from_shape_fn((n, d), |_| T::lit(rng.gen_range(-0.1..0.1))))
            .collect();
        let mut field = Self { levels };
        field.refill_zero_rows(&mut rng);
        Ok(field)
    }

    /// Overwrites the leading columns of the vertex level with
    /// `[centered position | normal]`, positions scaled to unit RMS norm and the
    /// whole block to unit RMS entry.
    pub fn seed_geometry(&mut self, mesh: &TriMesh<T>, seed: u64) -> Result<(), AssociationError> {
        let n = mesh.num_vertices();
        let f0 = &mut self.levels[0];
        if f0.nrows() != n {
            return Err(AssociationError::RowCount {
                level: 0,
                expected: n,
                got: f0.nrows(),
            });
        }
        let c = mesh.centroid();
        let mut block = Array2::zeros((n, 6));
        for (v, (p, nn)) in mesh.vertices().iter().zip(mesh.normals()).enumerate() {
            for k in 0..3 {
                block[[v, k]] = p[k] - c[k];
                block[[v, 3 + k]] = nn[k];
            }
        }
        let pos_rms = (block.slice(s![.., ..3]).iter().map(|&x| x * x).sum::<T>() / T::from_count(n)).sqrt();
        if pos_rms > T::zero() {
            block.slice_mut(s![.., ..3]).mapv_inplace(|x| x / pos_rms);
        }
        let rms = (block.iter().map(|&x| x * x).sum::<T>() / T::from_count(6 * n)).sqrt();
        if rms > T::zero() {
            block.mapv_inplace(|x| x / rms);
        }
        let w = f0.ncols().min(6);
        f0.slice_mut(s![.., ..w]).assign(&block.slice(s![.., ..w]));
        self.refill_zero_rows(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        Ok(())
    }

    fn refill_zero_rows(&mut self, rng: &mut ChaCha8Rng) {
        for f in &mut self.levels {
            for mut row in f.rows_mut() {
                while row.iter().all(|x| x.is_zero()) {
                    row.mapv_inplace(|_| T::lit(rng.gen_range(-0.1..0.1)));
                }
            }
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().map(|f| f.ncols()).collect()
    }

    pub fn check<U: Real>(&self, hierarchy: &PatchHierarchy<U>) -> Result<(), AssociationError> {
        let sizes = hierarchy.level_sizes();
        if sizes.len() != self.levels.len() {
            return Err(AssociationError::LevelCount {
                expected: sizes.len(),
                got: self.levels.len(),
            });
        }
        for (l, (f, &n)) in self.levels.iter().zip(&sizes).enumerate() {
            if f.nrows() != n {
                return Err(AssociationError::RowCount {
                    level: l,
                    expected: n,
                    got: f.nrows(),
                });
            }
        }
        Ok(())
    }
}

/// Constant operators used to combine features on one hierarchy.
#[derive(Debug, Clone)]
pub struct CombineLayout<T> {
    assignments: Vec<Arc<Vec<usize>>>,
    sizes: Vec<usize>,
    smoothing: Vec<Arc<Csr<T>>>,
    steps: usize,
}

impl<T: Real> CombineLayout<T> {
    pub fn new<U: Real>(hierarchy: &PatchHierarchy<U>, smoothing_steps: usize) -> Self {
        let half = T::lit(0.5);
        let smoothing = hierarchy
            .levels()
            .iter()
            .map(|level| {
                let rows: Vec<Vec<(usize, T)>> = level
                    .adjacency
                    .iter()
                    .enumerate()
                    .map(|(p, adj)| {
                        if adj.is_empty() {
                            return vec![(p, T::one())];
                        }
                        let w = half / T::from_count(adj.len());
                        let mut row = vec![(p, half)];
                        row.extend(adj.iter().map(|&q| (q, w)));
                        row
                    })
                    .collect();
                Arc::new(Csr::from_rows(level.len(), &rows))
            })
            .collect();
        Self {
            assignments: hierarchy
                .levels()
                .iter()
                .map(|l| Arc::new(l.assignment.clone()))
                .collect(),
            sizes: hierarchy.level_sizes(),
            smoothing,
            steps: smoothing_steps,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.sizes.len()
    }

    /// Combined features of every level, finest first. Each level is its own
    /// block followed by the repooled combined features of the next coarser
    /// level, then smoothed over patch adjacency. The coarsest level is the
    /// raw field.
    pub fn combine_on_tape(&self, tape: &mut Tape<T>, field: &[NodeId]) -> Vec<NodeId> {
        let top = self.sizes.len() - 1;
        let mut out = vec![field[top]; self.sizes.len()];
        for l in (0..top).rev() {
            let per_vertex = tape.gather_rows(out[l + 1], self.assignments[l + 1].clone());
            let parent = if l == 0 {
                per_vertex
            } else {
                tape.segment_max(per_vertex, self.assignments[l].clone(), self.sizes[l])
            };
            let mut x = tape.concat_cols(&[field[l], parent]);
            for _ in 0..self.steps {
                x = tape.sparse_matmul(self.smoothing[l].clone(), x);
            }
            out[l] = x;
        }
        out
    }
}

/// Combined features as plain matrices.
pub fn combine<T: Real, U: Real>(
    hierarchy: &PatchHierarchy<U>,
    field: &FeatureField<T>,
    smoothing_steps: usize,
) -> Result<Vec<Array2<T>>, AssociationError> {
    field.check(hierarchy)?;
    let layout = CombineLayout::new(hierarchy, smoothing_steps);
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = field.levels.iter().map(|f| tape.constant(f.clone())).collect();
    let nodes = layout.combine_on_tape(&mut tape, &leaves);
    Ok(nodes.iter().map(|&n| tape.value(n).clone()).collect())
}

/// Cosine similarity of row-normalized inputs.
pub fn similarity_on_tape<T: Real>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId, AssociationError> {
    let (wa, wb) = (tape.value(a).ncols(), tape.value(b).ncols());
    if wa != wb {
        return Err(AssociationError::WidthMismatch(wa, wb));
    }
    let na = tape.normalize_rows(a).map_err(remap)?;
    let nb = if a == b {
        na
    } else {
        tape.normalize_rows(b).map_err(remap)?
    };
    Ok(tape.matmul_t(na, nb))
}

/// `(Π_ab, Π_ba)` from an `n_a×n_b` similarity node.
pub fn associations_from_similarity<T: Real>(
    tape: &mut Tape<T>,
    s: NodeId,
    temperature: T,
) -> (NodeId, NodeId) {
    let ab = tape.softmax_rows(s, temperature);
    let st = tape.transpose(s);
    let ba = tape.softmax_rows(st, temperature);
    (ab, ba)
}

/// Cross associations between two feature matrices of one level.
pub fn associate<T: Real>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    temperature: T,
) -> Result<(Array2<T>, Array2<T>), AssociationError> {
    if !(temperature > T::zero()) {
        return Err(AssociationError::Temperature);
    }
    let mut tape = Tape::new();
    let na = tape.constant(a.to_owned());
    let nb = tape.constant(b.to_owned());
    let s = similarity_on_tape(&mut tape, na, nb)?;
    let (ab, ba) = associations_from_similarity(&mut tape, s, temperature);
    Ok((tape.value(ab).clone(), tape.value(ba).clone()))
}

pub fn self_associate<T: Real>(a: ArrayView2<T>, temperature: T) -> Result<Array2<T>, AssociationError> {
    Ok(associate(a, a, temperature)?.0)
}

/// Row-wise softmax of cosine similarities at a given temperature.
pub fn softmax_similarity<T: Real>(s: ArrayView2<T>, temperature: T) -> Array2<T> {
    autodiff::softmax_rows(s, T::one() / temperature)
}

/// Most probable target of every row; lowest index on ties.
pub fn extract_point_map<T: Real>(pi: ArrayView2<T>) -> Vec<usize> {
    pi.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}
