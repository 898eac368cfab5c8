//! Row-indexed dense kernels shared by the pooling operators and the tape.

use ndarray::{Array2, ArrayView2, Axis};

use crate::scalar::{Real, Vec3};

/// Stacks points as the rows of an `n×3` matrix.
pub fn points_to_rows<T: Real>(points: &[Vec3<T>]) -> Array2<T> {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

pub fn rows_to_points<T: Real>(rows: ArrayView2<T>) -> Vec<Vec3<T>> {
    rows.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

/// `out[k] = x[index[k]]`.
pub fn gather_rows<T: Real>(x: ArrayView2<T>, index: &[usize]) -> Array2<T> {
    x.select(Axis(0), index)
}

/// `out[index[k]] += x[k]` into a zero matrix with `rows` rows.
pub fn scatter_add_rows<T: Real>(x: ArrayView2<T>, index: &[usize], rows: usize) -> Array2<T> {
    let mut out = Array2::zeros((rows, x.ncols()));
    for (k, &i) in index.iter().enumerate() {
        let mut dst = out.row_mut(i);
        dst += &x.row(k);
    }
    out
}

/// Column-wise max of the rows sharing a segment id. Returns the pooled
/// matrix and, for every output entry, the source row that attained it
/// (first occurrence wins).
pub fn segment_max<T: Real>(
    x: ArrayView2<T>,
    segment: &[usize],
    segments: usize,
) -> (Array2<T>, Array2<usize>) {
    let d = x.ncols();
    let mut out = Array2::from_elem((segments, d), T::neg_infinity());
    let mut arg = Array2::from_elem((segments, d), usize::MAX);
    for (r, &s) in segment.iter().enumerate() {
        for c in 0..d {
            let v = x[[r, c]];
            if arg[[s, c]] == usize::MAX || v > out[[s, c]] {
                out[[s, c]] = v;
                arg[[s, c]] = r;
            }
        }
    }
    (out, arg)
}

/// Compressed sparse row matrix with constant entries.
#[derive(Debug, Clone)]
pub struct Csr<T> {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> Csr<T> {
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, T)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// `self * x`.
    pub fn matmul(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                dst.scaled_add(self.values[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    /// `selfᵀ * x`.
    pub fn t_matmul(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::zeros((self.cols, x.ncols()));
        for r in 0..self.rows {
            let src = x.row(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[k]).scaled_add(self.values[k], &src);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn segment_max_ties_keep_first() {
        let x = array![[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]];
        let (m, arg) = segment_max(x.view(), &[0, 0, 1], 2);
        assert_eq!(m, array![[3.0, 5.0], [2.0, 0.0]]);
        assert_eq!(arg, array![[1, 0], [2, 2]]);
    }

    #[test]
    fn csr_transpose_product() {
        let a = Csr::from_rows(3, &[vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]);
        let x = array![[1.0], [2.0]];
        assert_eq!(a.t_matmul(x.view()), array![[1.0], [-2.0], [2.0]]);
        let y = array![[1.0], [1.0], [1.0]];
        assert_eq!(a.matmul(y.view()), array![[3.0], [-1.0]]);
    }
}
