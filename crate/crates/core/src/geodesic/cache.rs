//! Binary on-disk cache for [`DistanceMatrix`].
//!
//! Layout (little-endian): magic `PMDM`, version `u32`, vertex count `u64`,
//! FNV-1a hash of the row then column indices `u64`, normalization tag `u8`,
//! row count `u64`, column count `u64`, then `rows * cols` `f64` values in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{DistanceMatrix, GeodesicError, Normalization};
use crate::hash::Fnv1a;
use crate::mesh::TriMesh;
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"PMDM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1 + 8 + 8;

/// FNV-1a over the `u64` little-endian encoding of row then column indices.
pub fn center_hash(rows: &[usize], cols: &[usize]) -> u64 {
    let mut h = Fnv1a::new();
    for &i in rows.iter().chain(cols) {
        h.write_u64(i as u64);
    }
    h.finish()
}

/// FNV-1a over vertex coordinates (as `f64` bits) and face indices. Used to
/// key cache files so an edited mesh never reuses a stale matrix.
pub fn mesh_fingerprint<T: Real>(mesh: &TriMesh<T>) -> u64 {
    let mut h = Fnv1a::new();
    for p in mesh.vertices() {
        for &x in p {
            h.write_u64(x.to_f64_lossy().to_bits());
        }
    }
    for f in mesh.faces() {
        for &i in f {
            h.write_u64(i as u64);
        }
    }
    h.finish()
}

pub fn store_matrix<T: Real>(
    matrix: &DistanceMatrix<T>,
    vertex_count: usize,
    path: impl AsRef<Path>,
) -> Result<(), GeodesicError> {
    let path = path.as_ref();
    let (r, c) = matrix.values.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * r * c);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(vertex_count as u64).to_le_bytes());
    buf.extend_from_slice(&center_hash(&matrix.rows, &matrix.cols).to_le_bytes());
    buf.push(matrix.normalization.tag());
    buf.extend_from_slice(&(r as u64).to_le_bytes());
    buf.extend_from_slice(&(c as u64).to_le_bytes());
    for x in matrix.values.iter() {
        buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
    // Write-then-rename so readers never observe a partial file.
    let tmp = path.with_extension("tmp");
    let io = |source| GeodesicError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Loads a cached matrix, refusing it unless the header matches the current
/// vertex count and center lists.
pub fn load_matrix<T: Real>(
    path: impl AsRef<Path>,
    vertex_count: usize,
    rows: &[usize],
    cols: &[usize],
) -> Result<DistanceMatrix<T>, GeodesicError> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(GeodesicError::CacheNotFound(path.to_path_buf()))
        }
        Err(source) => {
            return Err(GeodesicError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let corrupt = |reason: &str| GeodesicError::CacheCorrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mismatch = |reason: String| GeodesicError::CacheMismatch {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let stored_count = u64_at(8);
    if stored_count != vertex_count as u64 {
        return Err(mismatch(format!("vertex count {stored_count} != {vertex_count}")));
    }
    let stored_hash = u64_at(16);
    let hash = center_hash(rows, cols);
    if stored_hash != hash {
        return Err(mismatch(format!("center hash {stored_hash:016x} != {hash:016x}")));
    }
    let normalization = Normalization::from_tag(bytes[24]).ok_or_else(|| corrupt("bad tag"))?;
    let (r, c) = (u64_at(25) as usize, u64_at(33) as usize);
    if r != rows.len() || c != cols.len() {
        return Err(mismatch(format!("shape {r}x{c}")));
    }
    if bytes.len() != HEADER_LEN + 8 * r * c {
        return Err(corrupt("truncated value block"));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|ch| T::lit(f64::from_le_bytes(ch.try_into().unwrap())))
        .collect();
    Ok(DistanceMatrix {
        rows: rows.to_vec(),
        cols: cols.to_vec(),
        values: Array2::from_shape_vec((r, c), values).map_err(|_| corrupt("shape"))?,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic::center_matrix;
    use crate::synthetic;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = synthetic::perturbed_grid::<f64>(6, 6, 0.3, 1);
        let c = [0, 7, 20, 35];
        let d = center_matrix(&m, &c, Normalization::SqrtArea).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pmdm");
        store_matrix(&d, m.num_vertices(), &p).unwrap();
        let back: DistanceMatrix<f64> = load_matrix(&p, m.num_vertices(), &c, &c).unwrap();
        assert_eq!(back, d);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PMDM");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 16);
    }

    #[test]
    fn refuses_other_mesh_or_centers() {
        let m = synthetic::perturbed_grid::<f64>(5, 5, 0.3, 1);
        let c = [0, 12, 24];
        let d = center_matrix(&m, &c, Normalization::None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pmdm");
        store_matrix(&d, m.num_vertices(), &p).unwrap();
        let edited = synthetic::perturbed_grid::<f64>(5, 6, 0.3, 1);
        assert!(matches!(
            load_matrix::<f64>(&p, edited.num_vertices(), &c, &c),
            Err(GeodesicError::CacheMismatch { .. })
        ));
        assert!(matches!(
            load_matrix::<f64>(&p, m.num_vertices(), &[0, 12, 23], &[0, 12, 23]),
            Err(GeodesicError::CacheMismatch { .. })
        ));
        assert_ne!(mesh_fingerprint(&m), mesh_fingerprint(&edited));
    }

    #[test]
    fn missing_file() {
        let err = load_matrix::<f64>("/nonexistent/d.pmdm", 3, &[0], &[0]).unwrap_err();
        assert!(matches!(err, GeodesicError::CacheNotFound(_)));
    }
}
