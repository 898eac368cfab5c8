//! Correspondence quality metrics against ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesic::{self, GeodesicError, Normalization};
use crate::mesh::TriMesh;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluable vertices (all ground-truth entries discarded)")]
    Empty,
    #[error("map has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("entry {row} maps to vertex {index}, but the mesh has {count} vertices")]
    OutOfRange { row: usize, index: usize, count: usize },
    #[error("tolerances must be ascending and nonnegative")]
    Tolerances,
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
}

/// Ground truth with `None` for discarded vertices.
pub type GroundTruth = Vec<Option<usize>>;

fn check_range(map: &[usize], count: usize) -> Result<(), EvalError> {
    match map.iter().enumerate().find(|(_, &t)| t >= count) {
        Some((row, &index)) => Err(EvalError::OutOfRange { row, index, count }),
        None => Ok(()),
    }
}

fn check_pair(pred: &[usize], gt: &[Option<usize>]) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.iter().all(Option::is_none) {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Geodesic distances for arbitrary vertex pairs, one early-exit Dijkstra per
/// distinct source.
pub fn pair_distances<T: Real>(mesh: &TriMesh<T>, pairs: &[(usize, usize)]) -> Result<Vec<T>, GeodesicError> {
    let mut by_source: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &(s, _)) in pairs.iter().enumerate() {
        by_source.entry(s).or_default().push(k);
    }
    let mut out = vec![T::zero(); pairs.len()];
    for (s, ks) in by_source {
        let targets: Vec<usize> = ks.iter().map(|&k| pairs[k].1).collect();
        let d = geodesic::distances_to(mesh, s, &targets)?;
        for (&k, dk) in ks.iter().zip(d) {
            out[k] = dk;
        }
    }
    Ok(out)
}

/// Normalized geodesic error on the target mesh of every non-discarded
/// vertex.
pub fn geodesic_errors<T: Real>(
    pred: &[usize],
    gt: &[Option<usize>],
    target: &TriMesh<T>,
    normalization: Normalization,
) -> Result<Vec<Option<f64>>, EvalError> {
    check_pair(pred, gt)?;
    let n = target.num_vertices();
    check_range(pred, n)?;
    let gt_idx: Vec<usize> = gt.iter().flatten().copied().collect();
    check_range(&gt_idx, n)?;
    let rows: Vec<usize> = (0..pred.len()).filter(|&v| gt[v].is_some()).collect();
    let pairs: Vec<(usize, usize)> = rows.iter().map(|&v| (pred[v], gt[v].unwrap())).collect();
    let d = pair_distances(target, &pairs)?;
    let factor = geodesic::normalization_factor(target, normalization)?.to_f64_lossy();
    let mut out = vec![None; pred.len()];
    for (&v, dv) in rows.iter().zip(d) {
        out[v] = Some(dv.to_f64_lossy() / factor);
    }
    Ok(out)
}

/// Mean normalized geodesic error over non-discarded vertices.
pub fn mge<T: Real>(
    pred: &[usize],
    gt: &[Option<usize>],
    target: &TriMesh<T>,
    normalization: Normalization,
) -> Result<f64, EvalError> {
    let e: Vec<f64> = geodesic_errors(pred, gt, target, normalization)?
        .into_iter()
        .flatten()
        .collect();
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of non-discarded vertices mapped exactly to their ground truth.
pub fn p2p_accuracy(pred: &[usize], gt: &[Option<usize>]) -> Result<f64, EvalError> {
    check_pair(pred, gt)?;
    let (hit, total) = pred
        .iter()
        .zip(gt)
        .filter_map(|(&p, g)| g.map(|g| p == g))
        .fold((0usize, 0usize), |(h, t), ok| (h + ok as usize, t + 1));
    Ok(hit as f64 / total as f64)
}

/// Fraction of evaluated vertices with error at most each tolerance.
pub fn cumulative_curve(errors: &[Option<f64>], tolerances: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if tolerances.windows(2).any(|w| w[0] > w[1]) || tolerances.iter().any(|&t| !(t >= 0.0)) {
        return Err(EvalError::Tolerances);
    }
    let mut e: Vec<f64> = errors.iter().flatten().copied().collect();
    if e.is_empty() {
        return Err(EvalError::Empty);
    }
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    Ok(tolerances
        .iter()
        .map(|&t| (t, e.partition_point(|&x| x <= t) as f64 / n))
        .collect())
}

/// `steps + 1` evenly spaced tolerances from 0 to `max(limit, max error)`.
pub fn default_tolerances(errors: &[Option<f64>], limit: f64, steps: usize) -> Vec<f64> {
    let top = errors.iter().flatten().copied().fold(limit, f64::max);
    let mut t: Vec<f64> = (0..=steps).map(|k| top * k as f64 / steps as f64).collect();
    // Guard against rounding below the largest error.
    if let Some(last) = t.last_mut() {
        *last = top;
    }
    t
}

/// Parameters of the round-trip distortion metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleOptions {
    /// Sampled ordered pairs when the full sum is not used.
    pub budget: usize,
    /// Meshes up to this size always use the full sum.
    pub full_up_to: usize,
    /// Contribution of a pair whose round-trip images coincide.
    pub cap: f64,
    pub seed: u64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            budget: 1_000_000,
            full_up_to: 2000,
            cap: 1.0,
            seed: 0,
        }
    }
}

fn cycle_term(d: f64, d_round: f64, cap: f64) -> f64 {
    if d_round == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            cap
        }
    } else {
        (1.0 - d / d_round).abs()
    }
}

/// Mean over ordered vertex pairs of `|1 - d(x1, x2) / d(x1', x2')|` where
/// `x'` is the image of `x` after mapping to the other shape and back.
pub fn cycle_ge<T: Real>(
    map_xy: &[usize],
    map_yx: &[usize],
    source: &TriMesh<T>,
    options: &CycleOptions,
) -> Result<f64, EvalError> {
    let n = source.num_vertices();
    if map_xy.len() != n {
        return Err(EvalError::Length {
            expected: n,
            got: map_xy.len(),
        });
    }
    check_range(map_xy, map_yx.len())?;
    check_range(map_yx, n)?;
    let round: Vec<usize> = map_xy.iter().map(|&y| map_yx[y]).collect();
    if n <= options.full_up_to || options.budget >= n * n {
        let d = geodesic::all_pairs(source)?;
        let mut sum = 0.0;
        for a in 0..n {
            for b in 0..n {
                let d_round = d[[round[a], round[b]]].to_f64_lossy();
                sum += cycle_term(d[[a, b]].to_f64_lossy(), d_round, options.cap);
            }
        }
        return Ok(sum / (n * n) as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let pairs: Vec<(usize, usize)> = (0..options.budget)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
        .collect();
    let rpairs: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (round[a], round[b])).collect();
    let d = pair_distances(source, &pairs)?;
    let dr = pair_distances(source, &rpairs)?;
    let sum: f64 = d
        .iter()
        .zip(&dr)
        .map(|(a, b)| cycle_term(a.to_f64_lossy(), b.to_f64_lossy(), options.cap))
        .sum();
    Ok(sum / options.budget as f64)
}

/// Discard thresholds relative to the mean edge length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardFactor {
    /// 0.2 × mean edge length (remeshed shapes).
    Remeshed,
    /// 2 × mean edge length (raw scans).
    RawScan,
}

impl DiscardFactor {
    pub fn factor(self) -> f64 {
        match self {
            DiscardFactor::Remeshed => 0.2,
            DiscardFactor::RawScan => 2.0,
        }
    }
}

/// Marks vertices whose distance to the ground-truth surface exceeds the
/// factor times the mean edge length.
pub fn build_gt_discards(distances: &[f64], mean_edge_length: f64, factor: DiscardFactor) -> Vec<bool> {
    let limit = factor.factor() * mean_edge_length;
    distances.iter().map(|&d| d > limit).collect()
}

/// Clears ground-truth entries flagged in `discard`.
pub fn apply_discards(gt: &mut [Option<usize>], discard: &[bool]) {
    for (g, &d) in gt.iter_mut().zip(discard) {
        if d {
            *g = None;
        }
    }
}

/// Serialized metric summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mge: f64,
    pub cycle_ge: Option<f64>,
    pub p2p: f64,
    pub curve: Vec<(f64, f64)>,
    pub normalization: Normalization,
    pub evaluated: usize,
    pub discarded: usize,
}

impl MetricReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("tolerance,fraction\n");
        for (t, f) in &self.curve {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

/// MGE, p2p accuracy and the cumulative curve (over default tolerances when
/// `tolerances` is `None`).
pub fn evaluate<T: Real>(
    pred: &[usize],
    gt: &[Option<usize>],
    target: &TriMesh<T>,
    normalization: Normalization,
    tolerances: Option<&[f64]>,
) -> Result<MetricReport, EvalError> {
    let errors = geodesic_errors(pred, gt, target, normalization)?;
    let evaluated = errors.iter().flatten().count();
    let mge = errors.iter().flatten().sum::<f64>() / evaluated as f64;
    let tol = match tolerances {
        Some(t) => t.to_vec(),
        None => default_tolerances(&errors, 0.25, 100),
    };
    Ok(MetricReport {
        mge,
        cycle_ge: None,
        p2p: p2p_accuracy(pred, gt)?,
        curve: cumulative_curve(&errors, &tol)?,
        normalization,
        evaluated,
        discarded: gt.len() - evaluated,
    })
}

/// Reads one integer per line; negative entries are discarded vertices.
pub fn read_index_map(path: impl AsRef<Path>) -> Result<GroundTruth, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: i64 = t.parse().map_err(|_| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected an integer, got {t:?}"),
        })?;
        out.push(usize::try_from(v).ok());
    }
    Ok(out)
}

/// Reads a prediction: like [`read_index_map`] but every entry must be
/// present.
pub fn read_point_map(path: impl AsRef<Path>) -> Result<Vec<usize>, EvalError> {
    let path = path.as_ref();
    let map = read_index_map(path)?;
    map.iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| EvalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "negative index in a point map".into(),
            })
        })
        .collect()
}

/// Writes one index per line, `-1` for `None`.
pub fn write_index_map(path: impl AsRef<Path>, map: &[Option<usize>]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut s = String::with_capacity(map.len() * 6);
    for v in map {
        match v {
            Some(i) => s.push_str(&i.to_string()),
            None => s.push_str("-1"),
        }
        s.push('\n');
    }
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(io)
}

pub fn write_point_map(path: impl AsRef<Path>, map: &[usize]) -> Result<(), EvalError> {
    let m: Vec<Option<usize>> = map.iter().map(|&v| Some(v)).collect();
    write_index_map(path, &m)
}
