//! The five self-supervised criteria and their weighted sum.
//!
//! `Π_xy` is the `n_x×n_y` row-stochastic association from `X` to `Y`; `C`
//! are `n×3` center positions and `D` center-to-center geodesic distances.
//! Every criterion is a sum of squared Frobenius norms, symmetric in the two
//! shapes.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum CriteriaError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("level {level}: {criterion} is not finite")]
    NonFinite { level: usize, criterion: Criterion },
    #[error("invalid weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Geodesic,
    Cycle,
    SelfReconstruction,
    Matching,
    Rigidity,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Geodesic,
        Criterion::Cycle,
        Criterion::SelfReconstruction,
        Criterion::Matching,
        Criterion::Rigidity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Geodesic => "geodesic",
            Criterion::Cycle => "cycle",
            Criterion::SelfReconstruction => "self_reconstruction",
            Criterion::Matching => "matching",
            Criterion::Rigidity => "rigidity",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Criterion weights of one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelWeights {
    pub geodesic: f64,
    pub cycle: f64,
    pub self_reconstruction: f64,
    pub matching: f64,
    pub rigidity: f64,
}

impl Default for LevelWeights {
    fn default() -> Self {
        Self {
            geodesic: 0.01,
            cycle: 1.0,
            self_reconstruction: 1.0,
            matching: 1.0,
            rigidity: 0.1,
        }
    }
}

impl LevelWeights {
    pub fn get(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Geodesic => self.geodesic,
            Criterion::Cycle => self.cycle,
            Criterion::SelfReconstruction => self.self_reconstruction,
            Criterion::Matching => self.matching,
            Criterion::Rigidity => self.rigidity,
        }
    }

    pub fn set(&mut self, c: Criterion, w: f64) {
        match c {
            Criterion::Geodesic => self.geodesic = w,
            Criterion::Cycle => self.cycle = w,
            Criterion::SelfReconstruction => self.self_reconstruction = w,
            Criterion::Matching => self.matching = w,
            Criterion::Rigidity => self.rigidity = w,
        }
    }

    pub fn zero() -> Self {
        Self {
            geodesic: 0.0,
            cycle: 0.0,
            self_reconstruction: 0.0,
            matching: 0.0,
            rigidity: 0.0,
        }
    }
}

/// Weights for every level, finest first. The geodesic weight of the vertex
/// level is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub levels: Vec<LevelWeights>,
}

impl LossWeights {
    /// The same weights at every level, with the vertex-level geodesic weight
    /// cleared.
    pub fn uniform(w: LevelWeights, num_levels: usize) -> Self {
        let mut levels = vec![w; num_levels];
        if let Some(first) = levels.first_mut() {
            first.geodesic = 0.0;
        }
        Self { levels }
    }

    pub fn validate(&self) -> Result<(), CriteriaError> {
        for (l, w) in self.levels.iter().enumerate() {
            for c in Criterion::ALL {
                let x = w.get(c);
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(CriteriaError::Weights(format!("level {l} {c} weight {x}")));
                }
            }
        }
        if self.levels.first().is_some_and(|w| w.geodesic != 0.0) {
            return Err(CriteriaError::Weights(
                "the vertex-level geodesic weight must be 0".into(),
            ));
        }
        Ok(())
    }
}

/// Raw criterion values of one level; `None` where the criterion was not
/// evaluated (zero weight).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelLosses {
    pub geodesic: Option<f64>,
    pub cycle: Option<f64>,
    pub self_reconstruction: Option<f64>,
    pub matching: Option<f64>,
    pub rigidity: Option<f64>,
}

impl LevelLosses {
    pub fn get(&self, c: Criterion) -> Option<f64> {
        match c {
            Criterion::Geodesic => self.geodesic,
            Criterion::Cycle => self.cycle,
            Criterion::SelfReconstruction => self.self_reconstruction,
            Criterion::Matching => self.matching,
            Criterion::Rigidity => self.rigidity,
        }
    }

    fn set(&mut self, c: Criterion, v: f64) {
        let slot = match c {
            Criterion::Geodesic => &mut self.geodesic,
            Criterion::Cycle => &mut self.cycle,
            Criterion::SelfReconstruction => &mut self.self_reconstruction,
            Criterion::Matching => &mut self.matching,
            Criterion::Rigidity => &mut self.rigidity,
        };
        *slot = Some(v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelLosses>,
    pub total: f64,
}

/// Criterion nodes of one level.
#[derive(Debug, Clone, Copy, Default)]
pub struct LevelTerms {
    pub geodesic: Option<NodeId>,
    pub cycle: Option<NodeId>,
    pub self_reconstruction: Option<NodeId>,
    pub matching: Option<NodeId>,
    pub rigidity: Option<NodeId>,
}

impl LevelTerms {
    pub fn get(&self, c: Criterion) -> Option<NodeId> {
        match c {
            Criterion::Geodesic => self.geodesic,
            Criterion::Cycle => self.cycle,
            Criterion::SelfReconstruction => self.self_reconstruction,
            Criterion::Matching => self.matching,
            Criterion::Rigidity => self.rigidity,
        }
    }
}

fn sq_diff<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = tape.sub(a, b);
    tape.sum_squares(d)
}

/// `‖Π_xy D_y Π_xyᵀ - D_x‖² + ‖Π_yx D_x Π_yxᵀ - D_y‖²` for symmetric `D`.
pub fn geodesic_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pxy: NodeId,
    pyx: NodeId,
    dx: Arc<Array2<T>>,
    dy: Arc<Array2<T>>,
) -> NodeId {
    let a = tape.distortion(pxy, dy.clone(), dx.clone());
    let b = tape.distortion(pyx, dx, dy);
    tape.add(a, b)
}

/// `‖Π_xy Π_yx C_x - C_x‖² + ‖Π_yx Π_xy C_y - C_y‖²`.
pub fn cycle_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pxy: NodeId,
    pyx: NodeId,
    cx: NodeId,
    cy: NodeId,
) -> NodeId {
    let mut side = |first: NodeId, second: NodeId, c: NodeId| {
        let there = tape.matmul(second, c);
        let back = tape.matmul(first, there);
        sq_diff(tape, back, c)
    };
    let a = side(pxy, pyx, cx);
    let b = side(pyx, pxy, cy);
    tape.add(a, b)
}

/// `‖Π_xx C_x - C_x‖² + ‖Π_yy C_y - C_y‖²`.
pub fn self_reconstruction_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pxx: NodeId,
    cx: NodeId,
    pyy: NodeId,
    cy: NodeId,
) -> NodeId {
    let mut side = |p: NodeId, c: NodeId| {
        let r = tape.matmul(p, c);
        sq_diff(tape, r, c)
    };
    let a = side(pxx, cx);
    let b = side(pyy, cy);
    tape.add(a, b)
}

/// `‖C_x' - Π_xy C_y‖² + ‖C_y' - Π_yx C_x‖²` with `C'` the deformed centers.
pub fn matching_on_tape<T: Real>(
    tape: &mut Tape<T>,
    deformed_x: NodeId,
    pxy: NodeId,
    cy: NodeId,
    deformed_y: NodeId,
    pyx: NodeId,
    cx: NodeId,
) -> NodeId {
    let mut side = |def: NodeId, p: NodeId, c: NodeId| {
        let target = tape.matmul(p, c);
        sq_diff(tape, def, target)
    };
    let a = side(deformed_x, pxy, cy);
    let b = side(deformed_y, pyx, cx);
    tape.add(a, b)
}

/// Weighted sum over levels and criteria. Zero-weight terms are skipped
/// even when present.
pub fn total_on_tape<T: Real>(
    tape: &mut Tape<T>,
    terms: &[LevelTerms],
    weights: &LossWeights,
) -> Result<(NodeId, LossReport), CriteriaError> {
    let mut total = tape.constant(Array2::zeros((1, 1)));
    let mut levels = Vec::with_capacity(terms.len());
    for (l, (t, w)) in terms.iter().zip(&weights.levels).enumerate() {
        let mut losses = LevelLosses::default();
        for c in Criterion::ALL {
            let Some(node) = t.get(c) else { continue };
            let v = tape.scalar(node).to_f64_lossy();
            if !v.is_finite() {
                return Err(CriteriaError::NonFinite {
                    level: l,
                    criterion: c,
                });
            }
            losses.set(c, v);
            let lambda = w.get(c);
            if lambda != 0.0 {
                let scaled = tape.scale(node, T::lit(lambda));
                total = tape.add(total, scaled);
            }
        }
        levels.push(losses);
    }
    let value = tape.scalar(total).to_f64_lossy();
    Ok((total, LossReport { levels, total: value }))
}

fn expect<T>(what: &'static str, m: &ArrayView2<T>, expected: (usize, usize)) -> Result<(), CriteriaError> {
    if m.dim() != expected {
        return Err(CriteriaError::Shape {
            what,
            expected,
            got: m.dim(),
        });
    }
    Ok(())
}

fn with_tape<T: Real>(inputs: &[ArrayView2<T>], f: impl FnOnce(&mut Tape<T>, &[NodeId]) -> NodeId) -> T {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| tape.constant(a.to_owned())).collect();
    let out = f(&mut tape, &ids);
    tape.scalar(out)
}

pub fn geodesic_loss<T: Real>(
    pxy: ArrayView2<T>,
    pyx: ArrayView2<T>,
    dx: ArrayView2<T>,
    dy: ArrayView2<T>,
) -> Result<T, CriteriaError> {
    let (nx, ny) = pxy.dim();
    expect("Π_yx", &pyx, (ny, nx))?;
    expect("D_x", &dx, (nx, nx))?;
    expect("D_y", &dy, (ny, ny))?;
    let (dx, dy) = (Arc::new(dx.to_owned()), Arc::new(dy.to_owned()));
    Ok(with_tape(&[pxy, pyx], |t, i| {
        geodesic_on_tape(t, i[0], i[1], dx, dy)
    }))
}

pub fn cycle_loss<T: Real>(
    pxy: ArrayView2<T>,
    pyx: ArrayView2<T>,
    cx: ArrayView2<T>,
    cy: ArrayView2<T>,
) -> Result<T, CriteriaError> {
    let (nx, ny) = pxy.dim();
    expect("Π_yx", &pyx, (ny, nx))?;
    expect("C_x", &cx, (nx, 3))?;
    expect("C_y", &cy, (ny, 3))?;
    Ok(with_tape(&[pxy, pyx, cx, cy], |t, i| {
        cycle_on_tape(t, i[0], i[1], i[2], i[3])
    }))
}

pub fn self_reconstruction_loss<T: Real>(
    pxx: ArrayView2<T>,
    cx: ArrayView2<T>,
    pyy: ArrayView2<T>,
    cy: ArrayView2<T>,
) -> Result<T, CriteriaError> {
    let (nx, ny) = (cx.nrows(), cy.nrows());
    expect("Π_xx", &pxx, (nx, nx))?;
    expect("Π_yy", &pyy, (ny, ny))?;
    expect("C_x", &cx, (nx, 3))?;
    expect("C_y", &cy, (ny, 3))?;
    Ok(with_tape(&[pxx, cx, pyy, cy], |t, i| {
        self_reconstruction_on_tape(t, i[0], i[1], i[2], i[3])
    }))
}

pub fn matching_loss<T: Real>(
    deformed_x: ArrayView2<T>,
    pxy: ArrayView2<T>,
    cy: ArrayView2<T>,
    deformed_y: ArrayView2<T>,
    pyx: ArrayView2<T>,
    cx: ArrayView2<T>,
) -> Result<T, CriteriaError> {
    let (nx, ny) = pxy.dim();
    expect("Π_yx", &pyx, (ny, nx))?;
    expect("C_x", &cx, (nx, 3))?;
    expect("C_y", &cy, (ny, 3))?;
    expect("deformed C_x", &deformed_x, (nx, 3))?;
    expect("deformed C_y", &deformed_y, (ny, 3))?;
    Ok(with_tape(&[deformed_x, pxy, cy, deformed_y, pyx, cx], |t, i| {
        matching_on_tape(t, i[0], i[1], i[2], i[3], i[4], i[5])
    }))
}
