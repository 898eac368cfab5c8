use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{clip_global_norm, Adam, MatchConfig};
use crate::association::{
    associations_from_similarity, extract_point_map, similarity_on_tape, AssociationError, CombineLayout,
    FeatureField,
};
use crate::autodiff::{NodeId, Tape};
use crate::criteria::{self, CriteriaError, LevelTerms, LossReport, LossWeights};
use crate::deformation::{
    blend_weights, DeformationError, DeformationLayout, DeformationParams, DeformedNodes,
};
use crate::geodesic::{self, GeodesicError};
use crate::hash::Fnv1a;
use crate::hierarchy::{build_hierarchy, HierarchyError, PatchHierarchy};
use crate::kernels::{points_to_rows, rows_to_points};
use crate::mesh::TriMesh;
use crate::scalar::{Real, Vec3};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    Deformation(#[from] DeformationError),
    #[error(transparent)]
    Criteria(CriteriaError),
    #[error("optimization diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        partial: Box<PartialMatch>,
    },
}

/// What is known when an optimization diverges.
#[derive(Debug, Clone, Default)]
pub struct PartialMatch {
    pub history: Vec<StepRecord>,
    pub map_xy: Vec<usize>,
    pub map_yx: Vec<usize>,
}

/// Loss of one evaluated step. `step` counts completed updates, so the
/// record with `step == 0` is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub grad_norm: Option<f64>,
    pub loss: LossReport,
}

#[derive(Debug, Clone, Default)]
pub struct MatchOptions {
    /// Directory for cached center distance matrices.
    pub cache_dir: Option<PathBuf>,
}

/// Outcome of [`match_pair`].
#[derive(Debug, Clone)]
pub struct MatchResult<T> {
    /// Target vertex on `Y` of every vertex of `X`.
    pub map_xy: Vec<usize>,
    pub map_yx: Vec<usize>,
    /// Maps extracted from the initial parameters.
    pub initial_map_xy: Vec<usize>,
    pub initial_map_yx: Vec<usize>,
    /// Final `(Π_xy, Π_yx)` of every coarse level (index 0 is level 1).
    pub associations: Vec<(Array2<T>, Array2<T>)>,
    /// Deformed vertex positions of `X` and `Y` at every level.
    pub deformed_x: Vec<Vec<Vec3<T>>>,
    pub deformed_y: Vec<Vec<Vec3<T>>>,
    pub history: Vec<StepRecord>,
    pub hierarchy_x: PatchHierarchy<T>,
    pub hierarchy_y: PatchHierarchy<T>,
    /// Rotation parameter rows reset to the identity after degenerating.
    pub repaired_rotations: usize,
}

/// Seed of a shape's feature field: depends on the run seed and on the
/// shape itself, never on which side of the pair it is.
pub fn feature_seed<T: Real>(mesh: &TriMesh<T>, seed: u64) -> u64 {
    Fnv1a::new()
        .write(b"features")
        .write_u64(seed)
        .write_u64(geodesic::mesh_fingerprint(mesh))
        .finish()
}

/// Similarity transform taking a mesh to unit area around the origin.
#[derive(Debug, Clone, Copy)]
struct Frame<T> {
    center: Vec3<T>,
    scale: T,
}

impl<T: Real> Frame<T> {
    fn of(mesh: &TriMesh<T>) -> Self {
        Self {
            center: mesh.centroid(),
            scale: T::one() / mesh.surface_area().sqrt(),
        }
    }

    fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        crate::scalar::scale3(crate::scalar::sub3(p, self.center), self.scale)
    }

    fn undo(&self, p: Vec3<T>) -> Vec3<T> {
        crate::scalar::add3(crate::scalar::scale3(p, T::one() / self.scale), self.center)
    }
}

/// Constant data of one shape.
struct Shape<T> {
    frame: Frame<T>,
    hierarchy: PatchHierarchy<T>,
    combine: CombineLayout<T>,
    deform: Vec<DeformationLayout<T>>,
    centers: Vec<Array2<T>>,
    distances: Vec<Option<Arc<Array2<T>>>>,
}

fn cached_distances<T: Real>(
    mesh: &TriMesh<T>,
    centers: &[usize],
    config: &MatchConfig,
    cache: Option<&Path>,
) -> Result<Array2<T>, MatchError> {
    let Some(dir) = cache else {
        return Ok(geodesic::center_matrix(mesh, centers, config.normalization)?.values);
    };
    let name = format!(
        "{:016x}-{:016x}-{}.pmdm",
        geodesic::mesh_fingerprint(mesh),
        geodesic::center_hash(centers, centers),
        config.normalization.tag()
    );
    let path = dir.join(name);
    match geodesic::load_matrix::<T>(&path, mesh.num_vertices(), centers, centers) {
        Ok(m) => return Ok(m.values),
        Err(GeodesicError::CacheNotFound(_)) => {}
        Err(e) => log::warn!("ignoring geodesic cache entry: {e}"),
    }
    let m = geodesic::center_matrix(mesh, centers, config.normalization)?;
    if let Err(e) = std::fs::create_dir_all(dir)
        .map_err(|source| GeodesicError::Io {
            path: dir.to_path_buf(),
            source,
        })
        .and_then(|_| geodesic::store_matrix(&m, mesh.num_vertices(), &path))
    {
        log::warn!("could not write geodesic cache: {e}");
    }
    Ok(m.values)
}

impl<T: Real> Shape<T> {
    fn new(
        mesh: &TriMesh<T>,
        config: &MatchConfig,
        weights: &LossWeights,
        options: &MatchOptions,
    ) -> Result<(Self, TriMesh<T>), MatchError> {
        let frame = Frame::of(mesh);
        let local = mesh
            .map_vertices(|p| frame.apply(p))
            .expect("similarity keeps validity");
        let hierarchy = build_hierarchy(&local, &config.patch_counts, config.seed)?;
        let combine = CombineLayout::new(&hierarchy, config.smoothing_steps);
        let sigma = T::lit(config.sigma_scale);
        let mut deform = Vec::new();
        let mut centers = Vec::new();
        let mut distances = Vec::new();
        for (l, lw) in weights.levels.iter().enumerate() {
            let w = blend_weights(&local, &hierarchy, l, sigma)?;
            deform.push(DeformationLayout::new(&local, &hierarchy, &w));
            let level = hierarchy.level(l);
            centers.push(points_to_rows(&level.center_positions));
            distances.push(if lw.geodesic > 0.0 {
                Some(Arc::new(cached_distances(
                    mesh,
                    &level.centers,
                    config,
                    options.cache_dir.as_deref(),
                )?))
            } else {
                None
            });
        }
        Ok((
            Self {
                frame,
                hierarchy,
                combine,
                deform,
                centers,
                distances,
            },
            local,
        ))
    }

    fn initial_params(
        &self,
        local: &TriMesh<T>,
        dims: &[usize],
        seed: u64,
        geometric: bool,
    ) -> Result<Vec<Array2<T>>, MatchError> {
        let mut field = FeatureField::random(&self.hierarchy, dims, seed)?;
        if geometric {
            field.seed_geometry(local, seed)?;
        }
        let mut params = field.levels;
        for level in self.hierarchy.levels() {
            let p = DeformationParams::identity(&level.center_positions);
            params.push(p.rot6);
            params.push(p.translation);
        }
        Ok(params)
    }
}

/// Nodes of one shape's parameters and derived quantities.
struct ShapeNodes {
    leaves: Vec<NodeId>,
    normalized: Vec<NodeId>,
    deformed: Vec<DeformedNodes>,
    translations: Vec<NodeId>,
    centers: Vec<NodeId>,
}

struct Forward<T> {
    tape: Tape<T>,
    loss: NodeId,
    report: LossReport,
    leaves: Vec<NodeId>,
    /// `(Π_xy, Π_yx)` per level.
    pis: Vec<(NodeId, NodeId)>,
    /// Deformed vertex positions `(X, Y)` per level.
    deformed: Vec<(NodeId, NodeId)>,
}

impl<T: Real> Forward<T> {
    fn maps(&self) -> (Vec<usize>, Vec<usize>) {
        (
            extract_point_map(self.tape.value(self.pis[0].0).view()),
            extract_point_map(self.tape.value(self.pis[0].1).view()),
        )
    }
}

struct PairModel<T> {
    x: Shape<T>,
    y: Shape<T>,
    temperature: T,
    levels: usize,
}

impl<T: Real> PairModel<T> {
    fn shape_nodes(
        &self,
        tape: &mut Tape<T>,
        shape: &Shape<T>,
        params: &[Array2<T>],
    ) -> Result<ShapeNodes, MatchError> {
        let n = self.levels;
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.variable(p.clone())).collect();
        let combined = shape.combine.combine_on_tape(tape, &leaves[..n]);
        let mut normalized = Vec::with_capacity(n);
        for &c in &combined {
            normalized.push(tape.normalize_rows(c).map_err(AssociationError::from)?);
        }
        let mut deformed = Vec::with_capacity(n);
        let mut translations = Vec::with_capacity(n);
        for l in 0..n {
            let (r, u) = (leaves[n + 2 * l], leaves[n + 2 * l + 1]);
            deformed.push(shape.deform[l].deform_on_tape(tape, r, u)?);
            translations.push(u);
        }
        let centers = shape.centers.iter().map(|c| tape.constant(c.clone())).collect();
        Ok(ShapeNodes {
            leaves,
            normalized,
            deformed,
            translations,
            centers,
        })
    }

    fn forward(
        &self,
        px: &[Array2<T>],
        py: &[Array2<T>],
        weights: &LossWeights,
    ) -> Result<Forward<T>, MatchError> {
        let mut tape = Tape::new();
        let x = self.shape_nodes(&mut tape, &self.x, px)?;
        let y = self.shape_nodes(&mut tape, &self.y, py)?;
        let mut terms = Vec::with_capacity(self.levels);
        let mut pis = Vec::with_capacity(self.levels);
        for (l, w) in weights.levels.iter().enumerate() {
            let s = similarity_on_tape(&mut tape, x.normalized[l], y.normalized[l])?;
            let (pxy, pyx) = associations_from_similarity(&mut tape, s, self.temperature);
            pis.push((pxy, pyx));
            let (cx, cy) = (x.centers[l], y.centers[l]);
            let mut t = LevelTerms::default();
            if w.geodesic > 0.0 {
                let dx = self.x.distances[l]
                    .clone()
                    .expect("distances built for weighted levels");
                let dy = self.y.distances[l]
                    .clone()
                    .expect("distances built for weighted levels");
                t.geodesic = Some(criteria::geodesic_on_tape(&mut tape, pxy, pyx, dx, dy));
            }
            if w.cycle > 0.0 {
                t.cycle = Some(criteria::cycle_on_tape(&mut tape, pxy, pyx, cx, cy));
            }
            if w.self_reconstruction > 0.0 {
                let sxx = similarity_on_tape(&mut tape, x.normalized[l], x.normalized[l])?;
                let pxx = tape.softmax_rows(sxx, self.temperature);
                let syy = similarity_on_tape(&mut tape, y.normalized[l], y.normalized[l])?;
                let pyy = tape.softmax_rows(syy, self.temperature);
                t.self_reconstruction =
                    Some(criteria::self_reconstruction_on_tape(&mut tape, pxx, cx, pyy, cy));
            }
            if w.matching > 0.0 {
                t.matching = Some(criteria::matching_on_tape(
                    &mut tape,
                    x.deformed[l].centers,
                    pxy,
                    cy,
                    y.deformed[l].centers,
                    pyx,
                    cx,
                ));
            }
            if w.rigidity > 0.0 {
                let a =
                    self.x.deform[l].rigidity_on_tape(&mut tape, x.deformed[l].rotations, x.translations[l]);
                let b =
                    self.y.deform[l].rigidity_on_tape(&mut tape, y.deformed[l].rotations, y.translations[l]);
                t.rigidity = Some(tape.add(a, b));
            }
            terms.push(t);
        }
        let (loss, report) =
            criteria::total_on_tape(&mut tape, &terms, weights).map_err(MatchError::Criteria)?;
        let leaves = x.leaves.iter().chain(&y.leaves).copied().collect();
        let deformed = x
            .deformed
            .iter()
            .zip(&y.deformed)
            .map(|(a, b)| (a.positions, b.positions))
            .collect();
        Ok(Forward {
            tape,
            loss,
            report,
            leaves,
            pis,
            deformed,
        })
    }
}

type ParamHalves<'a, T> = (&'a [Array2<T>], &'a [Array2<T>]);

/// The pair loss as a function of all parameters: feature levels of `X`,
/// then rotation and translation of every level of `X`, then the same for
/// `Y`.
pub struct PairObjective<T> {
    model: PairModel<T>,
    initial_x: Vec<Array2<T>>,
    initial_y: Vec<Array2<T>>,
}

impl<T: Real> PairObjective<T> {
    pub fn new(
        x: &TriMesh<T>,
        y: &TriMesh<T>,
        config: &MatchConfig,
        options: &MatchOptions,
    ) -> Result<Self, MatchError> {
        config.validate().map_err(MatchError::Config)?;
        let weights = config.loss_weights();
        let dims = config.feature_dims();
        let (sx, local_x) = Shape::new(x, config, &weights, options)?;
        let (sy, local_y) = Shape::new(y, config, &weights, options)?;
        let initial_x = sx.initial_params(
            &local_x,
            &dims,
            feature_seed(x, config.seed),
            config.geometric_seeding,
        )?;
        let initial_y = sy.initial_params(
            &local_y,
            &dims,
            feature_seed(y, config.seed),
            config.geometric_seeding,
        )?;
        Ok(Self {
            model: PairModel {
                x: sx,
                y: sy,
                temperature: T::lit(config.temperature),
                levels: config.num_levels(),
            },
            initial_x,
            initial_y,
        })
    }

    pub fn initial_params(&self) -> Vec<Array2<T>> {
        [self.initial_x.clone(), self.initial_y.clone()].concat()
    }

    fn split<'a>(&self, params: &'a [Array2<T>]) -> Result<ParamHalves<'a, T>, MatchError> {
        let n = self.initial_x.len();
        if params.len() != n + self.initial_y.len() {
            return Err(MatchError::Config(format!(
                "expected {} parameter blocks, got {}",
                n + self.initial_y.len(),
                params.len()
            )));
        }
        Ok(params.split_at(n))
    }

    /// Loss value and per-criterion report.
    pub fn loss(&self, params: &[Array2<T>], weights: &LossWeights) -> Result<(T, LossReport), MatchError> {
        let (px, py) = self.split(params)?;
        let f = self.model.forward(px, py, weights)?;
        Ok((f.tape.scalar(f.loss), f.report))
    }

    /// Loss value and its gradient with respect to every parameter block.
    pub fn gradient(
        &self,
        params: &[Array2<T>],
        weights: &LossWeights,
    ) -> Result<(T, Vec<Array2<T>>), MatchError> {
        let (px, py) = self.split(params)?;
        let f = self.model.forward(px, py, weights)?;
        let grads = f.tape.backward(f.loss).map_err(|e| MatchError::Diverged {
            step: 0,
            reason: e.to_string(),
            partial: Box::default(),
        })?;
        Ok((
            f.tape.scalar(f.loss),
            f.leaves.iter().map(|&id| grads.get(id)).collect(),
        ))
    }
}

/// Active weights during `epoch` (1-based) under the coarse-to-fine warm-up.
fn warmup_weights(weights: &LossWeights, warmup_epochs: usize, epoch: usize) -> LossWeights {
    if warmup_epochs == 0 {
        return weights.clone();
    }
    let top = weights.levels.len() - 1;
    let joined = epoch.saturating_sub(1) / warmup_epochs;
    let lowest = top.saturating_sub(joined);
    let mut w = weights.clone();
    for lw in &mut w.levels[..lowest] {
        *lw = crate::criteria::LevelWeights::zero();
    }
    w
}

pub fn match_pair<T: Real>(
    x: &TriMesh<T>,
    y: &TriMesh<T>,
    config: &MatchConfig,
) -> Result<MatchResult<T>, MatchError> {
    match_pair_with(x, y, config, &MatchOptions::default())
}

/// Optimizes features and deformations of both shapes jointly and extracts
/// vertex maps from the finest associations.
pub fn match_pair_with<T: Real>(
    x: &TriMesh<T>,
    y: &TriMesh<T>,
    config: &MatchConfig,
    options: &MatchOptions,
) -> Result<MatchResult<T>, MatchError> {
    let weights = config.loss_weights();
    let objective = PairObjective::new(x, y, config, options)?;
    let model = objective.model;
    let mut px = objective.initial_x;
    let mut py = objective.initial_y;
    let n_params = px.len();
    let mut adam = Adam::new(&[px.clone(), py.clone()].concat());
    let mut history = Vec::new();
    let mut initial: Option<(Vec<usize>, Vec<usize>)> = None;
    let mut repaired = 0;
    let total_steps = config.epochs * config.steps_per_epoch;

    let diverged =
        |step: usize, reason: String, history: &[StepRecord], maps: Option<&(Vec<usize>, Vec<usize>)>| {
            let (map_xy, map_yx) = maps.cloned().unwrap_or_default();
            MatchError::Diverged {
                step,
                reason,
                partial: Box::new(PartialMatch {
                    history: history.to_vec(),
                    map_xy,
                    map_yx,
                }),
            }
        };

    let mut last_maps: Option<(Vec<usize>, Vec<usize>)> = None;
    for step in 0..total_steps {
        let epoch = step / config.steps_per_epoch + 1;
        let lr = config.learning_rate.rate(epoch);
        let active = warmup_weights(&weights, config.warmup_epochs, epoch);
        let f = match model.forward(&px, &py, &active) {
            Ok(f) => f,
            Err(MatchError::Criteria(e)) => {
                return Err(diverged(step, e.to_string(), &history, last_maps.as_ref()))
            }
            Err(MatchError::Association(AssociationError::ZeroRow { row })) => {
                return Err(diverged(
                    step,
                    format!("feature row {row} collapsed to zero"),
                    &history,
                    last_maps.as_ref(),
                ))
            }
            Err(e) => return Err(e),
        };
        let maps = f.maps();
        if initial.is_none() {
            initial = Some(maps.clone());
        }
        last_maps = Some(maps);
        let grads = f
            .tape
            .backward(f.loss)
            .map_err(|e| diverged(step, e.to_string(), &history, last_maps.as_ref()))?;
        let mut g: Vec<Array2<T>> = f.leaves.iter().map(|&id| grads.get(id)).collect();
        let norm = clip_global_norm(&mut g, T::lit(config.clip_norm));
        history.push(StepRecord {
            step,
            epoch,
            learning_rate: lr,
            grad_norm: Some(norm.to_f64_lossy()),
            loss: f.report,
        });
        let mut all = [std::mem::take(&mut px), std::mem::take(&mut py)].concat();
        adam.step(&mut all, &g, T::lit(lr))
            .map_err(|e| diverged(step, e.to_string(), &history, last_maps.as_ref()))?;
        py = all.split_off(n_params);
        px = all;
        for params in [&mut px, &mut py] {
            let n = config.num_levels();
            for l in 0..n {
                let mut p = DeformationParams {
                    rot6: std::mem::take(&mut params[n + 2 * l]),
                    translation: Array2::zeros((0, 3)),
                };
                let fixed = p.repair_rotations();
                if !fixed.is_empty() {
                    log::warn!("level {l}: reset {} degenerate rotations", fixed.len());
                    repaired += fixed.len();
                }
                params[n + 2 * l] = p.rot6;
            }
        }
        if (step + 1) % config.steps_per_epoch == 0 {
            log::info!("epoch {epoch}: loss {:.6e}", history.last().unwrap().loss.total);
        }
    }

    let f = match model.forward(&px, &py, &weights) {
        Ok(f) => f,
        Err(MatchError::Criteria(e)) => {
            return Err(diverged(total_steps, e.to_string(), &history, last_maps.as_ref()))
        }
        Err(e) => return Err(e),
    };
    history.push(StepRecord {
        step: total_steps,
        epoch: config.epochs,
        learning_rate: 0.0,
        grad_norm: None,
        loss: f.report.clone(),
    });
    let (map_xy, map_yx) = f.maps();
    let (initial_map_xy, initial_map_yx) = initial.unwrap_or_else(|| (map_xy.clone(), map_yx.clone()));
    let associations = f.pis[1..]
        .iter()
        .map(|&(a, b)| (f.tape.value(a).clone(), f.tape.value(b).clone()))
        .collect();
    let unframe = |frame: &Frame<T>, node: NodeId| -> Vec<Vec3<T>> {
        rows_to_points(f.tape.value(node).view())
            .into_iter()
            .map(|p| frame.undo(p))
            .collect()
    };
    let deformed_x = f
        .deformed
        .iter()
        .map(|&(a, _)| unframe(&model.x.frame, a))
        .collect();
    let deformed_y = f
        .deformed
        .iter()
        .map(|&(_, b)| unframe(&model.y.frame, b))
        .collect();
    Ok(MatchResult {
        map_xy,
        map_yx,
        initial_map_xy,
        initial_map_yx,
        associations,
        deformed_x,
        deformed_y,
        history,
        hierarchy_x: model.x.hierarchy,
        hierarchy_y: model.y.hierarchy,
        repaired_rotations: repaired,
    })
}
