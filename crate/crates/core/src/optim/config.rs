use serde::{Deserialize, Serialize};

use super::LrSchedule;
use crate::criteria::{LevelWeights, LossWeights};
use crate::geodesic::Normalization;
use crate::hash::fnv1a;

/// Feature width: one value for every level or one per level (finest first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureDims {
    Uniform(usize),
    PerLevel(Vec<usize>),
}

impl FeatureDims {
    pub fn resolve(&self, num_levels: usize) -> Vec<usize> {
        match self {
            FeatureDims::Uniform(d) => vec![*d; num_levels],
            FeatureDims::PerLevel(v) => v.clone(),
        }
    }
}

/// Everything that determines the outcome of one pair optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Patches per coarse level, strictly descending.
    pub patch_counts: Vec<usize>,
    pub feature_dims: FeatureDims,
    pub temperature: f64,
    /// Adjacency-averaging rounds applied to combined features.
    pub smoothing_steps: usize,
    /// Blending bandwidth as a multiple of the mean patch radius.
    pub sigma_scale: f64,
    /// Criterion weights applied at every level.
    pub weights: LevelWeights,
    /// Per-level weights, finest first; replaces `weights` when set.
    pub level_weights: Option<Vec<LevelWeights>>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: LrSchedule,
    pub clip_norm: f64,
    /// Coarse-to-fine warm-up: every `warmup_epochs` epochs one more level
    /// joins the objective. Zero optimizes all levels from the start.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub normalization: Normalization,
    /// Seed the first vertex-level feature columns with position and normal.
    pub geometric_seeding: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            patch_counts: vec![800, 200, 50],
            feature_dims: FeatureDims::Uniform(32),
            temperature: 1e-2,
            smoothing_steps: 1,
            sigma_scale: 1.0,
            weights: LevelWeights::default(),
            level_weights: None,
            epochs: 50,
            steps_per_epoch: 20,
            learning_rate: LrSchedule::default(),
            clip_norm: 1.0,
            warmup_epochs: 0,
            seed: 0,
            normalization: Normalization::SqrtArea,
            geometric_seeding: true,
        }
    }
}

impl MatchConfig {
    pub fn num_levels(&self) -> usize {
        self.patch_counts.len() + 1
    }

    pub fn loss_weights(&self) -> LossWeights {
        match &self.level_weights {
            Some(levels) => LossWeights {
                levels: levels.clone(),
            },
            None => LossWeights::uniform(self.weights, self.num_levels()),
        }
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.feature_dims.resolve(self.num_levels())
    }

    pub fn validate(&self) -> Result<(), String> {
        let c = &self.patch_counts;
        if c.contains(&0) || c.windows(2).any(|w| w[0] <= w[1]) {
            return Err(format!(
                "patch_counts must be positive and strictly descending: {c:?}"
            ));
        }
        let dims = self.feature_dims();
        if dims.len() != self.num_levels() || dims.contains(&0) {
            return Err(format!(
                "feature_dims must give {} positive widths: {dims:?}",
                self.num_levels()
            ));
        }
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {x}"))
            }
        };
        positive("temperature", self.temperature)?;
        positive("sigma_scale", self.sigma_scale)?;
        positive("clip_norm", self.clip_norm)?;
        let lr = &self.learning_rate;
        for x in [lr.first, lr.middle, lr.late] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(format!("learning rates must be nonnegative, got {x}"));
            }
        }
        if self.steps_per_epoch == 0 {
            return Err("steps_per_epoch must be positive".into());
        }
        let w = self.loss_weights();
        if w.levels.len() != self.num_levels() {
            return Err(format!(
                "level_weights must have {} entries, got {}",
                self.num_levels(),
                w.levels.len()
            ));
        }
        w.validate().map_err(|e| e.to_string())
    }

    /// Canonical JSON of the full config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// 16 hex digits identifying the config.
    pub fn hash(&self) -> String {
        format!(
            "{:016x}",
            fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
        )
    }
}
