//! Adam, the learning-rate schedule and the per-pair optimization loop.

mod adam;
mod config;
mod pair;

pub use adam::{clip_global_norm, Adam, AdamError, LrSchedule};
pub use config::{FeatureDims, MatchConfig};
pub use pair::{
    feature_seed, match_pair, match_pair_with, MatchError, MatchOptions, MatchResult, PairObjective,
    PartialMatch, StepRecord,
};
