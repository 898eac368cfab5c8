//! Config resolution, run directories and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use patchmatch::geodesic::Normalization;
use patchmatch::optim::MatchConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NormalizationArg {
    /// Square root of the surface area.
    SqrtArea,
    /// Geodesic diameter.
    Diameter,
    /// Raw distances.
    None,
}

impl From<NormalizationArg> for Normalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::SqrtArea => Normalization::SqrtArea,
            NormalizationArg::Diameter => Normalization::GeodesicDiameter,
            NormalizationArg::None => Normalization::None,
        }
    }
}

/// Flags shared by the commands that run the pipeline. Flags override the
/// config file, which overrides the defaults.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output root; each run writes to a subdirectory named by config hash and seed.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Comma-separated patch counts, coarse levels finest first.
    #[arg(long, value_name = "N,N,...", value_delimiter = ',')]
    pub patch_counts: Option<Vec<usize>>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub steps_per_epoch: Option<usize>,
    #[arg(long, value_name = "N")]
    pub warmup_epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub normalization: Option<NormalizationArg>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<MatchConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            }
            None => MatchConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(c) = &self.patch_counts {
            config.patch_counts = c.clone();
        }
        if let Some(e) = self.epochs {
            config.epochs = e;
        }
        if let Some(s) = self.steps_per_epoch {
            config.steps_per_epoch = s;
        }
        if let Some(w) = self.warmup_epochs {
            config.warmup_epochs = w;
        }
        if let Some(n) = self.normalization {
            config.normalization = n.into();
        }
        config
            .validate()
            .map_err(|e| CliError::Input(format!("invalid config: {e}")))?;
        Ok(config)
    }
}

/// `<out>/<config hash>-s<seed>`.
pub fn run_dir(out: &Path, config: &MatchConfig) -> PathBuf {
    out.join(format!("{}-s{}", config.hash(), config.seed))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mesh".into())
}
