use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use patchmatch::evaluation::{
    apply_discards, build_gt_discards, cycle_ge, evaluate, read_index_map, read_point_map, CycleOptions,
    DiscardFactor, MetricReport,
};
use patchmatch::mesh;
use patchmatch::Mesh;

use crate::error::{CliError, Result};
use crate::run::{create_dir, read_to_string, write_atomic, NormalizationArg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiscardArg {
    /// 0.2 × mean edge length.
    Remeshed,
    /// 2 × mean edge length.
    RawScan,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted map, one target index per source vertex.
    pub pred: PathBuf,
    /// Ground-truth map in the same format; -1 marks discarded vertices.
    pub gt: PathBuf,
    /// Target mesh, on which errors are measured.
    pub target: PathBuf,
    #[arg(long, value_enum, default_value = "sqrt-area")]
    pub normalization: NormalizationArg,
    /// Reverse map for CycleGE; requires --source.
    #[arg(long, value_name = "PATH", requires = "source")]
    pub reverse: Option<PathBuf>,
    /// Source mesh, for CycleGE and discards.
    #[arg(long, value_name = "PATH")]
    pub source: Option<PathBuf>,
    /// Per-source-vertex distance to the ground-truth surface, one per line.
    #[arg(long, value_name = "PATH", requires = "source")]
    pub discard_distances: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "remeshed")]
    pub discard_factor: DiscardArg,
    /// Pair budget of sampled CycleGE on large meshes.
    #[arg(long, value_name = "N", default_value_t = CycleOptions::default().budget)]
    pub cycle_budget: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated ascending tolerances for the cumulative curve.
    #[arg(long, value_name = "T,T,...", value_delimiter = ',')]
    pub tolerances: Option<Vec<f64>>,
    /// Output directory for metrics.json and curve.csv.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

fn load(path: &Path) -> Result<Mesh> {
    mesh::load_mesh(path).map_err(CliError::input)
}

fn read_distances(path: &Path) -> Result<Vec<f64>> {
    read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .ok()
                .filter(|d| *d >= 0.0)
                .ok_or_else(|| CliError::Input(format!("{}: bad distance {l:?}", path.display())))
        })
        .collect()
}

pub fn run(args: &EvalArgs) -> Result<MetricReport> {
    let pred = read_point_map(&args.pred).map_err(CliError::input)?;
    let mut gt = read_index_map(&args.gt).map_err(CliError::input)?;
    let target = load(&args.target)?;
    let source = args.source.as_deref().map(load).transpose()?;
    if let (Some(path), Some(src)) = (&args.discard_distances, &source) {
        let d = read_distances(path)?;
        if d.len() != gt.len() {
            return Err(CliError::Input(format!(
                "{}: {} distances for {} ground-truth entries",
                path.display(),
                d.len(),
                gt.len()
            )));
        }
        let factor = match args.discard_factor {
            DiscardArg::Remeshed => DiscardFactor::Remeshed,
            DiscardArg::RawScan => DiscardFactor::RawScan,
        };
        apply_discards(&mut gt, &build_gt_discards(&d, src.mean_edge_length(), factor));
    }
    let mut report = evaluate(
        &pred,
        &gt,
        &target,
        args.normalization.into(),
        args.tolerances.as_deref(),
    )
    .map_err(CliError::input)?;
    if let (Some(path), Some(src)) = (&args.reverse, &source) {
        let reverse = read_point_map(path).map_err(CliError::input)?;
        let options = CycleOptions {
            budget: args.cycle_budget,
            seed: args.seed,
            ..CycleOptions::default()
        };
        report.cycle_ge = Some(cycle_ge(&pred, &reverse, src, &options).map_err(CliError::input)?);
    }
    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&args.out.join("metrics.json"), json.as_bytes())?;
    write_atomic(&args.out.join("curve.csv"), report.curve_csv().as_bytes())?;
    Ok(report)
}
