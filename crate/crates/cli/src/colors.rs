use std::path::PathBuf;

use clap::Args;
use patchmatch::evaluation::read_point_map;
use patchmatch::mesh::{self, normal_coded_colors, Rgb};
use patchmatch::Mesh;

use crate::error::{CliError, Result};
use crate::run::create_dir;

#[derive(Debug, Args)]
pub struct TransferArgs {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Map from source vertices to target vertices.
    pub map: PathBuf,
    /// Output directory for source.ply and target.ply.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

/// Gives every source vertex the color of its image.
pub fn transfer(target_colors: &[Rgb], map: &[usize]) -> Result<Vec<Rgb>> {
    map.iter()
        .enumerate()
        .map(|(v, &t)| {
            target_colors.get(t).copied().ok_or_else(|| {
                CliError::Input(format!(
                    "map entry {v} points at vertex {t}, but the target has {} vertices",
                    target_colors.len()
                ))
            })
        })
        .collect()
}

pub fn run(args: &TransferArgs) -> Result<()> {
    let source: Mesh = mesh::load_mesh(&args.source).map_err(CliError::input)?;
    let target: Mesh = mesh::load_mesh(&args.target).map_err(CliError::input)?;
    let map = read_point_map(&args.map).map_err(CliError::input)?;
    if map.len() != source.num_vertices() {
        return Err(CliError::Input(format!(
            "map has {} entries, but the source has {} vertices",
            map.len(),
            source.num_vertices()
        )));
    }
    let target_colors = normal_coded_colors(&target);
    let source_colors = transfer(&target_colors, &map)?;
    create_dir(&args.out)?;
    mesh::save_colored_mesh(&source, &source_colors, args.out.join("source.ply")).map_err(CliError::input)?;
    mesh::save_colored_mesh(&target, &target_colors, args.out.join("target.ply")).map_err(CliError::input)?;
    Ok(())
}
