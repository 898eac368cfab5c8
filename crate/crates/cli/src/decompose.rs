use std::path::PathBuf;

use clap::Args;
use patchmatch::hierarchy::build_hierarchy;
use patchmatch::mesh::{self, Rgb};
use patchmatch::Mesh;

use crate::error::{CliError, Result};
use crate::run::{create_dir, file_stem, run_dir, write_atomic, ConfigArgs};

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Mesh file (OBJ, OFF or PLY).
    pub mesh: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also write one patch-colored PLY per coarse level.
    #[arg(long)]
    pub colored: bool,
}

/// Distinct colors for consecutive patch indices (golden-ratio hue steps).
pub fn patch_color(p: usize) -> Rgb {
    let h = (p as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.65, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| (255.0 * (t + m)).round() as u8)
}

pub fn run(args: &DecomposeArgs) -> Result<PathBuf> {
    let config = args.config.resolve()?;
    let m: Mesh = mesh::load_mesh(&args.mesh).map_err(CliError::input)?;
    let h = build_hierarchy(&m, &config.patch_counts, config.seed).map_err(CliError::input)?;
    let dir = run_dir(&args.config.out, &config).join(file_stem(&args.mesh));
    create_dir(&dir)?;
    let json = serde_json::to_string_pretty(&h.export()).expect("export serializes");
    write_atomic(&dir.join("hierarchy.json"), json.as_bytes())?;
    if args.colored {
        for (l, level) in h.levels().iter().enumerate().skip(1) {
            let colors: Vec<Rgb> = level.assignment.iter().map(|&p| patch_color(p)).collect();
            let path = dir.join(format!("level{l}.ply"));
            mesh::save_colored_mesh(&m, &colors, &path).map_err(CliError::input)?;
        }
    }
    log::info!("hierarchy {:?} written to {}", h.level_sizes(), dir.display());
    Ok(dir)
}
