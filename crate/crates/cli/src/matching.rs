use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use ndarray_npy::write_npy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use patchmatch::evaluation::write_point_map;
use patchmatch::geodesic::mesh_fingerprint;
use patchmatch::mesh;
use patchmatch::optim::{match_pair_with, MatchConfig, MatchError, MatchOptions, StepRecord};
use patchmatch::Mesh;

use crate::error::{CliError, Result};
use crate::run::{create_dir, file_stem, read_to_string, run_dir, write_atomic, ConfigArgs};

/// Environment variable naming the geodesic cache directory.
pub const CACHE_ENV: &str = "PATCHMATCH_CACHE";

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Source mesh X.
    #[arg(required_unless_present = "pairs")]
    pub mesh_x: Option<PathBuf>,
    /// Target mesh Y.
    #[arg(required_unless_present = "pairs")]
    pub mesh_y: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Text file with one `X Y` mesh pair per line, paths relative to the file.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["mesh_x", "mesh_y", "resume"])]
    pub pairs: Option<PathBuf>,
    /// Concurrent pair jobs in --pairs mode.
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub workers: usize,
    /// Write the deformed shapes of every level as OBJ.
    #[arg(long)]
    pub dump_deformations: bool,
    /// Rerun into an existing pair directory; refused if its manifest was
    /// produced with a different config or different meshes.
    #[arg(long, value_name = "DIR")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub fingerprint: String,
    pub vertices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

/// Written atomically once a pair job ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: Status,
    pub seed: u64,
    pub config_hash: String,
    pub config: MatchConfig,
    pub x: InputRecord,
    pub y: InputRecord,
    pub loss_log: String,
    /// Artifact name to path relative to the pair directory.
    pub outputs: BTreeMap<String, String>,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub repaired_rotations: usize,
    pub divergence: Option<Divergence>,
}

struct Job {
    x: PathBuf,
    y: PathBuf,
    dir: PathBuf,
}

pub fn run(args: &MatchArgs) -> Result<Vec<PathBuf>> {
    let config = args.config.resolve()?;
    let options = MatchOptions {
        cache_dir: std::env::var_os(CACHE_ENV).map(PathBuf::from),
    };
    if let Some(dir) = &options.cache_dir {
        create_dir(dir)?;
    }
    let root = run_dir(&args.config.out, &config);
    let Some(pairs) = &args.pairs else {
        let (x, y) = (args.mesh_x.clone().unwrap(), args.mesh_y.clone().unwrap());
        let dir = match &args.resume {
            Some(d) => d.clone(),
            None => root.join(format!("{}-{}", file_stem(&x), file_stem(&y))),
        };
        let job = Job { x, y, dir };
        run_job(
            &job,
            &config,
            &options,
            args.dump_deformations,
            args.resume.is_some(),
        )?;
        return Ok(vec![job.dir]);
    };
    let jobs = read_pairs(pairs, &root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.max(1))
        .build()
        .map_err(CliError::input)?;
    let results: Vec<Result<()>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(job, &config, &options, args.dump_deformations, false))
            .collect()
    });
    let mut worst: Option<CliError> = None;
    for (job, r) in jobs.iter().zip(results) {
        if let Err(e) = r {
            log::error!("{} {}: {e}", job.x.display(), job.y.display());
            if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
    }
    match worst {
        Some(e) => Err(e),
        None => Ok(jobs.into_iter().map(|j| j.dir).collect()),
    }
}

fn read_pairs(path: &Path, root: &Path) -> Result<Vec<Job>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut jobs = Vec::new();
    for (i, line) in read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [x, y] = parts[..] else {
            return Err(CliError::Input(format!(
                "{}:{}: expected two mesh paths",
                path.display(),
                i + 1
            )));
        };
        let (x, y) = (base.join(x), base.join(y));
        let dir = root.join(format!("{:04}-{}-{}", jobs.len(), file_stem(&x), file_stem(&y)));
        jobs.push(Job { x, y, dir });
    }
    if jobs.is_empty() {
        return Err(CliError::Input(format!("{}: no pairs", path.display())));
    }
    Ok(jobs)
}

fn input_record(path: &Path, m: &Mesh) -> InputRecord {
    InputRecord {
        path: path.to_path_buf(),
        fingerprint: format!("{:016x}", mesh_fingerprint(m)),
        vertices: m.num_vertices(),
    }
}

fn load(path: &Path) -> Result<Mesh> {
    mesh::load_mesh(path).map_err(CliError::input)
}

/// Checks that `dir` was produced from the same config and meshes. Returns
/// whether that run already completed.
fn check_resume(dir: &Path, config: &MatchConfig, x: &InputRecord, y: &InputRecord) -> Result<bool> {
    let path = dir.join("manifest.json");
    let old: Manifest = serde_json::from_str(&read_to_string(&path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if old.config_hash != config.hash() {
        return Err(CliError::Input(format!(
            "refusing to resume {}: config hash {} differs from the manifest's {}",
            dir.display(),
            config.hash(),
            old.config_hash
        )));
    }
    if old.x.fingerprint != x.fingerprint || old.y.fingerprint != y.fingerprint {
        return Err(CliError::Input(format!(
            "refusing to resume {}: input meshes differ from the manifest's",
            dir.display()
        )));
    }
    Ok(old.status == Status::Complete)
}

fn write_loss_log(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn write_map(dir: &Path, name: &str, map: &[usize], outputs: &mut BTreeMap<String, String>) -> Result<()> {
    let file = format!("{name}.txt");
    write_point_map(dir.join(&file), map).map_err(CliError::input)?;
    outputs.insert(name.to_string(), file);
    Ok(())
}

fn run_job(
    job: &Job,
    config: &MatchConfig,
    options: &MatchOptions,
    dump_deformations: bool,
    resume: bool,
) -> Result<()> {
    let x = load(&job.x)?;
    let y = load(&job.y)?;
    let (rx, ry) = (input_record(&job.x, &x), input_record(&job.y, &y));
    if resume && check_resume(&job.dir, config, &rx, &ry)? {
        log::info!("{} is already complete", job.dir.display());
        return Ok(());
    }
    let dir = &job.dir;
    create_dir(dir)?;
    write_atomic(&dir.join("config.json"), config.to_json().as_bytes())?;
    let mut outputs = BTreeMap::new();
    outputs.insert("config".to_string(), "config.json".to_string());
    let loss_log = "loss.jsonl".to_string();
    let mut manifest = Manifest {
        status: Status::Complete,
        seed: config.seed,
        config_hash: config.hash(),
        config: config.clone(),
        x: rx,
        y: ry,
        loss_log: loss_log.clone(),
        outputs: BTreeMap::new(),
        steps: 0,
        final_loss: None,
        repaired_rotations: 0,
        divergence: None,
    };
    let outcome = match match_pair_with(&x, &y, config, options) {
        Ok(r) => r,
        Err(MatchError::Diverged {
            step,
            reason,
            partial,
        }) => {
            write_loss_log(&dir.join(&loss_log), &partial.history)?;
            if !partial.map_xy.is_empty() {
                write_map(dir, "map_xy", &partial.map_xy, &mut outputs)?;
                write_map(dir, "map_yx", &partial.map_yx, &mut outputs)?;
            }
            manifest.status = Status::Diverged;
            manifest.steps = partial.history.len();
            manifest.final_loss = partial.history.last().map(|r| r.loss.total);
            manifest.divergence = Some(Divergence {
                step,
                reason: reason.clone(),
            });
            manifest.outputs = outputs;
            write_manifest(dir, &manifest)?;
            return Err(CliError::Diverged(format!(
                "optimization diverged at step {step}: {reason}"
            )));
        }
        Err(e) => return Err(CliError::input(e)),
    };
    write_loss_log(&dir.join(&loss_log), &outcome.history)?;
    write_map(dir, "map_xy", &outcome.map_xy, &mut outputs)?;
    write_map(dir, "map_yx", &outcome.map_yx, &mut outputs)?;
    write_map(dir, "initial_map_xy", &outcome.initial_map_xy, &mut outputs)?;
    write_map(dir, "initial_map_yx", &outcome.initial_map_yx, &mut outputs)?;
    let assoc = dir.join("associations");
    create_dir(&assoc)?;
    for (i, (pxy, pyx)) in outcome.associations.iter().enumerate() {
        let l = i + 1;
        for (side, pi) in [("xy", pxy), ("yx", pyx)] {
            let file = format!("associations/level{l}_{side}.npy");
            write_npy(dir.join(&file), pi).map_err(|e| CliError::Input(format!("{file}: {e}")))?;
            outputs.insert(format!("pi_{side}_level{l}"), file);
        }
    }
    if dump_deformations {
        let def = dir.join("deformed");
        create_dir(&def)?;
        for (name, base, levels) in [("x", &x, &outcome.deformed_x), ("y", &y, &outcome.deformed_y)] {
            for (l, pos) in levels.iter().enumerate() {
                let file = format!("deformed/{name}_level{l}.obj");
                let m = base.with_vertices(pos.clone()).map_err(CliError::input)?;
                mesh::save_mesh(&m, dir.join(&file)).map_err(CliError::input)?;
                outputs.insert(format!("deformed_{name}_level{l}"), file);
            }
        }
    }
    manifest.steps = outcome.history.len() - 1;
    manifest.final_loss = outcome.history.last().map(|r| r.loss.total);
    manifest.repaired_rotations = outcome.repaired_rotations;
    manifest.outputs = outputs;
    write_manifest(dir, &manifest)?;
    log::info!("{} complete", dir.display());
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), json.as_bytes())
}
