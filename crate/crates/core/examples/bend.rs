//! Matches a capped cylinder against a bent copy of itself and reports how
//! well the identity correspondence is recovered.
//!
//! `cargo run --release --example bend -- [angle] [epochs]`

use std::time::Instant;

use patchmatch::evaluation::{cycle_ge, mge, p2p_accuracy, CycleOptions};
use patchmatch::geodesic::Normalization;
use patchmatch::optim::{match_pair, MatchConfig};
use patchmatch::{synthetic, Mesh};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let angle: f64 = args.next().map_or(1.0, |a| a.parse().expect("angle in radians"));
    let epochs: usize = args.next().map_or(50, |a| a.parse().expect("epoch count"));

    let x: Mesh = synthetic::capped_cylinder(33, 30, 0.5, 3.0);
    let y = synthetic::bend_z(&x, 3.0, angle);
    let config = MatchConfig {
        epochs,
        ..MatchConfig::default()
    };
    let start = Instant::now();
    let r = match_pair(&x, &y, &config).expect("matching succeeds");
    println!(
        "{} vertices, {} steps in {:.1} s",
        x.num_vertices(),
        r.history.len() - 1,
        start.elapsed().as_secs_f64()
    );

    let gt: Vec<Option<usize>> = (0..x.num_vertices()).map(Some).collect();
    let opts = CycleOptions::default();
    for (name, xy, yx) in [
        ("initial", &r.initial_map_xy, &r.initial_map_yx),
        ("final", &r.map_xy, &r.map_yx),
    ] {
        println!(
            "{name:>7}: MGE {:.5}  p2p {:.4}  CycleGE {:.5}",
            mge(xy, &gt, &y, Normalization::SqrtArea).unwrap(),
            p2p_accuracy(xy, &gt).unwrap(),
            cycle_ge(xy, yx, &x, &opts).unwrap()
        );
    }
    println!(
        "loss {:.4e} -> {:.4e}",
        r.history.first().unwrap().loss.total,
        r.history.last().unwrap().loss.total
    );
}
