//! Trains the full model and both single-encoder variants on synthetic data
//! that has cluster and transition structure, then prints test metrics.
//!
//! `cargo run --release --example ablation -- [seeds...]`

use std::time::Instant;

use mrgsrec::ablation::{run_ablation, synthetic_benchmark, Variant};
use mrgsrec::graph::build_adjacency;
use mrgsrec::synthetic::{SyntheticConfig, SyntheticData};

fn main() -> mrgsrec::Result<()> {
    env_logger::init();
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2] } else { seeds };
    let data = SyntheticData::generate(&SyntheticConfig::default())?;
    let split = data.split()?;
    let (_, adj) = build_adjacency(&split, split.n_users, split.n_items)?;
    let start = Instant::now();
    let table = run_ablation(&split, &adj, &synthetic_benchmark(), &Variant::ALL, &seeds)?;
    print!("{}", table.render());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
