//! Runs the full toy protocol and prints per-strategy scores averaged over seeds.
//!
//! `cargo run --release --example toy_experiment -- [seeds] [task,task,...]`

use loracal::experiment::{average, run_experiment, ExperimentConfig};
use loracal::metrics::Metric;

fn main() -> loracal::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(1), |s| s.parse()).expect("seed count");
    let mut cfg = ExperimentConfig::default();
    if let Some(tasks) = args.next() {
        cfg.tasks = tasks.split(',').map(str::to_string).collect();
    }

    let mut results = Vec::new();
    for seed in 0..seeds {
        cfg.seed = seed;
        let r = run_experiment(&cfg)?;
        println!("seed {seed}: {} in {:.1}s", r.task, r.seconds);
        results.push(r);
    }
    let em = average(&results, Metric::ExactMatch);
    let wr = average(&results, Metric::WeightedRouge);
    println!("\n{:14} {:>8} {:>8} {:>7}", "strategy", "EM", "W-R", "passes");
    for ((name, e), (_, w)) in em.iter().zip(&wr) {
        let passes = results[0].report(name).map_or(0.0, |r| r.passes_per_example);
        println!("{name:14} {e:8.1} {w:8.1} {passes:7}");
    }
    Ok(())
}
