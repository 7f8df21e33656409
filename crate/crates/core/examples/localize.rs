//! Localizes a simulated insertion on a generated airway and prints the
//! per-generation error next to dead reckoning.
//!
//! `cargo run --release --example localize -- [seed]`

use broncholoc::experiment::{run_method, ExperimentConfig, Method, RunSeeds};
use broncholoc::filter::FilterMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cfg = ExperimentConfig::default();
    let tree = cfg.build_tree(seed)?;
    let gt = cfg.ground_truth(&tree, seed)?;
    println!("{} branches, {} frames", tree.branches().len(), gt.len());

    for method in [Method::Filter(FilterMode::Full), Method::DeadReckoning] {
        let out = run_method(&tree, &gt, method, &cfg.filter, &cfg.perception, RunSeeds::single(seed))?;
        let r = &out.report;
        println!("{}: ATE {:.2} ± {:.2} mm, SR5 {:.2}, SR10 {:.2}", method.name(), r.ate_mean, r.ate_std, r.sr5, r.sr10);
        for (g, a) in &r.per_generation {
            println!("  generation {g}: {:.2} mm over {} frames", a.ate_mean, a.count);
        }
    }
    Ok(())
}
