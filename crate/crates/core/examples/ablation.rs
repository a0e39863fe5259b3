//! Component ablation at desk scale: the full method against the
//! single-branch baseline and against DCML disabled, over several seeds.
//!
//! ```text
//! cargo run --release -p adp-core --example ablation -- [seeds | first..end] [key=value ...]
//! ```

use std::time::Instant;

use adp_core::ablation::{run_ablation, AblationArms};
use adp_core::config::RunConfig;

fn main() -> adp_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let range = args.next().unwrap_or_else(|| "5".into());
    let seeds = match range.split_once("..") {
        Some((a, b)) => a.parse().unwrap_or(0)..b.parse().unwrap_or(5),
        None => 0..range.parse().unwrap_or(5),
    };
    let count = seeds.end - seeds.start;
    let overrides: Vec<String> = args.collect();

    let mut base = RunConfig::desk();
    base.apply_overrides(&overrides)?;
    let arms = AblationArms::from_base(base)?;

    let start = Instant::now();
    println!("seed  full(r1/mAP)     baseline         w3=0             loss first->last (full)");
    let results = run_ablation(&arms, seeds);
    for r in &results {
        for (name, arm) in [
            ("full", &r.full),
            ("baseline", &r.baseline),
            ("w3=0", &r.no_dcml),
        ] {
            if let Some(e) = &arm.error {
                eprintln!("seed {} {name}: {e}", r.seed);
            }
        }
        println!(
            "{:>4}  {:.3}/{:.3}      {:.3}/{:.3}      {:.3}/{:.3}      {:.3} -> {:.3}",
            r.seed,
            r.full.rank1,
            r.full.map,
            r.baseline.rank1,
            r.baseline.map,
            r.no_dcml.rank1,
            r.no_dcml.map,
            r.full.first_loss,
            r.full.last_loss
        );
    }
    let wins_base = results.iter().filter(|r| r.full_beats_baseline()).count();
    let wins_w3 = results.iter().filter(|r| r.dcml_helps()).count();
    println!(
        "full >= baseline in {wins_base}/{count} seeds; w3=0.01 >= w3=0 in {wins_w3}/{count} seeds ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
