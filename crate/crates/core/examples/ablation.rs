//! Component ablation: single model, plain MoE, and the full method.
//!
//! cargo run --release --example ablation -- [seeds]

use shike::config::RunConfig;
use shike::eval::{ablation_run, AblationFlags};

fn main() -> shike::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let rows = [
        AblationFlags::SINGLE,
        AblationFlags::PLAIN_MOE,
        AblationFlags::parse("moe+dkf")?,
        AblationFlags::FULL,
    ];
    let table = ablation_run(&RunConfig::desk(), &rows, seeds)?;
    for r in &table.rows {
        println!(
            "{:16} mean {:.4}  per seed {:?}  hardest negative > 0.5: {:?}",
            r.label, r.mean, r.accuracies, r.hard_negative_rate
        );
    }
    Ok(())
}
