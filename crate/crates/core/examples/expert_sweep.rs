//! Accuracy as a function of the number of experts and where they tap the
//! backbone (A = shallowest stage).
//!
//! cargo run --release --example expert_sweep -- [seeds]

use shike::config::RunConfig;
use shike::eval::expert_count_sweep;

fn main() -> shike::Result<()> {
    let seeds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cells: Vec<(usize, String)> = ["A", "C", "AB", "BC", "ABC"].iter().map(|a| (a.len(), a.to_string())).collect();
    let table = expert_count_sweep(&RunConfig::desk(), &cells, seeds)?;
    for c in &table.cells {
        println!("M={} {:4} mean {:.4}", c.num_experts, c.arrangement, c.mean);
    }
    for m in 1..=3 {
        println!("best with {m} expert(s): {:.4}", table.best_mean(m).unwrap_or(f64::NAN));
    }
    Ok(())
}
