//! Per-expert preference by class division and the hardest-negative
//! probability histogram of a trained model.
//!
//! cargo run --release --example diagnostics

use shike::config::RunConfig;
use shike::data::Division;
use shike::eval::{expert_preference, hardest_negative_hist, run_experiment, ProbabilitySource};

fn main() -> shike::Result<()> {
    let cfg = RunConfig::desk();
    let (train, test) = cfg.data.build()?;
    let out = run_experiment(&cfg, &train, &test)?;

    let pref = expert_preference(&out.report, &out.division);
    for d in Division::ALL {
        if let Some(share) = pref.get(d) {
            let share: Vec<String> = share.iter().map(|s| format!("{s:.2}")).collect();
            println!("{:6} classes won by expert: [{}]", d.name(), share.join(", "));
        }
    }

    let mut sources = vec![ProbabilitySource::Ensemble];
    sources.extend((0..out.state.model.num_experts()).map(ProbabilitySource::Expert));
    for src in sources {
        let h = hardest_negative_hist(&out.state.model, &test, 10, src)?;
        println!("{src:?}: fraction above 0.5 = {:.3}, counts {:?}", h.fraction_above(0.5), h.counts);
    }
    Ok(())
}
