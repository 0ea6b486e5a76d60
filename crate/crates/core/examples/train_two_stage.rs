//! Two-stage training on the desk benchmark: representation learning with
//! distillation, then balanced classifier retraining on frozen features.
//!
//! cargo run --release --example train_two_stage

use shike::config::RunConfig;
use shike::data::split_divisions;
use shike::eval::evaluate;
use shike::model::MoEModel;
use shike::train::{begin_stage2, train_stage1, run_stage2, Stage};

fn main() -> shike::Result<()> {
    let cfg = RunConfig::desk();
    let (train, test) = cfg.data.build()?;
    let div = split_divisions(train.spec());
    let model = MoEModel::new(cfg.model_config(train.input_shape())?, cfg.train.seed)?;
    println!("{} experts at depths {:?}", model.num_experts(), model.config().tap_depths);

    let mut state = train_stage1(model, &train, &cfg.train)?;
    let r1 = evaluate(&state.model, &test, &div)?;
    begin_stage2(&mut state, &cfg.train)?;
    run_stage2(&mut state, &train, &cfg.train, None)?;
    let r2 = evaluate(&state.model, &test, &div)?;

    for m in state.history.iter().filter(|m| m.epoch % 10 == 0 || m.stage == Stage::Classifier) {
        println!(
            "{:?} epoch {:3} lr {:.4} loss {:.4} (ce {:.4} nt {:.4} mu {:.4}) train acc {:.3}",
            m.stage, m.epoch, m.lr, m.total, m.ce, m.nt, m.mu, m.train_accuracy
        );
    }
    let show = |name: &str, r: &shike::eval::EvalReport| {
        println!(
            "{name}: overall {:.3}  many {:?}  medium {:?}  few {:?}",
            r.overall, r.divisions.many, r.divisions.medium, r.divisions.few
        )
    };
    show("after stage 1", &r1);
    show("after stage 2", &r2);
    Ok(())
}
