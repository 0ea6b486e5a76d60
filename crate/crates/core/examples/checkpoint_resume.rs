//! Interrupt training, checkpoint, resume, and check that nothing changed.
//!
//! cargo run --release --example checkpoint_resume

use shike::checkpoint;
use shike::config::RunConfig;
use shike::data::NoAugment;
use shike::model::MoEModel;
use shike::train::{run_stage1, train_stage1, TrainState};

fn main() -> shike::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.train.epochs_stage1 = 8;
    let (train, _) = cfg.data.build()?;
    let model = MoEModel::new(cfg.model_config(train.input_shape())?, cfg.train.seed)?;

    let straight = train_stage1(model.clone(), &train, &cfg.train)?;

    let dir = std::env::temp_dir().join("shike-example");
    std::fs::create_dir_all(&dir).map_err(|e| shike::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("epoch4.ckpt");
    let mut state = TrainState::new(model);
    run_stage1(&mut state, &train, &cfg.train, Some(4), &NoAugment)?;
    checkpoint::save(&state, &path)?;
    println!("saved epoch {} to {}", state.epoch, path.display());

    let mut resumed = checkpoint::load(&path)?;
    run_stage1(&mut resumed, &train, &cfg.train, None, &NoAugment)?;
    println!("resumed run matches uninterrupted run: {}", resumed == straight);
    Ok(())
}
