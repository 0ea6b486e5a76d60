//! Build a long-tailed synthetic dataset, inspect its divisions and store it.
//!
//! cargo run --release --example build_dataset -- [output-dir]

use shike::config::{load_dataset, save_dataset, RunConfig};
use shike::data::{make_longtail_counts, split_divisions};

fn main() -> shike::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "runs/example-data".into());

    // The count profile alone, CIFAR-100 style.
    let counts = make_longtail_counts(100, 500, 100.0)?;
    println!("CIFAR-100-LT profile: head {} tail {} total {}", counts[0], counts[99], counts.iter().sum::<usize>());

    let cfg = RunConfig::desk();
    let (train, test) = cfg.data.build()?;
    let div = split_divisions(train.spec());
    println!(
        "desk benchmark: {} train / {} test samples, IF {:.0}, many/medium/few = {}/{}/{}",
        train.len(),
        test.len(),
        train.spec().imbalance_factor(),
        div.many.len(),
        div.medium.len(),
        div.few.len()
    );

    let files = save_dataset(dir.as_ref(), &train, &test, cfg.data.data_seed)?;
    println!("wrote {dir} (train sha256 {})", &files.train_sha256[..16]);
    let (back, _, _) = load_dataset(dir.as_ref())?;
    assert_eq!(back, train);
    Ok(())
}
