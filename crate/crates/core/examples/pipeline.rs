//! The full comparison at a reduced size: pretrain, adapt, then train and
//! evaluate builders from scratch and from the adapted encoder.
//!
//! `cargo run --release --example pipeline -- 400 100` runs the full-size
//! corpus split.

use craftlm::cli::{cmd_pipeline, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let n_train = args.next().transpose()?.unwrap_or(120);
    let n_test = args.next().transpose()?.unwrap_or(40);

    let mut cfg = RunConfig::new("pipeline-example", 0);
    cfg.out = std::env::temp_dir().join("craftlm-runs");
    cfg.synth_train_episodes = n_train;
    cfg.synth_test_episodes = n_test;
    cfg.generic_sentences = 800;
    cfg.verbose = true;

    let summary = cmd_pipeline(&cfg)?;
    print!("{}", summary.table_csv());
    println!("delta F1 {:+.1}", summary.comparison.delta_f1);
    println!("artifacts in {}", summary.run_dir.display());
    Ok(())
}
