//! Runs the three-arm ablation on the synthetic benchmark and prints the
//! result tables.
//!
//! cargo run --release --example ablation -- [seed] [out_dir]

use std::time::Instant;

use maskverify::ablation::{run_synthetic, AblationConfig, Arm};

fn main() -> maskverify::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let cfg = AblationConfig::with_seed(seed);
    let start = Instant::now();
    let result = run_synthetic(&cfg)?;
    if let Some(ce) = &result.ce_report {
        println!(
            "stage 1: train acc {:.3}, val acc {:.3}",
            ce.train_accuracy, ce.val_accuracy
        );
    }
    print!("{}", result.table_text());
    for arm in [Arm::CeTl, Arm::CeTlMse] {
        if let Some(mse) = result.arm(arm).and_then(|a| a.heldout_mse) {
            println!("held-out anchor MSE {:<15} {mse:.6}", arm.title());
        }
    }
    println!("elapsed {:.1?}", start.elapsed());
    if let Some(dir) = args.next() {
        result.write_outputs(&dir)?;
        println!("wrote {dir}");
    }
    Ok(())
}
