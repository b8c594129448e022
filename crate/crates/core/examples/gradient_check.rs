//! Compares every analytic gradient against central finite differences.
//!
//! cargo run --release --example gradient_check -- [seed]

use maskverify::gradcheck::{run, GradcheckConfig, TOLERANCE};

fn main() -> maskverify::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let report = run(&GradcheckConfig {
        seed,
        ..Default::default()
    })?;
    print!("{}", report.to_text(TOLERANCE));
    println!(
        "{} (max relative error {:.3e})",
        if report.passed(TOLERANCE) {
            "passed"
        } else {
            "FAILED"
        },
        report.max_rel_error()
    );
    Ok(())
}
