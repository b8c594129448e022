//! Computes the verification metric suite on two overlapping Gaussian score
//! distributions and writes the ROC curve.
//!
//! cargo run --example verification_metrics -- [out.svg]

use maskverify::metrics::{auc, eer, eer_interpolated, roc, write_roc_svg, MetricReport, ScoreSet};
use maskverify::numkit::Prng;

fn main() -> maskverify::Result<()> {
    let mut prng = Prng::new(7);
    let genuine: Vec<f64> = (0..2000).map(|_| 0.6 + 0.15 * prng.normal()).collect();
    let impostor: Vec<f64> = (0..2000).map(|_| 0.2 + 0.15 * prng.normal()).collect();
    let set = ScoreSet::new(genuine, impostor)?;

    let r = MetricReport::compute(&set);
    println!("GMean  {:.4}", r.gmean);
    println!("IMean  {:.4}", r.imean);
    println!("AUC    {:.4} (pairwise {:.4})", r.auc, auc(&set));
    println!(
        "EER    {:.2}% (interpolated {:.2}%)",
        100.0 * eer(&set),
        100.0 * eer_interpolated(&set)
    );
    println!("FMR100 {:.2}%", 100.0 * r.fmr100);
    println!("FMR10  {:.2}%", 100.0 * r.fmr10);

    let curve = roc(&set);
    println!("{} ROC points", curve.points.len());
    if let Some(path) = std::env::args().nth(1) {
        write_roc_svg(&path, "Gaussian scores", &[("d' = 2.7", &curve)])?;
        println!("wrote {path}");
    }
    Ok(())
}
