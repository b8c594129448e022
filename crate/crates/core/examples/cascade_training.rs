//! Stage 1 cross-entropy pre-training, freezing, then stage 2 embedding-head
//! training with the combined loss, evaluated in both pair modes.
//!
//! cargo run --release --example cascade_training

use maskverify::backbone::BackboneConfig;
use maskverify::dataio::{build_pairs, evaluate, ImpostorSampling, PairMode, Pipeline};
use maskverify::metrics::MetricReport;
use maskverify::numkit::Prng;
use maskverify::synthetic::{generate, SyntheticConfig};
use maskverify::trainer::{train_cascade, EmbedderTrainConfig};

fn main() -> maskverify::Result<()> {
    let bench = generate(&SyntheticConfig::default())?;
    let mut embed_cfg = EmbedderTrainConfig::default();
    embed_cfg.sgd.iterations = 500;
    embed_cfg.sgd.lr = 0.1;
    let out = train_cascade(
        &bench.train,
        Some(&bench.val),
        &BackboneConfig::default(),
        &embed_cfg,
    )?;
    println!(
        "stage 1: {} classes, train acc {:.3}, val acc {:.3}",
        out.ce_report.classes.len(),
        out.ce_report.train_accuracy,
        out.ce_report.val_accuracy
    );
    let losses = out.log.losses();
    println!(
        "stage 2: {} quadruplets, loss {:.4} -> {:.4}",
        out.log.quadruplets_drawn,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );

    for (name, embedder) in [
        ("CE features", None),
        ("embedding head", Some(&out.embedder)),
    ] {
        let pipeline = Pipeline {
            backbone: Some(&out.backbone),
            embedder,
        };
        for mode in PairMode::ALL {
            let pairs = build_pairs(
                &bench.test,
                mode,
                &mut Prng::new(1),
                ImpostorSampling::Exhaustive,
            )?;
            let r = MetricReport::compute(&evaluate(&pipeline, &bench.test, &pairs)?);
            println!(
                "{name:<15} {mode}: AUC {:.3}  EER {:.1}%",
                r.auc,
                100.0 * r.eer
            );
        }
    }
    Ok(())
}
