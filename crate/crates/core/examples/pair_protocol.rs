//! Writes a small synthetic feature file, reads it back and builds the U-M
//! and M-M pair lists over it.
//!
//! cargo run --example pair_protocol

use maskverify::dataio::{
    build_pairs, read_features, read_pairs, write_features, write_pairs, ImpostorSampling,
    PairLabel, PairMode,
};
use maskverify::numkit::Prng;
use maskverify::synthetic::{generate, SyntheticConfig};

fn main() -> maskverify::Result<()> {
    let bench = generate(&SyntheticConfig {
        test_identities: 4,
        samples_per_identity: 3,
        ..Default::default()
    })?;
    let dir = std::env::temp_dir().join("maskverify_pair_protocol");
    std::fs::create_dir_all(&dir)?;
    let features = dir.join("test.mfre");
    write_features(&features, &bench.test)?;
    let records = read_features(&features)?;
    println!(
        "{} records ({} bytes on disk)",
        records.len(),
        std::fs::metadata(&features)?.len()
    );

    for mode in PairMode::ALL {
        for sampling in [ImpostorSampling::Ratio(1.0), ImpostorSampling::Exhaustive] {
            let list = build_pairs(&records, mode, &mut Prng::new(0), sampling)?;
            let path = dir.join(format!("{}.csv", mode.label()));
            write_pairs(&path, &list)?;
            let back = read_pairs(&path)?;
            assert_eq!(back, list);
            println!(
                "{mode} {sampling:?}: {} genuine, {} impostor",
                list.count(PairLabel::Genuine),
                list.count(PairLabel::Impostor)
            );
        }
    }
    Ok(())
}
