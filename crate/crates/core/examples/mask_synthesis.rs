//! Draws all six mask variants onto a template face and writes them as PPM.
//!
//! cargo run --example mask_synthesis -- [out_dir]

use std::path::PathBuf;

use maskverify::masksynth::{
    apply_spec, area, mask_polygon, LandmarkSet, MaskSpec, RasterImage, PALETTE,
};

fn main() -> maskverify::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "mask_synthesis_out".into()),
    );
    std::fs::create_dir_all(&out)?;
    let face = RasterImage::filled(128, 128, [210, 180, 160])?;
    let lm = LandmarkSet::template(64.0, 64.0, 40.0);
    lm.save(out.join("landmarks.json"))?;

    for (i, (shape, coverage)) in MaskSpec::combinations().into_iter().enumerate() {
        let poly = mask_polygon(&lm, shape, coverage)?;
        let spec = MaskSpec {
            shape,
            coverage,
            color: PALETTE[i % PALETTE.len()],
        };
        let masked = apply_spec(&face, &lm, &spec)?;
        let path = out.join(format!("{shape}_{coverage}.ppm"));
        masked.save(&path)?;
        println!(
            "{:<6} {:<6} polygon area {:>8.1}  -> {}",
            shape,
            coverage,
            area(&poly),
            path.display()
        );
    }
    Ok(())
}
