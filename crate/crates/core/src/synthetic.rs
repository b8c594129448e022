//! Seeded synthetic "face" benchmark.
//!
//! Each identity has a cluster mean `A·z` where `z` is a per-identity latent
//! and `A` is a mixing matrix shared by all identities. A sample is the mean
//! plus low-rank nuisance variation (pose, lighting) and isotropic noise.
//! Every sample is emitted twice: unmasked, and masked by zeroing a fixed
//! contiguous band of coordinates, which plays the role of an occluder that
//! always covers the same facial region.
//!
//! Train, validation and test identities are disjoint.

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureRecord;
use crate::error::{Error, Result};
use crate::numkit::{Prng, Vec64};

/// Identity ids are offset per split so the three sets never collide.
pub const VAL_ID_OFFSET: u32 = 1000;
pub const TEST_ID_OFFSET: u32 = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_identities: u32,
    pub val_identities: u32,
    pub test_identities: u32,
    pub samples_per_identity: u32,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub noise: f64,
    /// Coordinates `mask_start..input_dim` are zeroed in masked samples.
    pub mask_start: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_identities: 20,
            val_identities: 5,
            test_identities: 40,
            samples_per_identity: 10,
            input_dim: 32,
            latent_dim: 8,
            nuisance_dim: 4,
            nuisance_scale: 1.0,
            noise: 0.5,
            mask_start: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub train: Vec<FeatureRecord>,
    pub val: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.train_identities < 2 || self.samples_per_identity < 2 {
            return Err(Error::InvalidConfig(
                "need >= 2 train identities and >= 2 samples per identity".into(),
            ));
        }
        if self.input_dim == 0
            || self.latent_dim == 0
            || self.mask_start == 0
            || self.mask_start >= self.input_dim
        {
            return Err(Error::InvalidConfig(format!(
                "mask band {}..{} must be a proper, non-empty suffix",
                self.mask_start, self.input_dim
            )));
        }
        Ok(())
    }
}

/// Zeroes the occluded band of a raw input.
pub fn apply_band_mask(x: &Vec64, mask_start: usize) -> Vec64 {
    let mut m = x.clone();
    for v in &mut m.as_mut_slice()[mask_start.min(x.dim())..] {
        *v = 0.0;
    }
    m
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let mut prng = Prng::new(cfg.seed);
    let d = cfg.input_dim;
    let mix_scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let mixing: Vec<f64> = (0..d * cfg.latent_dim)
        .map(|_| mix_scale * prng.normal())
        .collect();
    let nuis_scale = cfg.nuisance_scale / (cfg.nuisance_dim.max(1) as f64).sqrt();
    let nuisance: Vec<f64> = (0..d * cfg.nuisance_dim)
        .map(|_| nuis_scale * prng.normal())
        .collect();

    let mut split = |offset: u32, count: u32| -> Result<Vec<FeatureRecord>> {
        let mut out = Vec::with_capacity((count * cfg.samples_per_identity * 2) as usize);
        for id in 0..count {
            let z: Vec<f64> = (0..cfg.latent_dim).map(|_| prng.normal()).collect();
            let mean: Vec<f64> = (0..d)
                .map(|r| {
                    (0..cfg.latent_dim)
                        .map(|c| mixing[r * cfg.latent_dim + c] * z[c])
                        .sum()
                })
                .collect();
            for s in 0..cfg.samples_per_identity {
                let n: Vec<f64> = (0..cfg.nuisance_dim).map(|_| prng.normal()).collect();
                let x: Vec<f64> = (0..d)
                    .map(|r| {
                        let nu: f64 = (0..cfg.nuisance_dim)
                            .map(|c| nuisance[r * cfg.nuisance_dim + c] * n[c])
                            .sum();
                        mean[r] + nu + cfg.noise * prng.normal()
                    })
                    .collect();
                let x = Vec64::new(x)?;
                let masked = apply_band_mask(&x, cfg.mask_start);
                out.push(FeatureRecord {
                    identity: offset + id,
                    sample_id: s,
                    masked: false,
                    feature: x,
                });
                out.push(FeatureRecord {
                    identity: offset + id,
                    sample_id: s,
                    masked: true,
                    feature: masked,
                });
            }
        }
        Ok(out)
    };

    let train = split(0, cfg.train_identities)?;
    let val = split(VAL_ID_OFFSET, cfg.val_identities)?;
    let test = split(TEST_ID_OFFSET, cfg.test_identities)?;
    Ok(SyntheticBenchmark { train, val, test })
}
