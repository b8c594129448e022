//! Step-wise ablation: CE features alone, CE + triplet head, CE + triplet +
//! MSE head, each scored in U-M and M-M mode on identity-disjoint test data.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{train_ce, BackboneConfig, CeReport};
use crate::dataio::{build_pairs, evaluate, FeatureRecord, ImpostorSampling, PairMode, Pipeline};
use crate::embedder::LinearEmbedder;
use crate::error::{Error, Result};
use crate::metrics::{roc, write_roc_csv, write_roc_svg, MetricReport, RocCurve};
use crate::numkit::Prng;
use crate::synthetic::{self, SyntheticConfig};
use crate::trainer::{
    mean_anchor_mse, sample_quadruplets, train_embedder, EmbedderTrainConfig, TrainLog,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Ce,
    CeTl,
    CeTlMse,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Ce, Arm::CeTl, Arm::CeTlMse];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Ce => "ce",
            Arm::CeTl => "ce_tl",
            Arm::CeTlMse => "ce_tl_mse",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Arm::Ce => "CE",
            Arm::CeTl => "CE + TL",
            Arm::CeTlMse => "CE + TL + MSE",
        }
    }

    fn use_mse(self) -> Option<bool> {
        match self {
            Arm::Ce => None,
            Arm::CeTl => Some(false),
            Arm::CeTlMse => Some(true),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown arm {s:?} (expected ce, ce_tl or ce_tl_mse)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub synthetic: SyntheticConfig,
    pub backbone: BackboneConfig,
    /// Shared by both head arms; `use_mse` is set per arm.
    pub embedder: EmbedderTrainConfig,
    pub arms: Vec<Arm>,
    pub impostors: ImpostorSampling,
    /// Test quadruplets used for the held-out anchor MSE.
    pub heldout_quadruplets: usize,
    pub eval_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::with_seed(0)
    }
}

impl AblationConfig {
    /// The documented benchmark: 20 training identities, 40 test identities,
    /// head trained for 1000 iterations at a constant learning rate of 0.1
    /// with MSE weight 8, every stochastic component seeded from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = AblationConfig {
            synthetic: SyntheticConfig::default(),
            backbone: BackboneConfig::default(),
            embedder: EmbedderTrainConfig::default(),
            arms: Arm::ALL.to_vec(),
            impostors: ImpostorSampling::Exhaustive,
            heldout_quadruplets: 2000,
            eval_seed: 0,
        };
        cfg.embedder.sgd.lr = 0.1;
        cfg.embedder.sgd.iterations = 1000;
        cfg.embedder.loss.mse_weight = 8.0;
        cfg.embedder.validate_every = 0;
        cfg.set_seed(seed);
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.backbone.sgd.seed = seed;
        self.embedder.sgd.seed = seed;
        self.eval_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.sgd.validate()?;
        self.embedder.validate()?;
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("no arms selected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmModeResult {
    pub arm: Arm,
    pub mode: PairMode,
    pub report: MetricReport,
    pub roc: RocCurve,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub embedder: Option<LinearEmbedder>,
    pub log: Option<TrainLog>,
    /// Mean anchor/masked-anchor MSE on test quadruplets (head arms only).
    pub heldout_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub ce_report: Option<CeReport>,
    pub arms: Vec<ArmResult>,
    pub rows: Vec<ArmModeResult>,
}

impl AblationResult {
    pub fn row(&self, arm: Arm, mode: PairMode) -> Option<&ArmModeResult> {
        self.rows.iter().find(|r| r.arm == arm && r.mode == mode)
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// Plain-text tables, one per mode. Error rates are percentages with one decimal.
    pub fn table_text(&self) -> String {
        let mut out = String::new();
        for mode in PairMode::ALL {
            let rows: Vec<&ArmModeResult> = self.rows.iter().filter(|r| r.mode == mode).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{mode}");
            let _ = writeln!(
                out,
                "{:<15} {:>7} {:>7} {:>7} {:>7} {:>9} {:>8}",
                "Method", "GMean", "IMean", "AUC", "EER%", "FMR100%", "FMR10%"
            );
            for r in rows {
                let m = &r.report;
                let _ = writeln!(
                    out,
                    "{:<15} {:>7.3} {:>7.3} {:>7.3} {:>7.1} {:>9.1} {:>8.1}",
                    r.arm.title(),
                    m.gmean,
                    m.imean,
                    m.auc,
                    100.0 * m.eer,
                    100.0 * m.fmr100,
                    100.0 * m.fmr10
                );
            }
            out.push('\n');
        }
        out
    }

    pub fn write_table_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "arm",
            "mode",
            "gmean",
            "imean",
            "auc",
            "eer_pct",
            "fmr100_pct",
            "fmr10_pct",
            "heldout_mse",
        ])?;
        for r in &self.rows {
            let m = &r.report;
            let mse = self
                .arm(r.arm)
                .and_then(|a| a.heldout_mse)
                .map(|v| format!("{v:.6e}"))
                .unwrap_or_default();
            w.write_record([
                r.arm.name().to_string(),
                r.mode.label().to_string(),
                format!("{:.4}", m.gmean),
                format!("{:.4}", m.imean),
                format!("{:.4}", m.auc),
                format!("{:.1}", 100.0 * m.eer),
                format!("{:.1}", 100.0 * m.fmr100),
                format!("{:.1}", 100.0 * m.fmr10),
                mse,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `table.txt`, `table.csv`, per arm/mode ROC CSVs, one ROC SVG
    /// per mode and the head arms' training logs into `dir`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.txt"), self.table_text())?;
        self.write_table_csv(dir.join("table.csv"))?;
        for mode in PairMode::ALL {
            let rows: Vec<&ArmModeResult> = self.rows.iter().filter(|r| r.mode == mode).collect();
            if rows.is_empty() {
                continue;
            }
            let tag = mode_tag(mode);
            for r in &rows {
                write_roc_csv(dir.join(format!("roc_{}_{tag}.csv", r.arm.name())), &r.roc)?;
            }
            let curves: Vec<(&str, &RocCurve)> =
                rows.iter().map(|r| (r.arm.title(), &r.roc)).collect();
            write_roc_svg(
                dir.join(format!("roc_{tag}.svg")),
                &format!("ROC ({mode})"),
                &curves,
            )?;
        }
        for a in &self.arms {
            if let Some(log) = &a.log {
                log.save_jsonl(dir.join(format!("train_{}.jsonl", a.arm.name())))?;
            }
        }
        Ok(())
    }
}

pub fn mode_tag(mode: PairMode) -> &'static str {
    match mode {
        PairMode::UnmaskedMasked => "um",
        PairMode::MaskedMasked => "mm",
    }
}

/// Full ablation on the synthetic benchmark: stage 1 once on the training
/// split, then every selected arm on the frozen features.
pub fn run_synthetic(cfg: &AblationConfig) -> Result<AblationResult> {
    cfg.validate()?;
    let bench = synthetic::generate(&cfg.synthetic)?;
    let (bb, ce_report) = train_ce(&bench.train, &cfg.backbone)?;
    let frozen = bb.freeze();
    let train = frozen.featurize(&bench.train)?;
    let val = frozen.featurize(&bench.val)?;
    let test = frozen.featurize(&bench.test)?;
    let mut result = run_on_features(&train, Some(&val), &test, cfg)?;
    result.ce_report = Some(ce_report);
    Ok(result)
}

/// Ablation on precomputed backbone features (stage 1 already done
/// elsewhere). `train` and `test` must not share identities.
pub fn run_on_features(
    train: &[FeatureRecord],
    validation: Option<&[FeatureRecord]>,
    test: &[FeatureRecord],
    cfg: &AblationConfig,
) -> Result<AblationResult> {
    cfg.validate()?;
    let train_ids: std::collections::BTreeSet<u32> = train.iter().map(|r| r.identity).collect();
    if let Some(shared) = test.iter().find(|r| train_ids.contains(&r.identity)) {
        return Err(Error::InvalidConfig(format!(
            "identity {} appears in both train and test",
            shared.identity
        )));
    }

    let mut prng = Prng::new(cfg.eval_seed);
    let pair_lists = PairMode::ALL
        .into_iter()
        .map(|mode| build_pairs(test, mode, &mut prng, cfg.impostors))
        .collect::<Result<Vec<_>>>()?;
    let heldout = sample_quadruplets(
        test,
        cfg.heldout_quadruplets,
        &mut prng,
        cfg.embedder.neg_masked,
    )?;

    let mut arms = Vec::new();
    let mut rows = Vec::new();
    for &arm in &cfg.arms {
        let (embedder, log) = match arm.use_mse() {
            None => (None, None),
            Some(use_mse) => {
                let ecfg = EmbedderTrainConfig {
                    use_mse,
                    ..cfg.embedder.clone()
                };
                let (e, log) = train_embedder(train, validation, &ecfg)?;
                (Some(e), Some(log))
            }
        };
        let pipeline = Pipeline {
            backbone: None,
            embedder: embedder.as_ref(),
        };
        for list in &pair_lists {
            let scores = evaluate(&pipeline, test, list)?;
            rows.push(ArmModeResult {
                arm,
                mode: list.mode,
                report: MetricReport::compute(&scores),
                roc: roc(&scores),
            });
        }
        let heldout_mse = embedder
            .as_ref()
            .map(|e| mean_anchor_mse(e, test, &heldout))
            .transpose()?;
        arms.push(ArmResult {
            arm,
            embedder,
            log,
            heldout_mse,
        });
    }
    Ok(AblationResult {
        ce_report: None,
        arms,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AblationConfig {
        let mut cfg = AblationConfig::with_seed(3);
        cfg.synthetic.train_identities = 6;
        cfg.synthetic.val_identities = 2;
        cfg.synthetic.test_identities = 3;
        cfg.synthetic.samples_per_identity = 4;
        cfg.backbone.sgd.iterations = 40;
        cfg.embedder.sgd.iterations = 20;
        cfg.embedder.sgd.batch_size = 8;
        cfg.embedder.embedding_dim = 16;
        cfg.embedder.validate_every = 10;
        cfg.heldout_quadruplets = 50;
        cfg
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("tl".parse::<Arm>().is_err());
    }

    #[test]
    fn table_shape_three_arms_two_modes() {
        let r = run_synthetic(&small()).unwrap();
        assert_eq!(r.rows.len(), 6);
        let text = r.table_text();
        assert!(text.contains("U-M") && text.contains("M-M"));
        assert_eq!(text.lines().filter(|l| l.starts_with("CE")).count(), 6);
        assert!(r.arm(Arm::Ce).unwrap().heldout_mse.is_none());
        assert!(r.arm(Arm::CeTlMse).unwrap().heldout_mse.is_some());
    }

    #[test]
    fn deterministic() {
        let a = run_synthetic(&small()).unwrap();
        let b = run_synthetic(&small()).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.table_text(), b.table_text());
    }

    #[test]
    fn arm_subset() {
        let cfg = AblationConfig {
            arms: vec![Arm::Ce],
            ..small()
        };
        let r = run_synthetic(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|x| x.arm == Arm::Ce));
    }

    #[test]
    fn overlapping_identities_rejected() {
        let bench = synthetic::generate(&small().synthetic).unwrap();
        assert!(run_on_features(&bench.train, None, &bench.train, &small()).is_err());
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        run_synthetic(&small())
            .unwrap()
            .write_outputs(dir.path())
            .unwrap();
        for f in [
            "table.txt",
            "table.csv",
            "roc_um.svg",
            "roc_mm.svg",
            "roc_ce_tl_mse_um.csv",
            "train_ce_tl.jsonl",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
