//! Feature files, verification pair protocols, score files and evaluation.
//!
//! Feature file layout (all little-endian):
//!
//! ```text
//! "MFRE" | version u16 | dim u32 | count u64
//! count × (identity u32 | sample_id u32 | masked u8 | dim × f32)
//! crc32 u32   (over every preceding byte)
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::container::{self, Reader, Writer};
use crate::embedder::LinearEmbedder;
use crate::error::{Error, Result};
use crate::metrics::{self, ScoreSet};
use crate::numkit::{Prng, Vec64};

const MAGIC: &[u8; 4] = b"MFRE";

/// Identifies one sample: `(identity, sample_id, masked)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub identity: u32,
    pub sample_id: u32,
    pub masked: bool,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = if self.masked { 'm' } else { 'u' };
        write!(f, "{}:{}:{}", self.identity, self.sample_id, m)
    }
}

impl FromStr for RecordKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("record key {s:?} is not identity:sample:u|m"));
        let mut parts = s.split(':');
        let identity = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let sample_id = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let masked = match parts.next() {
            Some("m") => true,
            Some("u") => false,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(RecordKey {
            identity,
            sample_id,
            masked,
        })
    }
}

/// One feature vector with its identity label and mask flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub identity: u32,
    pub sample_id: u32,
    pub masked: bool,
    pub feature: Vec64,
}

impl FeatureRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            identity: self.identity,
            sample_id: self.sample_id,
            masked: self.masked,
        }
    }
}

fn check_records(records: &[FeatureRecord]) -> Result<usize> {
    let dim = records.first().map_or(0, |r| r.feature.dim());
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.feature.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: r.feature.dim(),
            });
        }
        if !seen.insert(r.key()) {
            return Err(Error::DuplicateRecord(r.key().to_string()));
        }
    }
    Ok(dim)
}

pub fn features_to_bytes(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let dim = check_records(records)?;
    let mut w = Writer::new(MAGIC);
    w.u32(dim as u32);
    w.u64(records.len() as u64);
    for r in records {
        w.u32(r.identity);
        w.u32(r.sample_id);
        w.u8(r.masked as u8);
        for &x in r.feature.as_slice() {
            let x32 = x as f32;
            if !x32.is_finite() {
                return Err(Error::NonFinite("feature (exceeds f32 range)"));
            }
            w.f32(x32);
        }
    }
    Ok(w.finish())
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut r = Reader::open(bytes, MAGIC)?;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let per_record = 9 + 4 * dim;
    if r.remaining() != count.saturating_mul(per_record) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: r
                .remaining()
                .checked_div(count)
                .map_or(0, |b| b.saturating_sub(9) / 4),
        });
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let identity = r.u32()?;
        let sample_id = r.u32()?;
        let masked = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("mask flag {other}"))),
        };
        let feature = (0..dim)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureRecord {
            identity,
            sample_id,
            masked,
            feature: Vec64::new(feature)?,
        });
    }
    r.expect_end()?;
    check_records(&out)?;
    Ok(out)
}

pub fn write_features(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    container::write_file(path.as_ref(), &features_to_bytes(records)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    features_from_bytes(&fs::read(path)?)
}

/// Which side of each comparison is masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairMode {
    /// Unmasked reference, masked probe.
    #[serde(rename = "U-M")]
    UnmaskedMasked,
    /// Masked reference, masked probe.
    #[serde(rename = "M-M")]
    MaskedMasked,
}

impl PairMode {
    pub const ALL: [PairMode; 2] = [PairMode::UnmaskedMasked, PairMode::MaskedMasked];

    pub fn label(self) -> &'static str {
        match self {
            PairMode::UnmaskedMasked => "U-M",
            PairMode::MaskedMasked => "M-M",
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Genuine,
    Impostor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub reference: RecordKey,
    pub probe: RecordKey,
    pub label: PairLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairList {
    pub mode: PairMode,
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn count(&self, label: PairLabel) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }
}

/// How impostor comparisons are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpostorSampling {
    /// `ratio × genuine-count` pairs drawn uniformly without replacement.
    Ratio(f64),
    /// Every cross-identity pair.
    Exhaustive,
}

impl Default for ImpostorSampling {
    fn default() -> Self {
        ImpostorSampling::Ratio(1.0)
    }
}

/// Builds the comparison protocol for one mode. All genuine pairs are kept;
/// impostors follow `sampling`.
///
/// U-M pairs every unmasked reference with every masked probe. M-M pairs each
/// unordered couple of distinct masked records once.
pub fn build_pairs(
    records: &[FeatureRecord],
    mode: PairMode,
    prng: &mut Prng,
    sampling: ImpostorSampling,
) -> Result<PairList> {
    let mut keys: Vec<RecordKey> = records.iter().map(FeatureRecord::key).collect();
    keys.sort();
    keys.dedup();
    let masked: Vec<RecordKey> = keys.iter().copied().filter(|k| k.masked).collect();
    let unmasked: Vec<RecordKey> = keys.iter().copied().filter(|k| !k.masked).collect();

    let mut genuine = Vec::new();
    let mut candidates = Vec::new();
    let mut push = |r: RecordKey, p: RecordKey| {
        if r.identity == p.identity {
            genuine.push(Pair {
                reference: r,
                probe: p,
                label: PairLabel::Genuine,
            });
        } else {
            candidates.push(Pair {
                reference: r,
                probe: p,
                label: PairLabel::Impostor,
            });
        }
    };
    match mode {
        PairMode::UnmaskedMasked => {
            for &r in &unmasked {
                for &p in &masked {
                    push(r, p);
                }
            }
        }
        PairMode::MaskedMasked => {
            for (i, &r) in masked.iter().enumerate() {
                for &p in &masked[i + 1..] {
                    push(r, p);
                }
            }
        }
    }

    let with_genuine: HashSet<u32> = genuine.iter().map(|p| p.reference.identity).collect();
    if with_genuine.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{mode} protocol needs genuine pairs for >= 2 identities, found {}",
            with_genuine.len()
        )));
    }

    let impostors = match sampling {
        ImpostorSampling::Exhaustive => candidates,
        ImpostorSampling::Ratio(ratio) => {
            if !(ratio > 0.0 && ratio.is_finite()) {
                return Err(Error::InvalidConfig(format!("impostor ratio {ratio}")));
            }
            let want = ((genuine.len() as f64 * ratio).round() as usize).clamp(1, candidates.len());
            let mut picked = index::sample(prng, candidates.len(), want).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| candidates[i]).collect()
        }
    };

    let mut pairs = genuine;
    pairs.extend(impostors);
    Ok(PairList { mode, pairs })
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    pair_id: usize,
    ref_id: String,
    probe_id: String,
    label: PairLabel,
}

pub fn write_pairs(path: impl AsRef<Path>, list: &PairList) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, p) in list.pairs.iter().enumerate() {
        w.serialize(PairRow {
            pair_id: i,
            ref_id: p.reference.to_string(),
            probe_id: p.probe.to_string(),
            label: p.label,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a pair file; the mode is inferred from the reference mask flags.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<PairList> {
    let mut r = csv::Reader::from_path(path)?;
    let mut pairs = Vec::new();
    for row in r.deserialize::<PairRow>() {
        let row = row?;
        pairs.push(Pair {
            reference: row.ref_id.parse()?,
            probe: row.probe_id.parse()?,
            label: row.label,
        });
    }
    let mode = if pairs.iter().any(|p| p.reference.masked) {
        PairMode::MaskedMasked
    } else {
        PairMode::UnmaskedMasked
    };
    Ok(PairList { mode, pairs })
}

/// The path a raw record takes to an embedding: optional frozen backbone,
/// then optional embedding head. With neither, the stored feature itself is
/// scored.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pipeline<'a> {
    pub backbone: Option<&'a FrozenBackbone>,
    pub embedder: Option<&'a LinearEmbedder>,
}

impl<'a> Pipeline<'a> {
    pub fn embed(&self, feature: &Vec64) -> Result<Vec64> {
        let phi = match self.backbone {
            Some(bb) => bb.features(feature)?,
            None => feature.clone(),
        };
        match self.embedder {
            Some(e) => e.embed(&phi),
            None => Ok(phi),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub pair: Pair,
    pub score: f64,
}

/// Scores every pair in list order.
pub fn score_pairs(
    pipeline: &Pipeline<'_>,
    records: &[FeatureRecord],
    list: &PairList,
) -> Result<Vec<ScoredPair>> {
    let by_key: HashMap<RecordKey, &FeatureRecord> = records.iter().map(|r| (r.key(), r)).collect();
    let mut needed: Vec<RecordKey> = list
        .pairs
        .iter()
        .flat_map(|p| [p.reference, p.probe])
        .collect();
    needed.sort();
    needed.dedup();
    let embedded: BTreeMap<RecordKey, Vec64> = needed
        .par_iter()
        .map(|k| {
            let rec = by_key
                .get(k)
                .ok_or_else(|| Error::MissingRecord(k.to_string()))?;
            Ok((*k, pipeline.embed(&rec.feature)?))
        })
        .collect::<Result<_>>()?;
    list.pairs
        .iter()
        .map(|p| {
            Ok(ScoredPair {
                pair: *p,
                score: metrics::score(&embedded[&p.reference], &embedded[&p.probe])?,
            })
        })
        .collect()
}

pub fn scores_to_set(scored: &[ScoredPair]) -> Result<ScoreSet> {
    let (g, i): (Vec<&ScoredPair>, Vec<&ScoredPair>) = scored
        .iter()
        .partition(|s| s.pair.label == PairLabel::Genuine);
    ScoreSet::new(
        g.iter().map(|s| s.score).collect(),
        i.iter().map(|s| s.score).collect(),
    )
}

/// Embeds both sides of each pair, scores them, and partitions by label.
pub fn evaluate(
    pipeline: &Pipeline<'_>,
    records: &[FeatureRecord],
    list: &PairList,
) -> Result<ScoreSet> {
    scores_to_set(&score_pairs(pipeline, records, list)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    pair_id: usize,
    ref_id: String,
    probe_id: String,
    label: PairLabel,
    score: f64,
}

pub fn write_scores(path: impl AsRef<Path>, scored: &[ScoredPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, s) in scored.iter().enumerate() {
        w.serialize(ScoreRow {
            pair_id: i,
            ref_id: s.pair.reference.to_string(),
            probe_id: s.pair.probe.to_string(),
            label: s.pair.label,
            score: s.score,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoredPair>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<ScoreRow>()
        .map(|row| {
            let row = row?;
            Ok(ScoredPair {
                pair: Pair {
                    reference: row.ref_id.parse()?,
                    probe: row.probe_id.parse()?,
                    label: row.label,
                },
                score: row.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(identity: u32, sample_id: u32, masked: bool, f: &[f64]) -> FeatureRecord {
        FeatureRecord {
            identity,
            sample_id,
            masked,
            feature: Vec64::new(f.to_vec()).unwrap(),
        }
    }

    /// 2 identities × (1 unmasked + 2 masked).
    fn small_set() -> Vec<FeatureRecord> {
        let mut out = Vec::new();
        for id in 0..2 {
            out.push(rec(id, 0, false, &[1.0, id as f64]));
            out.push(rec(id, 1, true, &[0.5, id as f64 + 0.1]));
            out.push(rec(id, 2, true, &[0.4, id as f64 + 0.2]));
        }
        out
    }

    #[test]
    fn features_round_trip() {
        let rs = vec![
            rec(3, 0, false, &[0.5, -1.25, 2.0]),
            rec(3, 0, true, &[0.25, 0.0, 8.0]),
            rec(9, 4, true, &[-3.5, 1.0, 0.125]),
        ];
        let bytes = features_to_bytes(&rs).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 4 + 8 + 3 * (9 + 12) + 4);
        assert_eq!(features_from_bytes(&bytes).unwrap(), rs);
    }

    #[test]
    fn empty_feature_file() {
        let bytes = features_to_bytes(&[]).unwrap();
        assert!(features_from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_or_corrupt_feature_file() {
        let bytes = features_to_bytes(&small_set()).unwrap();
        for cut in [1, 5, 20, bytes.len() - 7] {
            assert!(matches!(
                features_from_bytes(&bytes[..bytes.len() - cut]),
                Err(Error::CrcMismatch)
            ));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(
            features_from_bytes(&flipped),
            Err(Error::CrcMismatch)
        ));
        let mut magic = bytes;
        magic[..4].copy_from_slice(b"MFEW");
        assert!(matches!(
            features_from_bytes(&magic),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn writer_rejects_mixed_dims_and_duplicates() {
        let rs = vec![rec(0, 0, false, &[1.0]), rec(0, 1, false, &[1.0, 2.0])];
        assert!(matches!(
            features_to_bytes(&rs),
            Err(Error::DimMismatch { .. })
        ));
        let rs = vec![rec(0, 0, false, &[1.0]), rec(0, 0, false, &[2.0])];
        assert!(matches!(
            features_to_bytes(&rs),
            Err(Error::DuplicateRecord(_))
        ));
    }

    #[test]
    fn record_key_text_form() {
        let k = RecordKey {
            identity: 12,
            sample_id: 3,
            masked: true,
        };
        assert_eq!(k.to_string(), "12:3:m");
        assert_eq!("12:3:m".parse::<RecordKey>().unwrap(), k);
        assert!("12:3".parse::<RecordKey>().is_err());
        assert!("12:3:x".parse::<RecordKey>().is_err());
        assert!("a:3:u".parse::<RecordKey>().is_err());
    }

    #[test]
    fn um_exhaustive_counts() {
        let list = build_pairs(
            &small_set(),
            PairMode::UnmaskedMasked,
            &mut Prng::new(0),
            ImpostorSampling::Exhaustive,
        )
        .unwrap();
        assert_eq!(list.count(PairLabel::Genuine), 4);
        assert_eq!(list.count(PairLabel::Impostor), 4);
        for p in &list.pairs {
            assert!(!p.reference.masked && p.probe.masked);
            assert_eq!(
                p.label == PairLabel::Genuine,
                p.reference.identity == p.probe.identity
            );
        }
    }

    #[test]
    fn mm_never_uses_unmasked() {
        let list = build_pairs(
            &small_set(),
            PairMode::MaskedMasked,
            &mut Prng::new(0),
            ImpostorSampling::Exhaustive,
        )
        .unwrap();
        assert_eq!(list.count(PairLabel::Genuine), 2);
        assert_eq!(list.count(PairLabel::Impostor), 4);
        assert!(list
            .pairs
            .iter()
            .all(|p| p.reference.masked && p.probe.masked));
        assert!(list.pairs.iter().all(|p| p.reference != p.probe));
    }

    #[test]
    fn sampled_pairs_are_seeded() {
        let mut rs = Vec::new();
        for id in 0..6 {
            rs.push(rec(id, 0, false, &[1.0]));
            for s in 1..4 {
                rs.push(rec(id, s, true, &[1.0]));
            }
        }
        let a = build_pairs(
            &rs,
            PairMode::UnmaskedMasked,
            &mut Prng::new(5),
            ImpostorSampling::Ratio(1.0),
        )
        .unwrap();
        let b = build_pairs(
            &rs,
            PairMode::UnmaskedMasked,
            &mut Prng::new(5),
            ImpostorSampling::Ratio(1.0),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(PairLabel::Genuine), 18);
        assert_eq!(a.count(PairLabel::Impostor), 18);
        let c = build_pairs(
            &rs,
            PairMode::UnmaskedMasked,
            &mut Prng::new(6),
            ImpostorSampling::Ratio(1.0),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_identity_is_insufficient() {
        let rs: Vec<_> = small_set()
            .into_iter()
            .filter(|r| r.identity == 0)
            .collect();
        assert!(matches!(
            build_pairs(
                &rs,
                PairMode::UnmaskedMasked,
                &mut Prng::new(0),
                ImpostorSampling::Exhaustive
            ),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn degenerate_features_give_chance_auc() {
        let rs: Vec<_> = small_set()
            .into_iter()
            .map(|mut r| {
                r.feature = Vec64::new(vec![1.0, 2.0]).unwrap();
                r
            })
            .collect();
        let list = build_pairs(
            &rs,
            PairMode::UnmaskedMasked,
            &mut Prng::new(0),
            ImpostorSampling::Exhaustive,
        )
        .unwrap();
        let s = evaluate(&Pipeline::default(), &rs, &list).unwrap();
        let first = s.genuine()[0];
        assert!(s.genuine().iter().chain(s.impostor()).all(|x| *x == first));
        assert_eq!(metrics::auc(&s), 0.5);
    }

    #[test]
    fn evaluation_ignores_pair_order() {
        let rs = small_set();
        let mut list = build_pairs(
            &rs,
            PairMode::UnmaskedMasked,
            &mut Prng::new(0),
            ImpostorSampling::Exhaustive,
        )
        .unwrap();
        let a = evaluate(&Pipeline::default(), &rs, &list).unwrap();
        list.pairs.reverse();
        list.pairs.swap(1, 4);
        let b = evaluate(&Pipeline::default(), &rs, &list).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            metrics::MetricReport::compute(&a),
            metrics::MetricReport::compute(&b)
        );
    }

    #[test]
    fn missing_record_reported() {
        let rs = small_set();
        let list = build_pairs(
            &rs,
            PairMode::UnmaskedMasked,
            &mut Prng::new(0),
            ImpostorSampling::Exhaustive,
        )
        .unwrap();
        assert!(matches!(
            evaluate(&Pipeline::default(), &rs[1..], &list),
            Err(Error::MissingRecord(_))
        ));
    }

    #[test]
    fn pair_and_score_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rs = small_set();
        let list = build_pairs(
            &rs,
            PairMode::MaskedMasked,
            &mut Prng::new(0),
            ImpostorSampling::Exhaustive,
        )
        .unwrap();
        let pp = dir.path().join("pairs.csv");
        write_pairs(&pp, &list).unwrap();
        assert_eq!(read_pairs(&pp).unwrap(), list);

        let scored = score_pairs(&Pipeline::default(), &rs, &list).unwrap();
        let sp = dir.path().join("scores.csv");
        write_scores(&sp, &scored).unwrap();
        let text = fs::read_to_string(&sp).unwrap();
        assert!(text.starts_with("pair_id,ref_id,probe_id,label,score\n"));
        assert_eq!(read_scores(&sp).unwrap(), scored);
    }
}
