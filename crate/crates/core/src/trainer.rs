//! Cascade orchestration: classification pre-training of the backbone, then
//! embedding-head optimization on frozen features with randomly drawn
//! quadruplets (no mining).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{train_ce, BackboneConfig, CeReport, FrozenBackbone};
use crate::dataio::{build_pairs, evaluate, FeatureRecord, ImpostorSampling, PairMode, Pipeline};
use crate::embedder::{LinearEmbedder, DEFAULT_EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, combined_loss_grad, mse, LossConfig, QuadEmbeddings};
use crate::metrics;
use crate::numkit::{l2_normalize, l2_normalize_backward, matvec, Mat64, Prng, Vec64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Number of mini-batch updates.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl SgdConfig {
    /// `lr = 0` is accepted and yields a null update.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v − lr·(g + wd·w)`, `w ← w + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grad.len(), self.velocity.len());
        for ((w, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v - lr * (g + self.weight_decay * *w);
            *w += *v;
        }
    }
}

/// Record indices for one training example of the combined loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quadruplet {
    pub anchor: usize,
    pub masked_anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

struct IdentityPool {
    identity: u32,
    unmasked: Vec<usize>,
    masked: Vec<usize>,
    all: Vec<usize>,
}

/// Uniform quadruplet sampler over a fixed record set.
///
/// The masked anchor is the masked view of the anchor sample when the set
/// holds one (same identity and sample id), otherwise a uniformly drawn
/// masked sample of the anchor identity.
pub struct QuadSampler {
    pools: Vec<IdentityPool>,
    twin: HashMap<usize, usize>,
    neg_masked: bool,
}

impl QuadSampler {
    pub fn new(records: &[FeatureRecord], neg_masked: bool) -> Result<Self> {
        let mut by_id: BTreeMap<u32, IdentityPool> = BTreeMap::new();
        let mut masked_by_sample = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let pool = by_id.entry(r.identity).or_insert_with(|| IdentityPool {
                identity: r.identity,
                unmasked: Vec::new(),
                masked: Vec::new(),
                all: Vec::new(),
            });
            pool.all.push(i);
            if r.masked {
                pool.masked.push(i);
                masked_by_sample.insert((r.identity, r.sample_id), i);
            } else {
                pool.unmasked.push(i);
            }
        }
        for pool in by_id.values() {
            if pool.unmasked.is_empty() || pool.masked.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "identity {} has {} unmasked and {} masked samples; need >= 1 and >= 2",
                    pool.identity,
                    pool.unmasked.len(),
                    pool.masked.len()
                )));
            }
        }
        if by_id.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{} identit(y/ies); quadruplets need >= 2",
                by_id.len()
            )));
        }
        let twin = records
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.masked)
            .filter_map(|(i, r)| {
                masked_by_sample
                    .get(&(r.identity, r.sample_id))
                    .map(|&m| (i, m))
            })
            .collect();
        Ok(QuadSampler {
            pools: by_id.into_values().collect(),
            twin,
            neg_masked,
        })
    }

    pub fn draw(&self, prng: &mut Prng) -> Quadruplet {
        let k = prng.below(self.pools.len());
        let pool = &self.pools[k];
        let anchor = pool.unmasked[prng.below(pool.unmasked.len())];
        let masked_anchor = match self.twin.get(&anchor) {
            Some(&m) => m,
            None => pool.masked[prng.below(pool.masked.len())],
        };
        let am_pos = pool
            .masked
            .iter()
            .position(|&m| m == masked_anchor)
            .expect("twin is in pool");
        let mut j = prng.below(pool.masked.len() - 1);
        if j >= am_pos {
            j += 1;
        }
        let positive = pool.masked[j];

        let mut nk = prng.below(self.pools.len() - 1);
        if nk >= k {
            nk += 1;
        }
        let neg_pool = &self.pools[nk];
        let candidates = if self.neg_masked {
            &neg_pool.masked
        } else {
            &neg_pool.all
        };
        let negative = candidates[prng.below(candidates.len())];
        Quadruplet {
            anchor,
            masked_anchor,
            positive,
            negative,
        }
    }

    pub fn draw_many(&self, count: usize, prng: &mut Prng) -> Vec<Quadruplet> {
        (0..count).map(|_| self.draw(prng)).collect()
    }
}

pub fn sample_quadruplets(
    records: &[FeatureRecord],
    count: usize,
    prng: &mut Prng,
    neg_masked: bool,
) -> Result<Vec<Quadruplet>> {
    Ok(QuadSampler::new(records, neg_masked)?.draw_many(count, prng))
}

/// Checks the structural constraints every quadruplet must satisfy.
pub fn quadruplet_is_valid(records: &[FeatureRecord], q: &Quadruplet, neg_masked: bool) -> bool {
    let get = |i: usize| records.get(i);
    let (Some(a), Some(am), Some(p), Some(n)) = (
        get(q.anchor),
        get(q.masked_anchor),
        get(q.positive),
        get(q.negative),
    ) else {
        return false;
    };
    !a.masked
        && am.masked
        && p.masked
        && am.identity == a.identity
        && p.identity == a.identity
        && q.positive != q.masked_anchor
        && n.identity != a.identity
        && (!neg_masked || n.masked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderTrainConfig {
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    /// Adds the masked-anchor MSE term; off trains the plain triplet loss.
    pub use_mse: bool,
    pub embedding_dim: usize,
    /// Draw negatives only from masked samples.
    pub neg_masked: bool,
    /// Compute loss distances on re-normalized embeddings.
    pub normalize_embeddings: bool,
    /// Validation interval in iterations (0 disables).
    pub validate_every: usize,
    pub lr_floor: f64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            sgd: SgdConfig::default(),
            loss: LossConfig::default(),
            use_mse: true,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            neg_masked: true,
            normalize_embeddings: false,
            validate_every: 200,
            lr_floor: 1e-5,
        }
    }
}

impl EmbedderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.loss.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// The loss actually optimized: the MSE weight is zeroed when `use_mse` is off.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            mse_weight: if self.use_mse {
                self.loss.mse_weight
            } else {
                0.0
            },
            ..self.loss
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Iteration {
        iteration: usize,
        loss: f64,
        lr: f64,
    },
    Validation {
        iteration: usize,
        um_eer: f64,
    },
    LrDecay {
        iteration: usize,
        from: f64,
        to: f64,
    },
    Summary {
        iterations: usize,
        quadruplets_drawn: u64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub events: Vec<LogEvent>,
    pub quadruplets_drawn: u64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Iteration { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Unit-normalized features, computed once since the backbone is frozen.
fn unit_features(records: &[FeatureRecord]) -> Result<Vec<Vec64>> {
    records.iter().map(|r| l2_normalize(&r.feature)).collect()
}

struct QuadPass {
    loss: f64,
    /// `(record index, ∂L/∂x)` for each of the four embeddings.
    grads: [(usize, Vec64); 4],
}

fn quad_pass(
    weights: &Mat64,
    units: &[Vec64],
    q: &Quadruplet,
    loss: &LossConfig,
    normalize: bool,
) -> Result<QuadPass> {
    let idx = [q.anchor, q.masked_anchor, q.positive, q.negative];
    let raw: Vec<Vec64> = idx
        .iter()
        .map(|&i| matvec(weights, &units[i]))
        .collect::<Result<_>>()?;
    let emb: Vec<Vec64> = if normalize {
        raw.iter().map(l2_normalize).collect::<Result<_>>()?
    } else {
        raw.clone()
    };
    let quad = QuadEmbeddings::new(
        emb[0].clone(),
        emb[1].clone(),
        emb[2].clone(),
        emb[3].clone(),
    )?;
    let value = combined_loss(&quad, loss)?;
    let g = combined_loss_grad(&quad, loss)?;
    let mut d = [g.d_a, g.d_am, g.d_p, g.d_n];
    if normalize {
        for (di, x) in d.iter_mut().zip(&raw) {
            *di = l2_normalize_backward(x, di)?;
        }
    }
    let [d0, d1, d2, d3] = d;
    Ok(QuadPass {
        loss: value,
        grads: [(idx[0], d0), (idx[1], d1), (idx[2], d2), (idx[3], d3)],
    })
}

/// Batch loss and weight gradient. Per-quadruplet work fans out across
/// threads; every reduction runs in quadruplet order, so the result does not
/// depend on the thread count.
pub(crate) fn batch_loss_grad(
    weights: &Mat64,
    units: &[Vec64],
    batch: &[Quadruplet],
    loss: &LossConfig,
    normalize: bool,
) -> Result<(f64, Mat64)> {
    let passes: Vec<QuadPass> = batch
        .par_iter()
        .map(|q| quad_pass(weights, units, q, loss, normalize))
        .collect::<Result<_>>()?;
    let factor = loss.reduction.factor(batch.len());
    let total = passes.iter().map(|p| p.loss).sum::<f64>() * factor;

    let cols = weights.cols();
    let mut grad = Mat64::zeros(weights.rows(), cols);
    grad.as_mut_slice()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| {
            for p in &passes {
                for (i, d) in &p.grads {
                    let s = factor * d.as_slice()[r];
                    if s != 0.0 {
                        for (g, u) in row.iter_mut().zip(units[*i].as_slice()) {
                            *g += s * u;
                        }
                    }
                }
            }
        });
    Ok((total, grad))
}

fn validation_eer(
    embedder: &LinearEmbedder,
    records: &[FeatureRecord],
    pairs: &crate::dataio::PairList,
) -> Result<f64> {
    let pipeline = Pipeline {
        backbone: None,
        embedder: Some(embedder),
    };
    Ok(metrics::eer(&evaluate(&pipeline, records, pairs)?))
}

/// Trains a fresh embedding head on frozen features.
///
/// Each iteration draws `batch_size` new quadruplets. When `validation` is
/// given, U-M EER on it is logged every `validate_every` iterations and the
/// learning rate is divided by ten whenever that EER gets worse.
pub fn train_embedder(
    records: &[FeatureRecord],
    validation: Option<&[FeatureRecord]>,
    cfg: &EmbedderTrainConfig,
) -> Result<(LinearEmbedder, TrainLog)> {
    cfg.validate()?;
    let sampler = QuadSampler::new(records, cfg.neg_masked)?;
    let units = unit_features(records)?;
    let in_dim = units[0].dim();
    let loss_cfg = cfg.effective_loss();

    let mut prng = Prng::new(cfg.sgd.seed);
    let mut embedder = LinearEmbedder::init_random(in_dim, cfg.embedding_dim, &mut prng)?;
    let mut opt = Sgd::new(
        in_dim * cfg.embedding_dim,
        cfg.sgd.momentum,
        cfg.sgd.weight_decay,
    );

    let val_pairs = match validation {
        Some(v) if cfg.validate_every > 0 => Some(build_pairs(
            v,
            PairMode::UnmaskedMasked,
            &mut Prng::new(cfg.sgd.seed ^ 0x5eed),
            ImpostorSampling::Exhaustive,
        )?),
        _ => None,
    };

    let mut log = TrainLog::default();
    let mut lr = cfg.sgd.lr;
    let mut prev_eer: Option<f64> = None;
    for iteration in 0..cfg.sgd.iterations {
        let batch = sampler.draw_many(cfg.sgd.batch_size, &mut prng);
        log.quadruplets_drawn += batch.len() as u64;
        let (loss, grad) = batch_loss_grad(
            embedder.weights(),
            &units,
            &batch,
            &loss_cfg,
            cfg.normalize_embeddings,
        )?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::DivergenceDetected { iteration, loss });
        }
        opt.step(embedder.weights_mut().as_mut_slice(), grad.as_slice(), lr);
        log.events.push(LogEvent::Iteration {
            iteration,
            loss,
            lr,
        });

        if let (Some(pairs), Some(val)) = (&val_pairs, validation) {
            if (iteration + 1) % cfg.validate_every == 0 {
                let um_eer = validation_eer(&embedder, val, pairs)?;
                log.events.push(LogEvent::Validation { iteration, um_eer });
                if prev_eer.is_some_and(|p| um_eer > p) && lr > cfg.lr_floor {
                    let to = (lr * 0.1).max(cfg.lr_floor);
                    log.events.push(LogEvent::LrDecay {
                        iteration,
                        from: lr,
                        to,
                    });
                    lr = to;
                }
                prev_eer = Some(um_eer);
            }
        }
    }
    if !embedder.weights().is_finite() {
        return Err(Error::DivergenceDetected {
            iteration: cfg.sgd.iterations,
            loss: f64::NAN,
        });
    }
    log.events.push(LogEvent::Summary {
        iterations: cfg.sgd.iterations,
        quadruplets_drawn: log.quadruplets_drawn,
    });
    Ok((embedder, log))
}

/// Mean combined loss of `embedder` over fixed quadruplets.
pub fn mean_quad_loss(
    embedder: &LinearEmbedder,
    records: &[FeatureRecord],
    quads: &[Quadruplet],
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for q in quads {
        let e = |i: usize| embedder.embed(&records[i].feature);
        let quad = QuadEmbeddings::new(
            e(q.anchor)?,
            e(q.masked_anchor)?,
            e(q.positive)?,
            e(q.negative)?,
        )?;
        total += combined_loss(&quad, loss)?;
    }
    Ok(total / quads.len().max(1) as f64)
}

/// Mean `MSE(embed(masked anchor), embed(anchor))` over fixed quadruplets.
pub fn mean_anchor_mse(
    embedder: &LinearEmbedder,
    records: &[FeatureRecord],
    quads: &[Quadruplet],
) -> Result<f64> {
    let mut total = 0.0;
    for q in quads {
        let a = embedder.embed(&records[q.anchor].feature)?;
        let am = embedder.embed(&records[q.masked_anchor].feature)?;
        total += mse(&am, &a)?;
    }
    Ok(total / quads.len().max(1) as f64)
}

pub struct CascadeOutput {
    pub backbone: FrozenBackbone,
    pub ce_report: CeReport,
    pub embedder: LinearEmbedder,
    pub log: TrainLog,
}

/// Stage 1 on raw inputs, freeze, featurize, then stage 2 on the features.
pub fn train_cascade(
    train: &[FeatureRecord],
    validation: Option<&[FeatureRecord]>,
    backbone_cfg: &BackboneConfig,
    embed_cfg: &EmbedderTrainConfig,
) -> Result<CascadeOutput> {
    let (bb, ce_report) = train_ce(train, backbone_cfg)?;
    let backbone = bb.freeze();
    let features = backbone.featurize(train)?;
    let val_features = validation.map(|v| backbone.featurize(v)).transpose()?;
    let (embedder, log) = train_embedder(&features, val_features.as_deref(), embed_cfg)?;
    Ok(CascadeOutput {
        backbone,
        ce_report,
        embedder,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(identity: u32, sample_id: u32, masked: bool, f: Vec<f64>) -> FeatureRecord {
        FeatureRecord {
            identity,
            sample_id,
            masked,
            feature: Vec64::new(f).unwrap(),
        }
    }

    fn grid(ids: u32, samples: u32, dim: usize, seed: u64) -> Vec<FeatureRecord> {
        let mut p = Prng::new(seed);
        let mut out = Vec::new();
        for id in 0..ids {
            let centre: Vec<f64> = (0..dim).map(|_| p.normal()).collect();
            for s in 0..samples {
                let x: Vec<f64> = centre.iter().map(|c| c + 0.2 * p.normal()).collect();
                let mut m = x.clone();
                for v in &mut m[dim / 2..] {
                    *v = 0.0;
                }
                out.push(rec(id, s, false, x));
                out.push(rec(id, s, true, m));
            }
        }
        out
    }

    #[test]
    fn sgd_matches_hand_steps() {
        // w0 = [1, -2], constant g = [0.5, 0.25], lr 0.1, momentum 0.9, wd 0.01.
        // Expected iterates computed in exact rational arithmetic.
        let expected = [
            [0.949, -2.023],
            [0.852151, -2.066677],
            [0.714134749, -2.128919623],
        ];
        let mut w = [1.0, -2.0];
        let mut opt = Sgd::new(2, 0.9, 0.01);
        for want in expected {
            opt.step(&mut w, &[0.5, 0.25], 0.1);
            assert!(
                (w[0] - want[0]).abs() < 1e-14 && (w[1] - want[1]).abs() < 1e-14,
                "{w:?} vs {want:?}"
            );
        }
    }

    #[test]
    fn sgd_config_validation() {
        assert!(SgdConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            lr: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn quadruplets_satisfy_constraints() {
        let mut rs = Vec::new();
        for id in 0..2 {
            rs.push(rec(id, 0, false, vec![1.0]));
            rs.push(rec(id, 1, true, vec![1.0]));
            rs.push(rec(id, 2, true, vec![1.0]));
        }
        let qs = sample_quadruplets(&rs, 500, &mut Prng::new(1), true).unwrap();
        assert!(qs.iter().all(|q| quadruplet_is_valid(&rs, q, true)));
        let qs2 = sample_quadruplets(&rs, 500, &mut Prng::new(1), true).unwrap();
        assert_eq!(qs, qs2);
    }

    #[test]
    fn masked_anchor_is_the_twin_when_present() {
        let rs = grid(3, 4, 4, 0);
        let qs = sample_quadruplets(&rs, 300, &mut Prng::new(2), true).unwrap();
        for q in &qs {
            assert_eq!(rs[q.anchor].sample_id, rs[q.masked_anchor].sample_id);
        }
        let unmasked_negs = sample_quadruplets(&rs, 300, &mut Prng::new(2), false)
            .unwrap()
            .iter()
            .filter(|q| !rs[q.negative].masked)
            .count();
        assert!(unmasked_negs > 0);
    }

    #[test]
    fn sampler_names_bad_identity() {
        let rs = vec![
            rec(0, 0, false, vec![1.0]),
            rec(0, 1, true, vec![1.0]),
            rec(0, 2, true, vec![1.0]),
            rec(7, 0, false, vec![1.0]),
            rec(7, 1, true, vec![1.0]),
        ];
        match sample_quadruplets(&rs, 1, &mut Prng::new(0), true) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("identity 7"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn small_cfg(iterations: usize) -> EmbedderTrainConfig {
        EmbedderTrainConfig {
            sgd: SgdConfig {
                iterations,
                batch_size: 16,
                seed: 3,
                ..Default::default()
            },
            embedding_dim: 8,
            validate_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_initial_weights() {
        let rs = grid(4, 4, 6, 1);
        let mut cfg = small_cfg(20);
        cfg.sgd.lr = 0.0;
        let (trained, _) = train_embedder(&rs, None, &cfg).unwrap();
        let initial = LinearEmbedder::init_random(6, 8, &mut Prng::new(cfg.sgd.seed)).unwrap();
        assert_eq!(trained, initial);
    }

    #[test]
    fn training_is_seeded_and_counts_quadruplets() {
        let rs = grid(4, 4, 6, 1);
        let cfg = small_cfg(30);
        let (a, la) = train_embedder(&rs, None, &cfg).unwrap();
        let (b, lb) = train_embedder(&rs, None, &cfg).unwrap();
        let bits = |e: &LinearEmbedder| {
            e.weights()
                .as_slice()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la, lb);
        assert_eq!(la.quadruplets_drawn, 30 * 16);
        assert_eq!(la.losses().len(), 30);
    }

    #[test]
    fn training_descends() {
        let rs = grid(6, 5, 8, 4);
        let cfg = small_cfg(300);
        let held = sample_quadruplets(&rs, 400, &mut Prng::new(99), true).unwrap();
        let initial = LinearEmbedder::init_random(8, 8, &mut Prng::new(cfg.sgd.seed)).unwrap();
        let (trained, _) = train_embedder(&rs, None, &cfg).unwrap();
        let before = mean_quad_loss(&initial, &rs, &held, &cfg.loss).unwrap();
        let after = mean_quad_loss(&trained, &rs, &held, &cfg.loss).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn validation_logged_and_can_decay() {
        let rs = grid(5, 4, 6, 5);
        let val = grid(3, 4, 6, 6)
            .into_iter()
            .map(|r| FeatureRecord {
                identity: r.identity + 100,
                ..r
            })
            .collect::<Vec<_>>();
        let mut cfg = small_cfg(60);
        cfg.validate_every = 10;
        let (_, log) = train_embedder(&rs, Some(&val), &cfg).unwrap();
        let vals = log
            .events
            .iter()
            .filter(|e| matches!(e, LogEvent::Validation { .. }))
            .count();
        assert_eq!(vals, 6);
        let mut last = None;
        for e in &log.events {
            if let LogEvent::Iteration { iteration, .. } = e {
                assert!(last.is_none_or(|l| *iteration > l));
                last = Some(*iteration);
            }
        }
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), log.events.len());
        assert!(text
            .lines()
            .last()
            .unwrap()
            .contains("\"event\":\"summary\""));
    }

    #[test]
    fn normalized_variant_trains() {
        let rs = grid(4, 4, 6, 7);
        let mut cfg = small_cfg(40);
        cfg.normalize_embeddings = true;
        let (e, log) = train_embedder(&rs, None, &cfg).unwrap();
        assert!(e.weights().is_finite());
        assert!(log.losses().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn huge_lr_reports_divergence() {
        let rs = grid(4, 4, 6, 8);
        let mut cfg = small_cfg(400);
        cfg.sgd.lr = 1e6;
        cfg.sgd.weight_decay = 0.0;
        assert!(matches!(
            train_embedder(&rs, None, &cfg),
            Err(Error::DivergenceDetected { .. })
        ));
    }
}
