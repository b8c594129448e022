//! Desk-scale stand-in for the frozen feature extractor: one rectified
//! hidden layer trained with cross-entropy, then frozen so its hidden
//! activations feed the embedding head.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::dataio::FeatureRecord;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::numkit::{matvec, Mat64, Prng, Vec64};
use crate::trainer::{Sgd, SgdConfig};

const MAGIC: &[u8; 4] = b"MFBW";

pub const DEFAULT_HIDDEN_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    w1: Mat64,
    b1: Vec64,
    w2: Mat64,
    b2: Vec64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGrad {
    pub d_w1: Mat64,
    pub d_b1: Vec64,
    pub d_w2: Mat64,
    pub d_b2: Vec64,
}

impl BackboneGrad {
    fn zeros_like(bb: &ToyBackbone) -> Self {
        BackboneGrad {
            d_w1: Mat64::zeros(bb.w1.rows(), bb.w1.cols()),
            d_b1: Vec64::zeros(bb.b1.dim()),
            d_w2: Mat64::zeros(bb.w2.rows(), bb.w2.cols()),
            d_b2: Vec64::zeros(bb.b2.dim()),
        }
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [
            self.d_w1.as_slice(),
            self.d_b1.as_slice(),
            self.d_w2.as_slice(),
            self.d_b2.as_slice(),
        ]
    }
}

impl ToyBackbone {
    pub fn new(w1: Mat64, b1: Vec64, w2: Mat64, b2: Vec64) -> Result<Self> {
        if b1.dim() != w1.rows() || w2.cols() != w1.rows() || b2.dim() != w2.rows() {
            return Err(Error::shape(
                "w1 h×d, b1 h, w2 c×h, b2 c",
                format!(
                    "w1 {}, b1 {}, w2 {}, b2 {}",
                    w1.shape_str(),
                    b1.dim(),
                    w2.shape_str(),
                    b2.dim()
                ),
            ));
        }
        if w2.rows() < 2 {
            return Err(Error::InsufficientData(format!(
                "{} classes, need >= 2",
                w2.rows()
            )));
        }
        Ok(ToyBackbone { w1, b1, w2, b2 })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init_random(
        input: usize,
        hidden: usize,
        classes: usize,
        prng: &mut Prng,
    ) -> Result<Self> {
        let mut layer = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Mat64::from_row_major(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| prng.uniform_range(-bound, bound))
                    .collect(),
            )
        };
        let w1 = layer(hidden, input)?;
        let w2 = layer(classes, hidden)?;
        ToyBackbone::new(w1, Vec64::zeros(hidden), w2, Vec64::zeros(classes))
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn classes(&self) -> usize {
        self.w2.rows()
    }

    pub fn w1(&self) -> &Mat64 {
        &self.w1
    }

    pub fn b1(&self) -> &Vec64 {
        &self.b1
    }

    pub fn w2(&self) -> &Mat64 {
        &self.w2
    }

    pub fn b2(&self) -> &Vec64 {
        &self.b2
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    /// Every parameter as raw bits, in a fixed order.
    pub fn parameter_bits(&self) -> Vec<u64> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
        .concat()
        .into_iter()
        .map(f64::to_bits)
        .collect()
    }

    fn pre_activation(&self, x: &Vec64) -> Result<Vec64> {
        if x.dim() != self.input_dim() {
            return Err(Error::shape(
                format!("input dim {}", self.input_dim()),
                format!("dim {}", x.dim()),
            ));
        }
        matvec(&self.w1, x)?.add(&self.b1)
    }

    /// Returns `(relu(w1·x + b1), w2·hidden + b2)`.
    pub fn forward(&self, x: &Vec64) -> Result<(Vec64, Vec64)> {
        let hidden = relu(&self.pre_activation(x)?);
        let logits = matvec(&self.w2, &hidden)?.add(&self.b2)?;
        Ok((hidden, logits))
    }

    pub fn predict(&self, x: &Vec64) -> Result<usize> {
        let (_, logits) = self.forward(x)?;
        Ok(argmax(logits.as_slice()))
    }

    /// Cross-entropy of one sample and its gradient for all four blocks.
    pub fn loss_and_grad(&self, x: &Vec64, label: usize) -> Result<(f64, BackboneGrad)> {
        let mut grad = BackboneGrad::zeros_like(self);
        let loss = self.accumulate_grad(x, label, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate_grad(
        &self,
        x: &Vec64,
        label: usize,
        scale: f64,
        grad: &mut BackboneGrad,
    ) -> Result<f64> {
        let pre = self.pre_activation(x)?;
        let hidden = relu(&pre);
        let logits = matvec(&self.w2, &hidden)?.add(&self.b2)?;
        let (loss, d_logits) = cross_entropy(&logits, label)?;

        grad.d_w2
            .add_outer(scale, d_logits.as_slice(), hidden.as_slice())?;
        for (g, d) in grad.d_b2.as_mut_slice().iter_mut().zip(d_logits.as_slice()) {
            *g += scale * d;
        }
        let d_hidden = self.w2.transpose_matvec(&d_logits)?;
        let d_pre: Vec<f64> = d_hidden
            .as_slice()
            .iter()
            .zip(pre.as_slice())
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        grad.d_w1.add_outer(scale, &d_pre, x.as_slice())?;
        for (g, d) in grad.d_b1.as_mut_slice().iter_mut().zip(&d_pre) {
            *g += scale * d;
        }
        Ok(loss)
    }

    pub fn freeze(self) -> FrozenBackbone {
        FrozenBackbone(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(self.input_dim() as u32);
        w.u32(self.hidden_dim() as u32);
        w.u32(self.classes() as u32);
        w.f64s(self.w1.as_slice());
        w.f64s(self.b1.as_slice());
        w.f64s(self.w2.as_slice());
        w.f64s(self.b2.as_slice());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC)?;
        let input = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let w1 = Mat64::from_row_major(hidden, input, r.f64s(hidden * input)?)?;
        let b1 = Vec64::new(r.f64s(hidden)?)?;
        let w2 = Mat64::from_row_major(classes, hidden, r.f64s(classes * hidden)?)?;
        let b2 = Vec64::new(r.f64s(classes)?)?;
        r.expect_end()?;
        ToyBackbone::new(w1, b1, w2, b2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ToyBackbone::from_bytes(&fs::read(path)?)
    }
}

fn relu(v: &Vec64) -> Vec64 {
    Vec64::from_raw(v.as_slice().iter().map(|x| x.max(0.0)).collect())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// A trained backbone that can only be queried. Its hidden activations are
/// the features the embedding head consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone(ToyBackbone);

impl FrozenBackbone {
    pub fn features(&self, x: &Vec64) -> Result<Vec64> {
        Ok(self.0.forward(x)?.0)
    }

    pub fn inner(&self) -> &ToyBackbone {
        &self.0
    }

    /// Replaces each record's input with its backbone features.
    pub fn featurize(&self, records: &[FeatureRecord]) -> Result<Vec<FeatureRecord>> {
        records
            .iter()
            .map(|r| {
                Ok(FeatureRecord {
                    feature: self.features(&r.feature)?,
                    ..r.clone()
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub sgd: SgdConfig,
    /// Fraction of each identity's samples held out for validation.
    pub val_fraction: f64,
    pub lr_floor: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 32,
                iterations: 600,
                seed: 0,
            },
            val_fraction: 0.2,
            lr_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeReport {
    pub classes: Vec<u32>,
    pub epochs: Vec<EpochSummary>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub train_count: usize,
    pub val_count: usize,
}

/// Per-identity split keeping both views of a sample on the same side.
/// Returns `(train, val)` record indices.
pub fn split_per_identity(
    records: &[FeatureRecord],
    val_fraction: f64,
    prng: &mut Prng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry(r.identity)
            .or_default()
            .entry(r.sample_id)
            .or_default()
            .push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (identity, samples) in groups {
        let mut ids: Vec<&Vec<usize>> = samples.values().collect();
        if ids.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "identity {identity} has {} sample(s), need >= 2",
                ids.len()
            )));
        }
        prng.shuffle(&mut ids);
        let n_val = ((ids.len() as f64 * val_fraction).round() as usize).clamp(1, ids.len() - 1);
        for (k, group) in ids.into_iter().enumerate() {
            if k < n_val {
                val.extend(group);
            } else {
                train.extend(group);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Trains the backbone as a closed-set classifier over the identities in
/// `data` with SGD (momentum, weight decay). After every epoch the validation
/// accuracy is measured; if it drops below the previous epoch's value the
/// learning rate is divided by ten, down to `lr_floor`.
pub fn train_ce(data: &[FeatureRecord], cfg: &BackboneConfig) -> Result<(ToyBackbone, CeReport)> {
    cfg.sgd.validate()?;
    let classes: Vec<u32> = data
        .iter()
        .map(|r| r.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} class(es), need >= 2",
            classes.len()
        )));
    }
    let label_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let input = data[0].feature.dim();

    let mut prng = Prng::new(cfg.sgd.seed);
    let (train_idx, val_idx) = split_per_identity(data, cfg.val_fraction, &mut prng)?;
    let mut bb = ToyBackbone::init_random(input, cfg.hidden_dim, classes.len(), &mut prng)?;
    let mut opt: Vec<Sgd> = [
        bb.w1.as_slice().len(),
        bb.b1.dim(),
        bb.w2.as_slice().len(),
        bb.b2.dim(),
    ]
    .into_iter()
    .map(|n| Sgd::new(n, cfg.sgd.momentum, cfg.sgd.weight_decay))
    .collect();

    let accuracy = |bb: &ToyBackbone, idx: &[usize]| -> Result<f64> {
        let mut hit = 0usize;
        for &i in idx {
            if bb.predict(&data[i].feature)? == label_of[&data[i].identity] {
                hit += 1;
            }
        }
        Ok(hit as f64 / idx.len().max(1) as f64)
    };

    let mut lr = cfg.sgd.lr;
    let mut epochs = Vec::new();
    let mut prev_val: Option<f64> = None;
    let mut order = train_idx.clone();
    let mut iteration = 0;
    while iteration < cfg.sgd.iterations {
        prng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.sgd.batch_size) {
            if iteration == cfg.sgd.iterations {
                break;
            }
            let mut grad = BackboneGrad::zeros_like(&bb);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                loss += bb.accumulate_grad(
                    &data[i].feature,
                    label_of[&data[i].identity],
                    scale,
                    &mut grad,
                )?;
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { iteration, loss });
            }
            for ((params, g), o) in bb.blocks_mut().into_iter().zip(grad.blocks()).zip(&mut opt) {
                o.step(params, g, lr);
            }
            epoch_loss += loss;
            batches += 1;
            iteration += 1;
        }
        let val_accuracy = accuracy(&bb, &val_idx)?;
        epochs.push(EpochSummary {
            epoch: epochs.len(),
            iteration,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_accuracy,
        });
        if prev_val.is_some_and(|p| val_accuracy < p) {
            lr = (lr * 0.1).max(cfg.lr_floor);
        }
        prev_val = Some(val_accuracy);
    }

    let report = CeReport {
        classes,
        train_accuracy: accuracy(&bb, &train_idx)?,
        val_accuracy: accuracy(&bb, &val_idx)?,
        train_count: train_idx.len(),
        val_count: val_idx.len(),
        epochs,
    };
    Ok((bb, report))
}
