//! Central finite-difference checks of every hand-written gradient.
//!
//! Each site draws random small instances, evaluates the analytic gradient
//! and `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every coordinate, and records
//! `‖g_analytic − g_numeric‖₂ / (‖g_analytic‖₂ + ‖g_numeric‖₂)`. Instances
//! within `KINK_GAP` of a hinge or ReLU kink are redrawn, since a central
//! difference straddling a kink measures neither side.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ToyBackbone;
use crate::embedder::LinearEmbedder;
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, combined_loss_grad, cross_entropy, mse, mse_grad, triplet_grad, triplet_loss,
    LossConfig, QuadEmbeddings, Reduction,
};
use crate::numkit::{
    l2_normalize, l2_normalize_backward, matvec, sq_euclidean, Mat64, Prng, Vec64,
};
use crate::trainer::{batch_loss_grad, Quadruplet};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const KINK_GAP: f64 = 1e-3;
const MAX_DRAWS_PER_INSTANCE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Triplet,
    Mse,
    Combined,
    CrossEntropy,
    Embedder,
    EmbedderNormalized,
    Backbone,
    TrainerBatch,
}

impl Site {
    pub const ALL: [Site; 8] = [
        Site::Triplet,
        Site::Mse,
        Site::Combined,
        Site::CrossEntropy,
        Site::Embedder,
        Site::EmbedderNormalized,
        Site::Backbone,
        Site::TrainerBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Triplet => "triplet",
            Site::Mse => "mse",
            Site::Combined => "combined",
            Site::CrossEntropy => "cross_entropy",
            Site::Embedder => "embedder",
            Site::EmbedderNormalized => "embedder_normalized",
            Site::Backbone => "backbone",
            Site::TrainerBatch => "trainer_batch",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown gradient site {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub sites: Vec<Site>,
    /// Negative control: scales this site's analytic gradient by `1 + 1e-3`.
    pub corrupt: Option<Site>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 100,
            seed: 0,
            step: DEFAULT_STEP,
            sites: Site::ALL.to_vec(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteReport {
    pub site: Site,
    pub instances: usize,
    /// Draws rejected for lying too close to a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub sites: Vec<SiteReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.sites
            .iter()
            .map(|s| s.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.sites.iter().all(|s| s.max_rel_error < tolerance)
    }

    pub fn to_text(&self, tolerance: f64) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>8} {:>12} {:>12}",
            "site", "instances", "redrawn", "max_rel", "mean_rel"
        );
        for s in &self.sites {
            let flag = if s.max_rel_error < tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                out,
                "{:<20} {:>9} {:>8} {:>12.3e} {:>12.3e}  {flag}",
                s.site.name(),
                s.instances,
                s.redrawn,
                s.max_rel_error,
                s.mean_rel_error
            );
        }
        out
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `theta`.
pub fn numeric_gradient(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

type Objective = Box<dyn Fn(&[f64]) -> f64>;

/// One drawn instance: parameters, scalar objective and analytic gradient.
struct Instance {
    theta: Vec<f64>,
    objective: Objective,
    analytic: Vec<f64>,
}

fn v64(xs: &[f64]) -> Vec64 {
    Vec64::from_raw(xs.to_vec())
}

fn gaussian(p: &mut Prng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * p.normal()).collect()
}

fn dim(p: &mut Prng, lo: usize, hi: usize) -> usize {
    lo + p.below(hi - lo + 1)
}

fn hinge_gap(a: &Vec64, p: &Vec64, n: &Vec64, margin: f64) -> f64 {
    (margin - sq_euclidean(a, n).unwrap() + sq_euclidean(a, p).unwrap()).abs()
}

fn random_loss_cfg(p: &mut Prng, mse_weight: f64) -> LossConfig {
    LossConfig {
        margin: p.uniform_range(0.05, 1.0),
        mse_weight,
        reduction: Reduction::Mean,
    }
}

fn draw(site: Site, p: &mut Prng) -> Option<Instance> {
    match site {
        Site::Triplet => {
            let d = dim(p, 2, 8);
            let cfg = random_loss_cfg(p, 0.0);
            let theta = gaussian(p, 3 * d, 0.4);
            let split = move |t: &[f64]| (v64(&t[..d]), v64(&t[d..2 * d]), v64(&t[2 * d..]));
            let (a, pp, n) = split(&theta);
            if hinge_gap(&a, &pp, &n, cfg.margin) < KINK_GAP {
                return None;
            }
            let analytic = triplet_grad(&a, &pp, &n, &cfg)
                .unwrap()
                .iter()
                .flat_map(|g| g.as_slice().to_vec())
                .collect();
            Some(Instance {
                theta,
                objective: Box::new(move |t| {
                    let (a, pp, n) = split(t);
                    triplet_loss(&a, &pp, &n, &cfg).unwrap()
                }),
                analytic,
            })
        }
        Site::Mse => {
            let d = dim(p, 1, 16);
            let theta = gaussian(p, 2 * d, 1.0);
            let (am, a) = (v64(&theta[..d]), v64(&theta[d..]));
            let (g_am, g_a) = mse_grad(&am, &a).unwrap();
            Some(Instance {
                theta,
                objective: Box::new(move |t| mse(&v64(&t[..d]), &v64(&t[d..])).unwrap()),
                analytic: [g_am.into_inner(), g_a.into_inner()].concat(),
            })
        }
        Site::Combined => {
            let d = dim(p, 2, 8);
            let weight = p.uniform_range(0.0, 4.0);
            let cfg = random_loss_cfg(p, weight);
            let theta = gaussian(p, 4 * d, 0.4);
            let quad = move |t: &[f64]| {
                QuadEmbeddings::new(
                    v64(&t[..d]),
                    v64(&t[d..2 * d]),
                    v64(&t[2 * d..3 * d]),
                    v64(&t[3 * d..]),
                )
                .unwrap()
            };
            let q = quad(&theta);
            if hinge_gap(&q.a, &q.p, &q.n, cfg.margin) < KINK_GAP {
                return None;
            }
            let g = combined_loss_grad(&q, &cfg).unwrap();
            let analytic = [g.d_a, g.d_am, g.d_p, g.d_n]
                .into_iter()
                .flat_map(Vec64::into_inner)
                .collect();
            Some(Instance {
                theta,
                objective: Box::new(move |t| combined_loss(&quad(t), &cfg).unwrap()),
                analytic,
            })
        }
        Site::CrossEntropy => {
            let k = dim(p, 2, 10);
            let label = p.below(k);
            let theta = gaussian(p, k, 3.0);
            let (_, g) = cross_entropy(&v64(&theta), label).unwrap();
            Some(Instance {
                theta,
                objective: Box::new(move |t| cross_entropy(&v64(t), label).unwrap().0),
                analytic: g.into_inner(),
            })
        }
        Site::Embedder | Site::EmbedderNormalized => {
            let normalized = site == Site::EmbedderNormalized;
            let (out, inp) = (dim(p, 1, 6), dim(p, 2, 6));
            let feat = v64(&gaussian(p, inp, 1.0));
            let upstream = v64(&gaussian(p, out, 1.0));
            let theta = gaussian(p, out * inp, 0.5);
            let layer = move |t: &[f64]| {
                LinearEmbedder::from_weights(Mat64::from_row_major(out, inp, t.to_vec()).unwrap())
                    .unwrap()
            };
            let e = layer(&theta);
            let y = e.embed(&feat).unwrap();
            let d_out = if normalized {
                l2_normalize_backward(&y, &upstream).unwrap()
            } else {
                upstream.clone()
            };
            let analytic = e
                .backward(&feat, &d_out)
                .unwrap()
                .d_weights
                .as_slice()
                .to_vec();
            Some(Instance {
                theta,
                objective: Box::new(move |t| {
                    let y = layer(t).embed(&feat).unwrap();
                    let y = if normalized {
                        l2_normalize(&y).unwrap()
                    } else {
                        y
                    };
                    y.dot(&upstream).unwrap()
                }),
                analytic,
            })
        }
        Site::Backbone => {
            let (inp, hid, cls) = (dim(p, 2, 6), dim(p, 2, 6), dim(p, 2, 5));
            let label = p.below(cls);
            let x = v64(&gaussian(p, inp, 1.0));
            let sizes = [hid * inp, hid, cls * hid, cls];
            let theta = gaussian(p, sizes.iter().sum(), 0.7);
            let build = move |t: &[f64]| {
                let (w1, rest) = t.split_at(sizes[0]);
                let (b1, rest) = rest.split_at(sizes[1]);
                let (w2, b2) = rest.split_at(sizes[2]);
                ToyBackbone::new(
                    Mat64::from_row_major(hid, inp, w1.to_vec()).unwrap(),
                    v64(b1),
                    Mat64::from_row_major(cls, hid, w2.to_vec()).unwrap(),
                    v64(b2),
                )
                .unwrap()
            };
            let bb = build(&theta);
            let pre = matvec(bb.w1(), &x).unwrap().add(bb.b1()).unwrap();
            if pre.as_slice().iter().any(|z| z.abs() < KINK_GAP) {
                return None;
            }
            let (_, g) = bb.loss_and_grad(&x, label).unwrap();
            let analytic = [
                g.d_w1.as_slice(),
                g.d_b1.as_slice(),
                g.d_w2.as_slice(),
                g.d_b2.as_slice(),
            ]
            .concat();
            Some(Instance {
                theta,
                objective: Box::new(move |t| {
                    let (_, logits) = build(t).forward(&x).unwrap();
                    cross_entropy(&logits, label).unwrap().0
                }),
                analytic,
            })
        }
        Site::TrainerBatch => {
            let (out, inp) = (dim(p, 2, 5), dim(p, 2, 5));
            let records = 6;
            let units: Vec<Vec64> = (0..records)
                .map(|_| l2_normalize(&v64(&gaussian(p, inp, 1.0))).unwrap())
                .collect();
            let batch: Vec<Quadruplet> = (0..dim(p, 1, 4))
                .map(|_| Quadruplet {
                    anchor: p.below(records),
                    masked_anchor: p.below(records),
                    positive: p.below(records),
                    negative: p.below(records),
                })
                .collect();
            let normalize = p.below(2) == 1;
            let reduction = if p.below(2) == 1 {
                Reduction::Sum
            } else {
                Reduction::Mean
            };
            let weight = p.uniform_range(0.0, 4.0);
            let cfg = LossConfig {
                reduction,
                ..random_loss_cfg(p, weight)
            };
            let theta = gaussian(p, out * inp, 0.6);
            let w = Mat64::from_row_major(out, inp, theta.clone()).unwrap();
            for q in &batch {
                let e = |i: usize| {
                    let y = matvec(&w, &units[i]).unwrap();
                    if normalize {
                        l2_normalize(&y).unwrap()
                    } else {
                        y
                    }
                };
                if hinge_gap(&e(q.anchor), &e(q.positive), &e(q.negative), cfg.margin) < KINK_GAP {
                    return None;
                }
            }
            let (_, g) = batch_loss_grad(&w, &units, &batch, &cfg, normalize).ok()?;
            Some(Instance {
                theta,
                objective: Box::new(move |t| {
                    let w = Mat64::from_row_major(out, inp, t.to_vec()).unwrap();
                    batch_loss_grad(&w, &units, &batch, &cfg, normalize)
                        .unwrap()
                        .0
                }),
                analytic: g.as_slice().to_vec(),
            })
        }
    }
}

pub fn check_site(site: Site, cfg: &GradcheckConfig) -> Result<SiteReport> {
    let mut prng = Prng::new(cfg.seed ^ (site as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut errors = Vec::with_capacity(cfg.instances);
    let mut redrawn = 0;
    while errors.len() < cfg.instances {
        let inst = match draw(site, &mut prng) {
            Some(i) => i,
            None => {
                redrawn += 1;
                if redrawn > MAX_DRAWS_PER_INSTANCE * cfg.instances.max(1) {
                    return Err(Error::InsufficientData(format!(
                        "{site}: too many draws near a kink"
                    )));
                }
                continue;
            }
        };
        let mut analytic = inst.analytic;
        if cfg.corrupt == Some(site) {
            analytic.iter_mut().for_each(|g| *g *= 1.0 + 1e-3);
        }
        let numeric = numeric_gradient(&inst.theta, cfg.step, &*inst.objective);
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(SiteReport {
        site,
        instances: errors.len(),
        redrawn,
        max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        mean_rel_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
    })
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "step must be positive, got {}",
            cfg.step
        )));
    }
    Ok(GradcheckReport {
        sites: cfg
            .sites
            .iter()
            .map(|&s| check_site(s, cfg))
            .collect::<Result<_>>()?,
    })
}
