//! Margin triplet loss, the masked-anchor MSE constraint, their sum, and
//! softmax cross-entropy, each with an analytic gradient.
//!
//! The combined loss for one quadruplet `(a, am, p, n)` is
//!
//! ```text
//! max(0, α − ‖a − n‖² + ‖a − p‖²) + λ · mean((am − a)²)
//! ```
//!
//! where `a` is an unmasked anchor, `am` a masked view of the anchor, `p` a
//! masked same-identity positive and `n` a different-identity negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sq_euclidean, Vec64};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// How per-quadruplet losses are folded into one batch value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn factor(self, batch: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / batch.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub mse_weight: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: DEFAULT_MARGIN,
            mse_weight: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "margin {} must be >= 0",
                self.margin
            )));
        }
        if !(self.mse_weight >= 0.0 && self.mse_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mse_weight {} must be >= 0",
                self.mse_weight
            )));
        }
        Ok(())
    }
}

/// Embeddings of one quadruplet.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadEmbeddings {
    pub a: Vec64,
    pub am: Vec64,
    pub p: Vec64,
    pub n: Vec64,
}

impl QuadEmbeddings {
    pub fn new(a: Vec64, am: Vec64, p: Vec64, n: Vec64) -> Result<Self> {
        let dim = a.dim();
        for (name, v) in [("am", &am), ("p", &p), ("n", &n)] {
            if v.dim() != dim {
                return Err(Error::shape(
                    format!("{name} dim {dim}"),
                    format!("dim {}", v.dim()),
                ));
            }
        }
        Ok(QuadEmbeddings { a, am, p, n })
    }
}

/// Gradients of the combined loss with respect to each embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadGrad {
    pub d_a: Vec64,
    pub d_am: Vec64,
    pub d_p: Vec64,
    pub d_n: Vec64,
}

/// The hinge argument `α − ‖a−n‖² + ‖a−p‖²`.
fn hinge_arg(a: &Vec64, p: &Vec64, n: &Vec64, margin: f64) -> Result<f64> {
    let d_ap = sq_euclidean(a, p)?;
    let d_an = sq_euclidean(a, n)?;
    Ok(margin - d_an + d_ap)
}

pub fn triplet_loss(a: &Vec64, p: &Vec64, n: &Vec64, cfg: &LossConfig) -> Result<f64> {
    Ok(hinge_arg(a, p, n, cfg.margin)?.max(0.0))
}

pub fn mse(am: &Vec64, a: &Vec64) -> Result<f64> {
    Ok(sq_euclidean(am, a)? / a.dim() as f64)
}

pub fn combined_loss(q: &QuadEmbeddings, cfg: &LossConfig) -> Result<f64> {
    let tl = triplet_loss(&q.a, &q.p, &q.n, cfg)?;
    if cfg.mse_weight == 0.0 {
        return Ok(tl);
    }
    Ok(tl + cfg.mse_weight * mse(&q.am, &q.a)?)
}

/// `(d_a, d_p, d_n)` of [`triplet_loss`]; all zero unless the hinge is
/// strictly positive (subgradient 0 at the kink).
pub fn triplet_grad(a: &Vec64, p: &Vec64, n: &Vec64, cfg: &LossConfig) -> Result<[Vec64; 3]> {
    let dim = a.dim();
    let mut d_a = vec![0.0; dim];
    let mut d_p = vec![0.0; dim];
    let mut d_n = vec![0.0; dim];
    if hinge_arg(a, p, n, cfg.margin)? > 0.0 {
        let (a, p, n) = (a.as_slice(), p.as_slice(), n.as_slice());
        for i in 0..dim {
            d_p[i] = 2.0 * (p[i] - a[i]);
            d_n[i] = -2.0 * (n[i] - a[i]);
            d_a[i] = 2.0 * (n[i] - p[i]);
        }
    }
    Ok([
        Vec64::from_raw(d_a),
        Vec64::from_raw(d_p),
        Vec64::from_raw(d_n),
    ])
}

/// `(d_am, d_a)` of [`mse`].
pub fn mse_grad(am: &Vec64, a: &Vec64) -> Result<(Vec64, Vec64)> {
    if am.dim() != a.dim() {
        return Err(Error::shape(
            format!("dim {}", a.dim()),
            format!("dim {}", am.dim()),
        ));
    }
    let c = 2.0 / a.dim() as f64;
    let d_am: Vec<f64> = am
        .as_slice()
        .iter()
        .zip(a.as_slice())
        .map(|(m, x)| c * (m - x))
        .collect();
    let d_a = d_am.iter().map(|g| -g).collect();
    Ok((Vec64::from_raw(d_am), Vec64::from_raw(d_a)))
}

/// Analytic gradient of [`combined_loss`].
///
/// At exactly zero hinge argument the subgradient 0 is used. Gradient flows
/// into both sides of the MSE term.
pub fn combined_loss_grad(q: &QuadEmbeddings, cfg: &LossConfig) -> Result<QuadGrad> {
    let [mut d_a, d_p, d_n] = triplet_grad(&q.a, &q.p, &q.n, cfg)?;
    let mut d_am = Vec64::zeros(q.a.dim());
    if cfg.mse_weight != 0.0 {
        let (g_am, g_a) = mse_grad(&q.am, &q.a)?;
        for (d, g) in d_a.as_mut_slice().iter_mut().zip(g_a.as_slice()) {
            *d += cfg.mse_weight * g;
        }
        for (d, g) in d_am.as_mut_slice().iter_mut().zip(g_am.as_slice()) {
            *d += cfg.mse_weight * g;
        }
    }
    Ok(QuadGrad {
        d_a,
        d_am,
        d_p,
        d_n,
    })
}

/// Softmax cross-entropy with max-subtraction. Returns the loss and
/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy(logits: &Vec64, label: usize) -> Result<(f64, Vec64)> {
    let z = logits.as_slice();
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (z[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, Vec64::from_raw(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Prng;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vec64 {
        Vec64::new(xs.to_vec()).unwrap()
    }

    fn quad(a: &[f64], am: &[f64], p: &[f64], n: &[f64]) -> QuadEmbeddings {
        QuadEmbeddings::new(v(a), v(am), v(p), v(n)).unwrap()
    }

    #[test]
    fn triplet_examples() {
        let cfg = LossConfig::default();
        let x = v(&[0.3, -0.1]);
        assert_eq!(triplet_loss(&x, &x, &x, &cfg).unwrap(), 0.2);
        let z = v(&[0.0, 0.0]);
        assert_eq!(triplet_loss(&z, &z, &v(&[1.0, 0.0]), &cfg).unwrap(), 0.0);
        let l = triplet_loss(&z, &v(&[2.0, 0.0]), &v(&[1.0, 0.0]), &cfg).unwrap();
        assert!((l - 3.2).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let a = v(&[0.5, 0.5]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&v(&[1.0; 4]), &v(&[0.0; 4])).unwrap(), 1.0);
        assert_eq!(mse(&v(&[2.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 2.0);
        assert!(mse(&v(&[1.0]), &a).is_err());
    }

    #[test]
    fn combined_examples() {
        let cfg = LossConfig::default();
        let x = [0.7, 0.1, -0.4];
        assert_eq!(combined_loss(&quad(&x, &x, &x, &x), &cfg).unwrap(), 0.2);

        let q = quad(&[0.0, 0.0], &[2.0, 0.0], &[2.0, 0.0], &[1.0, 0.0]);
        assert!((combined_loss(&q, &cfg).unwrap() - 5.2).abs() < 1e-12);

        let off = LossConfig {
            mse_weight: 0.0,
            ..cfg
        };
        assert_eq!(
            combined_loss(&q, &off).unwrap(),
            triplet_loss(&q.a, &q.p, &q.n, &off).unwrap()
        );
    }

    #[test]
    fn quad_shape_checked() {
        assert!(QuadEmbeddings::new(v(&[0.0]), v(&[0.0]), v(&[0.0, 1.0]), v(&[0.0])).is_err());
    }

    #[test]
    fn grad_flat_region() {
        let q = quad(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[3.0, 0.0]);
        let g = combined_loss_grad(&q, &LossConfig::default()).unwrap();
        for d in [&g.d_a, &g.d_am, &g.d_p, &g.d_n] {
            assert!(d.as_slice().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn grad_hand_case() {
        let q = quad(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], &[1.0, 0.0]);
        let g = combined_loss_grad(&q, &LossConfig::default()).unwrap();
        assert_eq!(g.d_p, v(&[4.0, 0.0]));
        assert_eq!(g.d_n, v(&[-2.0, 0.0]));
        assert_eq!(g.d_a, v(&[-2.0, 0.0]));
        assert_eq!(g.d_am, v(&[0.0, 0.0]));
    }

    #[test]
    fn grad_at_hinge_point_is_zero() {
        // 0.75 − 1 + 0.25 = 0 exactly.
        let cfg = LossConfig {
            margin: 0.75,
            ..Default::default()
        };
        let q = quad(&[0.0, 0.0], &[0.0, 0.0], &[0.5, 0.0], &[1.0, 0.0]);
        assert_eq!(triplet_loss(&q.a, &q.p, &q.n, &cfg).unwrap(), 0.0);
        let g = combined_loss_grad(&q, &cfg).unwrap();
        assert!(g.d_p.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&v(&[0.3; 10]), 4).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&v(&[1000.0, 0.0]), 0).unwrap();
        assert!(l.abs() < 1e-12);
        let (l, _) = cross_entropy(&v(&[1.0, 0.0]), 0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_range() {
        assert!(matches!(
            cross_entropy(&v(&[0.0, 1.0]), 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig {
            margin: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            mse_weight: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    fn random_vec(p: &mut Prng, dim: usize) -> Vec64 {
        Vec64::new((0..dim).map(|_| p.normal()).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn triplet_nonnegative_and_zero_past_margin(seed in any::<u64>(), dim in 1usize..10) {
            let mut p = Prng::new(seed);
            let (a, pos, neg) = (random_vec(&mut p, dim), random_vec(&mut p, dim), random_vec(&mut p, dim));
            let cfg = LossConfig::default();
            let l = triplet_loss(&a, &pos, &neg, &cfg).unwrap();
            prop_assert!(l >= 0.0);
            let gap = sq_euclidean(&a, &neg).unwrap() - sq_euclidean(&a, &pos).unwrap();
            if gap >= cfg.margin {
                prop_assert_eq!(l, 0.0);
            }
        }

        #[test]
        fn translation_invariance(seed in any::<u64>(), dim in 1usize..10) {
            let mut p = Prng::new(seed);
            let q = QuadEmbeddings::new(
                random_vec(&mut p, dim), random_vec(&mut p, dim),
                random_vec(&mut p, dim), random_vec(&mut p, dim)).unwrap();
            let shift = random_vec(&mut p, dim);
            let t = |x: &Vec64| x.add(&shift).unwrap();
            let cfg = LossConfig::default();
            let before = triplet_loss(&q.a, &q.p, &q.n, &cfg).unwrap();
            let after = triplet_loss(&t(&q.a), &t(&q.p), &t(&q.n), &cfg).unwrap();
            prop_assert!((before - after).abs() < 1e-10);
            let m0 = mse(&q.am, &q.a).unwrap();
            let m1 = mse(&t(&q.am), &t(&q.a)).unwrap();
            prop_assert!((m0 - m1).abs() < 1e-10);
        }

        #[test]
        fn lambda_zero_is_plain_triplet(seed in any::<u64>(), dim in 1usize..10) {
            let mut p = Prng::new(seed);
            let q = QuadEmbeddings::new(
                random_vec(&mut p, dim), random_vec(&mut p, dim),
                random_vec(&mut p, dim), random_vec(&mut p, dim)).unwrap();
            let cfg = LossConfig { mse_weight: 0.0, ..Default::default() };
            prop_assert_eq!(combined_loss(&q, &cfg).unwrap(), triplet_loss(&q.a, &q.p, &q.n, &cfg).unwrap());
        }

        #[test]
        fn ce_gradient_sums_to_zero(seed in any::<u64>(), classes in 2usize..20) {
            let mut p = Prng::new(seed);
            let logits = Vec64::new((0..classes).map(|_| 5.0 * p.normal()).collect()).unwrap();
            let (_, g) = cross_entropy(&logits, p.below(classes)).unwrap();
            prop_assert!(g.as_slice().iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
