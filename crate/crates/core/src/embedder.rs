//! The trainable embedding head: `x = W′ · φ / ‖φ‖₂`.
//!
//! Only the input feature is normalized. The output is left raw; scoring
//! normalizes separately through cosine similarity.

use std::fs;
use std::path::Path;

use crate::container::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{l2_normalize, matvec, Mat64, Prng, Vec64};

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

const MAGIC: &[u8; 4] = b"MFEW";

#[derive(Clone, Debug, PartialEq)]
pub struct LinearEmbedder {
    weights: Mat64,
}

/// Gradient of a scalar loss with respect to the embedder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderGrad {
    pub d_weights: Mat64,
}

impl LinearEmbedder {
    pub fn from_weights(weights: Mat64) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::NonFinite("embedder weights"));
        }
        Ok(LinearEmbedder { weights })
    }

    /// Entries drawn i.i.d. uniform in `[-1/√in_dim, 1/√in_dim]`.
    pub fn init_random(in_dim: usize, out_dim: usize, prng: &mut Prng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::shape("dims >= 1", format!("{out_dim}x{in_dim}")));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| prng.uniform_range(-bound, bound))
            .collect();
        Ok(LinearEmbedder {
            weights: Mat64::from_row_major(out_dim, in_dim, data)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Mat64 {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Mat64 {
        &mut self.weights
    }

    pub fn embed(&self, feat: &Vec64) -> Result<Vec64> {
        self.check_input(feat)?;
        self.embed_unit(&l2_normalize(feat)?)
    }

    /// Applies `W′` to a feature that is already unit-norm.
    pub fn embed_unit(&self, unit: &Vec64) -> Result<Vec64> {
        self.check_input(unit)?;
        matvec(&self.weights, unit)
    }

    /// `∂L/∂W′ = d_out ⊗ normalize(feat)`; the feature itself is frozen.
    pub fn backward(&self, feat: &Vec64, d_out: &Vec64) -> Result<EmbedderGrad> {
        self.check_input(feat)?;
        if d_out.dim() != self.out_dim() {
            return Err(Error::shape(
                format!("d_out dim {}", self.out_dim()),
                format!("dim {}", d_out.dim()),
            ));
        }
        let unit = l2_normalize(feat)?;
        Ok(EmbedderGrad {
            d_weights: Mat64::outer(d_out, &unit),
        })
    }

    fn check_input(&self, feat: &Vec64) -> Result<()> {
        if feat.dim() != self.in_dim() {
            return Err(Error::shape(
                format!("feature dim {}", self.in_dim()),
                format!("dim {}", feat.dim()),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(self.in_dim() as u32);
        w.u32(self.out_dim() as u32);
        w.f64s(self.weights.as_slice());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC)?;
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let data = r.f64s(in_dim * out_dim)?;
        r.expect_end()?;
        LinearEmbedder::from_weights(Mat64::from_row_major(out_dim, in_dim, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LinearEmbedder::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vec64 {
        Vec64::new(xs.to_vec()).unwrap()
    }

    fn embedder(rows: &[&[f64]]) -> LinearEmbedder {
        LinearEmbedder::from_weights(Mat64::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn embed_examples() {
        let id = LinearEmbedder::from_weights(Mat64::identity(2)).unwrap();
        assert_eq!(id.embed(&v(&[3.0, 4.0])).unwrap(), v(&[0.6, 0.8]));

        let diag = embedder(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(diag.embed(&v(&[3.0, 4.0])).unwrap(), v(&[0.6, 1.6]));

        let zero = LinearEmbedder::from_weights(Mat64::zeros(3, 2)).unwrap();
        assert_eq!(zero.embed(&v(&[-1.0, 7.0])).unwrap(), Vec64::zeros(3));
    }

    #[test]
    fn embed_errors() {
        let id = LinearEmbedder::from_weights(Mat64::identity(2)).unwrap();
        assert!(matches!(id.embed(&v(&[0.0, 0.0])), Err(Error::ZeroNorm)));
        assert!(matches!(
            id.embed(&v(&[1.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let e = LinearEmbedder::from_weights(Mat64::identity(2)).unwrap();
        let g = e.backward(&v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(g.d_weights, Mat64::zeros(2, 2));

        let g = e.backward(&v(&[3.0, 4.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(
            g.d_weights,
            Mat64::from_rows(&[&[0.6, 0.8], &[0.0, 0.0]]).unwrap()
        );
        assert!(e.backward(&v(&[3.0, 4.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = LinearEmbedder::init_random(512, 4, &mut Prng::new(9)).unwrap();
        let b = LinearEmbedder::init_random(512, 4, &mut Prng::new(9)).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 512f64.sqrt();
        assert!(a.weights().as_slice().iter().all(|w| w.abs() <= bound));

        let c = LinearEmbedder::init_random(128, 512, &mut Prng::new(1)).unwrap();
        assert_eq!((c.out_dim(), c.in_dim()), (512, 128));
    }

    #[test]
    fn scale_invariant_input() {
        let e = LinearEmbedder::init_random(6, 5, &mut Prng::new(3)).unwrap();
        let f = v(&[0.3, -1.2, 4.0, 0.01, 2.0, -0.7]);
        let base = e.embed(&f).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = e.embed(&f.scale(c)).unwrap();
            for (x, y) in base.as_slice().iter().zip(scaled.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let e = LinearEmbedder::init_random(7, 3, &mut Prng::new(11)).unwrap();
        let bytes = e.to_bytes();
        assert_eq!(&bytes[..4], b"MFEW");
        assert_eq!(bytes.len(), 4 + 2 + 4 + 4 + 7 * 3 * 8 + 4);
        let back = LinearEmbedder::from_bytes(&bytes).unwrap();
        assert_eq!(
            back.weights()
                .as_slice()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>(),
            e.weights()
                .as_slice()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn corrupted_file_rejected() {
        let e = LinearEmbedder::init_random(3, 2, &mut Prng::new(1)).unwrap();
        let mut bytes = e.to_bytes();
        bytes[20] ^= 0x40;
        assert!(matches!(
            LinearEmbedder::from_bytes(&bytes),
            Err(Error::CrcMismatch)
        ));
        let bytes = e.to_bytes();
        assert!(matches!(
            LinearEmbedder::from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::CrcMismatch)
        ));
        let mut bytes = e.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            LinearEmbedder::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }
}
