//! Rotary positional embedding for 3D coordinates.
//!
//! Channel pair `(2i, 2i+1)` is rotated by the angle `b_i · p`, so the
//! embedding is a block-diagonal orthogonal matrix `R̃(p)` and
//! `R̃(p)ᵀ R̃(q) = R̃(q − p)`.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, Point3, Vector3};

use super::weights::{Parameters, WeightInit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RotaryEmbedding3D {
    /// `D/2 × 3`, row `i` is the frequency vector `b_i`.
    frequencies: DMatrix<f64>,
}

impl RotaryEmbedding3D {
    pub fn new(frequencies: Vec<Vector3<f64>>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::InvalidInput("rotary embedding needs at least one frequency".into()));
        }
        let m = DMatrix::from_fn(frequencies.len(), 3, |r, c| frequencies[r][c]);
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite rotary frequency".into()));
        }
        Ok(Self { frequencies: m })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidInput(format!("rotary dimension {dim} must be even")));
        }
        Self::new(vec![Vector3::zeros(); dim / 2])
    }

    /// Frequencies with log-uniform magnitude in `[0.1, 10]` cycles per
    /// `scene_scale` meters and uniformly random directions, rounded to `f32`
    /// like every other stored parameter.
    pub fn random(init: &mut WeightInit, dim: usize, scene_scale: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidInput(format!("rotary dimension {dim} must be even")));
        }
        let freqs = (0..dim / 2)
            .map(|_| {
                let cycles = 10f64.powf(init.uniform(-1.0, 1.0));
                let mut dir = init.normal(3, 1, 1.0);
                if dir.norm() == 0.0 {
                    dir[0] = 1.0;
                }
                let dir = Vector3::new(dir[0], dir[1], dir[2]).normalize();
                (dir * (TAU * cycles / scene_scale)).map(|v| v as f32 as f64)
            })
            .collect();
        Self::new(freqs)
    }

    pub fn dim(&self) -> usize {
        self.frequencies.nrows() * 2
    }

    pub fn frequency(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.frequencies[(i, 0)],
            self.frequencies[(i, 1)],
            self.frequencies[(i, 2)],
        )
    }

    fn angle(&self, i: usize, p: &Point3<f64>) -> f64 {
        self.frequencies[(i, 0)] * p.x + self.frequencies[(i, 1)] * p.y + self.frequencies[(i, 2)] * p.z
    }

    /// Right-multiplies row `r` of `m` by `R̃(positions[r])` in place.
    pub(crate) fn rotate_rows(&self, m: &mut DMatrix<f64>, positions: &[Point3<f64>]) {
        debug_assert_eq!(m.ncols(), self.dim());
        debug_assert_eq!(m.nrows(), positions.len());
        for (r, p) in positions.iter().enumerate() {
            for i in 0..self.frequencies.nrows() {
                let (s, c) = self.angle(i, p).sin_cos();
                let a = m[(r, 2 * i)];
                let b = m[(r, 2 * i + 1)];
                m[(r, 2 * i)] = a * c + b * s;
                m[(r, 2 * i + 1)] = -a * s + b * c;
            }
        }
    }
}

impl Parameters for RotaryEmbedding3D {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        f(&mut self.frequencies);
    }
}

/// The block-diagonal matrix `R̃(p)`.
pub fn rotary_matrix(p: &Point3<f64>, emb: &RotaryEmbedding3D) -> DMatrix<f64> {
    let d = emb.dim();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d / 2 {
        let (s, c) = emb.angle(i, p).sin_cos();
        m[(2 * i, 2 * i)] = c;
        m[(2 * i, 2 * i + 1)] = -s;
        m[(2 * i + 1, 2 * i)] = s;
        m[(2 * i + 1, 2 * i + 1)] = c;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::weights::RngSeed;
    use nalgebra::DVector;

    fn emb() -> RotaryEmbedding3D {
        RotaryEmbedding3D::random(&mut WeightInit::new(RngSeed(1)), 16, 10.0).unwrap()
    }

    #[test]
    fn origin_is_identity() {
        let m = rotary_matrix(&Point3::origin(), &emb());
        assert_eq!(m, DMatrix::identity(16, 16));
    }

    #[test]
    fn preserves_norms() {
        let e = emb();
        let v = DVector::from_fn(16, |i, _| (i as f64).sin() + 0.3);
        let m = rotary_matrix(&Point3::new(1.3, -2.0, 4.5), &e);
        assert!(((&m * &v).norm() - v.norm()).abs() < 1e-12);
    }

    #[test]
    fn row_rotation_matches_matrix_product() {
        let e = emb();
        let p = Point3::new(0.7, 0.1, -3.0);
        let mut rows = DMatrix::from_fn(1, 16, |_, c| c as f64 * 0.1 - 0.5);
        let expect = &rows * rotary_matrix(&p, &e);
        e.rotate_rows(&mut rows, &[p]);
        assert!((rows - expect).abs().max() < 1e-12);
    }

    #[test]
    fn frequency_magnitudes_are_log_uniform_in_range() {
        let e = emb();
        for i in 0..8 {
            let cycles = e.frequency(i).norm() * 10.0 / TAU;
            assert!((0.1..=10.0).contains(&cycles), "{cycles}");
        }
        assert!(RotaryEmbedding3D::zeros(5).is_err());
    }
}
