//! Seeded, frozen network parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Seed for deterministic weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

/// Deterministic parameter source. Every draw is rounded to `f32` so that a
/// saved weight file reproduces the in-memory parameters bit for bit.
#[derive(Debug, Clone)]
pub struct WeightInit {
    rng: ChaCha8Rng,
}

impl WeightInit {
    pub fn new(seed: RngSeed) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed.0),
        }
    }

    /// Standard normal draws scaled by `scale`.
    pub fn normal(&mut self, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            let z: f64 = self.rng.sample(StandardNormal);
            (z * scale) as f32 as f64
        })
    }

    /// Normal draws with the `1/√fan_in` scaling used for every projection.
    pub fn projection(&mut self, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi) as f32 as f64
    }
}

/// Visits every parameter matrix in a fixed canonical order.
pub trait Parameters {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>));

    fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |m| n += m.len());
        n
    }
}

/// Fully connected layer `y = x W + b` acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    /// Stored as a 1×out matrix so it serialises like any other tensor.
    pub bias: DMatrix<f64>,
}

impl Linear {
    pub fn random(init: &mut WeightInit, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init.projection(fan_in, fan_out),
            bias: DMatrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(fan_in, fan_out),
            bias: DMatrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }
}

impl Parameters for Linear {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn random(init: &mut WeightInit, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            hidden: Linear::random(init, fan_in, hidden),
            output: Linear::random(init, hidden, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            hidden: Linear::zeros(fan_in, hidden),
            output: Linear::zeros(hidden, fan_out),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let h = self.hidden.forward(x).map(|v| v.max(0.0));
        self.output.forward(&h)
    }

    pub fn forward_row(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let y = self.forward(&m);
        DVector::from_iterator(y.ncols(), y.iter().copied())
    }
}

impl Parameters for Mlp {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        self.hidden.visit(f);
        self.output.visit(f);
    }
}

/// Query/key/value projections for multi-head attention over `D` channels,
/// split into contiguous per-head blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub heads: usize,
    pub w_o: Option<DMatrix<f64>>,
}

impl AttentionWeights {
    pub fn new(
        w_q: DMatrix<f64>,
        w_k: DMatrix<f64>,
        w_v: DMatrix<f64>,
        heads: usize,
        w_o: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let w = Self {
            w_q,
            w_k,
            w_v,
            heads,
            w_o,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn random(init: &mut WeightInit, dim: usize, heads: usize) -> Result<Self> {
        Self::new(
            init.projection(dim, dim),
            init.projection(dim, dim),
            init.projection(dim, dim),
            heads,
            None,
        )
    }

    /// Random queries/keys with identity values.
    pub fn identity_values(init: &mut WeightInit, dim: usize, heads: usize) -> Result<Self> {
        Self::new(
            init.projection(dim, dim),
            init.projection(dim, dim),
            DMatrix::identity(dim, dim),
            heads,
            None,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.nrows();
        for (name, m) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}×{}, expected {d}×{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidInput(format!("{d} channels not divisible into {} heads", self.heads)));
        }
        if let Some(o) = &self.w_o {
            if o.nrows() != d || o.ncols() != d {
                return Err(Error::DimensionMismatch("output projection must be D×D".into()));
            }
        }
        Ok(())
    }
}

impl Parameters for AttentionWeights {
    fn visit(&mut self, f: &mut dyn FnMut(&mut DMatrix<f64>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        if let Some(o) = &mut self.w_o {
            f(o);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = AttentionWeights::random(&mut WeightInit::new(RngSeed(7)), 16, 4).unwrap();
        let b = AttentionWeights::random(&mut WeightInit::new(RngSeed(7)), 16, 4).unwrap();
        assert_eq!(a, b);
        let c = AttentionWeights::random(&mut WeightInit::new(RngSeed(8)), 16, 4).unwrap();
        assert_ne!(a.w_q, c.w_q);
    }

    #[test]
    fn entries_have_zero_mean() {
        // 10⁴ draws of N(0, 1/D): sample mean within 3 standard errors of 0
        let d = 100;
        let m = WeightInit::new(RngSeed(5)).projection(d, d);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0 / d as f64).abs() < 0.1 / d as f64);
        assert!(mean.abs() < 3.0 * (var / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn head_divisibility_is_checked() {
        let m = DMatrix::identity(6, 6);
        assert!(AttentionWeights::new(m.clone(), m.clone(), m.clone(), 4, None).is_err());
        assert!(AttentionWeights::new(m.clone(), m.clone(), m, 3, None).is_ok());
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mlp = Mlp::zeros(3, 8, 2);
        let y = mlp.forward(&DMatrix::from_element(4, 3, 1.5));
        assert!(y.iter().all(|v| *v == 0.0));
    }
}
