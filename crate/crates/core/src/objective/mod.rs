//! Objective functionals on particle ensembles.
//!
//! Every objective exposes the value `F(μ)`, the Wasserstein gradient
//! `∇_μF(μ, x)` evaluated at the particles, the Hessian kernel block
//! `∇²_μF(μ, x_i, x_j)` and the spatial Jacobian `∇∇_μF(μ, x_i)` of the
//! gradient. When the ensemble moves as `x_j ↦ x_j + h v_j`,
//!
//! ```text
//! F = F(μ) + h⟨∇_μF, v⟩ + (h²/2)⟨v, (H_μ + H'_μ) v⟩ + O(h³)
//! (H_μ v)_i  = (1/N) Σ_j ∇²_μF(μ, x_i, x_j) v_j
//! (H'_μ v)_i = ∇∇_μF(μ, x_i) v_i
//! ```
//!
//! which is what the finite-difference oracles in [`crate::fdcheck`] test.

mod coulomb;
mod icfl;
mod linear;
mod matdecomp;
mod neural;
mod quartic;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};
use crate::rng;

pub use coulomb::CoulombMmd;
pub use icfl::Icfl;
pub use linear::LinearPotential;
pub use matdecomp::MatrixDecomposition;
pub use neural::{h_mu_features, NeuralDims};
pub use quartic::MeanQuartic;

/// Capability set shared by all objectives.
///
/// Implementations are immutable after construction and every method is a
/// pure function of its arguments, with sums over data reduced in a fixed
/// order.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    /// Parameter dimension `d` of a single particle.
    fn dim(&self) -> usize;

    fn value(&self, ens: &ParticleEnsemble) -> Result<f64>;

    /// `∇_μF(μ, x_j)` for every particle `j`.
    fn gradient(&self, ens: &ParticleEnsemble) -> Result<StackedField>;

    fn value_and_gradient(&self, ens: &ParticleEnsemble) -> Result<(f64, StackedField)> {
        Ok((self.value(ens)?, self.gradient(ens)?))
    }

    /// `∇_μF(μ, x)` at an arbitrary point `x` with `μ` held fixed.
    fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>>;

    /// `∇²_μF(μ, x_i, x_j)` as a `d × d` matrix (rows index `x_i`).
    fn hessian_block(&self, _ens: &ParticleEnsemble, _i: usize, _j: usize) -> Result<DMatrix<f64>> {
        Err(self.unsupported("hessian_block"))
    }

    /// All `N²` kernel blocks, particle-major (`Nd × Nd`, not symmetrized).
    fn hessian_matrix(&self, ens: &ParticleEnsemble) -> Result<DMatrix<f64>> {
        let (n, d) = (ens.n(), ens.d());
        let mut a = DMatrix::zeros(n * d, n * d);
        for i in 0..n {
            for j in 0..n {
                let b = self.hessian_block(ens, i, j)?;
                a.view_mut((i * d, j * d), (d, d)).copy_from(&b);
            }
        }
        Ok(a)
    }

    /// `∇∇_μF(μ, x_i)`, the Jacobian of `x ↦ ∇_μF(μ, x)` at `x_i`.
    fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>>;

    fn supports_hessian(&self) -> bool {
        true
    }

    /// Size of the data set the expectations run over, if any.
    fn dataset_len(&self) -> Option<usize> {
        None
    }

    /// Same objective with expectations restricted to the given samples.
    fn restrict(&self, _indices: &[usize]) -> Option<Box<dyn Objective>> {
        None
    }

    fn unsupported(&self, capability: &'static str) -> Error {
        Error::Unsupported {
            objective: self.name().to_string(),
            capability,
        }
    }

    fn check_dim(&self, ens: &ParticleEnsemble) -> Result<()> {
        if ens.d() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: ens.d(),
                context: "ensemble dimension vs objective",
            });
        }
        Ok(())
    }
}

pub(crate) fn check_index(ens: &ParticleEnsemble, i: usize) -> Result<()> {
    if i >= ens.n() {
        return Err(Error::InvalidArgument(format!(
            "particle index {i} out of range for N={}",
            ens.n()
        )));
    }
    Ok(())
}

pub(crate) fn check_point(dim: usize, x: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
            context: "query point",
        });
    }
    Ok(())
}

/// Fixed set of input samples `z ∈ R^l`; `E_z` is the plain mean over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<f64>,
    m: usize,
    l: usize,
    seed: u64,
}

impl Dataset {
    pub fn new(m: usize, l: usize, samples: Vec<f64>, seed: u64) -> Result<Self> {
        if m == 0 || l == 0 || samples.len() != m * l {
            return Err(Error::InvalidArgument(format!(
                "dataset needs M >= 1 samples of length l >= 1 (M={m}, l={l}, len={})",
                samples.len()
            )));
        }
        Ok(Self { samples, m, l, seed })
    }

    /// `M` i.i.d. standard normal vectors in `R^l`.
    pub fn standard_normal(m: usize, l: usize, seed: u64) -> Result<Self> {
        let mut r = rng::substream(seed, rng::STREAM_DATASET);
        let samples = (0..m * l).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        Self::new(m, l, samples, seed)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn input_dim(&self) -> usize {
        self.l
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        &self.samples[s * self.l..(s + 1) * self.l]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut samples = Vec::with_capacity(indices.len() * self.l);
        for &s in indices {
            if s >= self.m {
                return Err(Error::InvalidArgument(format!("sample index {s} out of range")));
            }
            samples.extend_from_slice(self.sample(s));
        }
        Self::new(indices.len(), self.l, samples, self.seed)
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Returns `(σ, σ', σ'')` at `t`.
pub(crate) fn sigmoid_derivs(t: f64) -> (f64, f64, f64) {
    let s = sigmoid(t);
    let ds = s * (1.0 - s);
    (s, ds, ds * (1.0 - 2.0 * s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        let (s, ds, dds) = sigmoid_derivs(0.3);
        let h = 1e-5;
        assert!((ds - (sigmoid(0.3 + h) - sigmoid(0.3 - h)) / (2.0 * h)).abs() < 1e-9);
        let (_, dp, _) = sigmoid_derivs(0.3 + h);
        let (_, dm, _) = sigmoid_derivs(0.3 - h);
        assert!((dds - (dp - dm) / (2.0 * h)).abs() < 1e-9);
        assert!(s > 0.5);
    }

    #[test]
    fn dataset_is_seeded() {
        let a = Dataset::standard_normal(10, 3, 7).unwrap();
        let b = Dataset::standard_normal(10, 3, 7).unwrap();
        let c = Dataset::standard_normal(10, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let s = a.subset(&[3, 1]).unwrap();
        assert_eq!(s.sample(0), a.sample(3));
        assert_eq!(s.len(), 2);
        assert!(a.subset(&[10]).is_err());
    }
}
