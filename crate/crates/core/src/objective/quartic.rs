use nalgebra::{DMatrix, DVector};

use super::{check_index, check_point, Objective};
use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::Result;

/// `F(μ) = ¼‖m‖⁴ − ½‖m‖²` with `m = ∫ x μ(dx)`.
///
/// Mean-field objective with closed-form landscape: `m = 0` is a saddle with
/// `λ_min = −1`, and `‖m‖ = 1` is the global minimum `F = −¼`.
#[derive(Debug, Clone)]
pub struct MeanQuartic {
    d: usize,
}

impl MeanQuartic {
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    fn mean_and_norm2(ens: &ParticleEnsemble) -> (Vec<f64>, f64) {
        let m = ens.mean();
        let r2 = m.iter().map(|v| v * v).sum();
        (m, r2)
    }
}

impl Objective for MeanQuartic {
    fn name(&self) -> &str {
        "mean_quartic"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, ens: &ParticleEnsemble) -> Result<f64> {
        self.check_dim(ens)?;
        let (_, r2) = Self::mean_and_norm2(ens);
        Ok(0.25 * r2 * r2 - 0.5 * r2)
    }

    fn gradient(&self, ens: &ParticleEnsemble) -> Result<StackedField> {
        self.check_dim(ens)?;
        let (m, r2) = Self::mean_and_norm2(ens);
        let g: Vec<f64> = m.iter().map(|v| (r2 - 1.0) * v).collect();
        Ok(StackedField::constant(ens.n(), &g))
    }

    fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(ens)?;
        check_point(self.d, x)?;
        let (m, r2) = Self::mean_and_norm2(ens);
        Ok(m.iter().map(|v| (r2 - 1.0) * v).collect())
    }

    /// `2 m mᵀ + (‖m‖² − 1) I`, identical for every pair.
    fn hessian_block(&self, ens: &ParticleEnsemble, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_dim(ens)?;
        check_index(ens, i)?;
        check_index(ens, j)?;
        let (m, r2) = Self::mean_and_norm2(ens);
        let m = DVector::from_vec(m);
        Ok(&m * m.transpose() * 2.0 + DMatrix::identity(self.d, self.d) * (r2 - 1.0))
    }

    fn hessian_matrix(&self, ens: &ParticleEnsemble) -> Result<DMatrix<f64>> {
        self.check_dim(ens)?;
        let block = self.hessian_block(ens, 0, 0)?;
        let (n, d) = (ens.n(), self.d);
        Ok(DMatrix::from_fn(n * d, n * d, |r, c| block[(r % d, c % d)]))
    }

    fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>> {
        self.check_dim(ens)?;
        check_index(ens, i)?;
        Ok(DMatrix::zeros(self.d, self.d))
    }
}
