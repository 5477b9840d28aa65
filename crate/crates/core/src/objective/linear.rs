use nalgebra::{DMatrix, DVector};

use super::{check_index, check_point, Objective};
use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};

/// `F(μ) = ∫ V dμ` with the quadratic potential `V(x) = ½ (x−c)ᵀ Q (x−c)`.
///
/// The first variation is `V` itself, so the Hessian kernel vanishes and
/// `∇∇_μF = Q` everywhere.
#[derive(Debug, Clone)]
pub struct LinearPotential {
    q: DMatrix<f64>,
    center: DVector<f64>,
}

impl LinearPotential {
    pub fn new(q: DMatrix<f64>, center: Vec<f64>) -> Result<Self> {
        let d = center.len();
        if d == 0 || q.nrows() != d || q.ncols() != d {
            return Err(Error::InvalidArgument("potential matrix must be d×d".into()));
        }
        if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::InvalidArgument("potential matrix must be symmetric".into()));
        }
        Ok(Self {
            q,
            center: DVector::from_vec(center),
        })
    }

    /// `V(x) = ½‖x‖²`.
    pub fn isotropic(d: usize) -> Self {
        Self {
            q: DMatrix::identity(d, d),
            center: DVector::zeros(d),
        }
    }

    fn grad_point(&self, x: &[f64]) -> Vec<f64> {
        let dx = DVector::from_column_slice(x) - &self.center;
        (&self.q * dx).as_slice().to_vec()
    }
}

impl Objective for LinearPotential {
    fn name(&self) -> &str {
        "linear_potential"
    }

    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, ens: &ParticleEnsemble) -> Result<f64> {
        self.check_dim(ens)?;
        let total: f64 = ens
            .particles()
            .map(|x| {
                let dx = DVector::from_column_slice(x) - &self.center;
                0.5 * dx.dot(&(&self.q * &dx))
            })
            .sum();
        Ok(total / ens.n() as f64)
    }

    fn gradient(&self, ens: &ParticleEnsemble) -> Result<StackedField> {
        self.check_dim(ens)?;
        let values = ens.particles().flat_map(|x| self.grad_point(x)).collect();
        StackedField::new(ens.n(), ens.d(), values)
    }

    fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(ens)?;
        check_point(self.dim(), x)?;
        Ok(self.grad_point(x))
    }

    fn hessian_block(&self, ens: &ParticleEnsemble, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_dim(ens)?;
        check_index(ens, i)?;
        check_index(ens, j)?;
        Ok(DMatrix::zeros(self.dim(), self.dim()))
    }

    fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>> {
        self.check_dim(ens)?;
        check_index(ens, i)?;
        Ok(self.q.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_is_position() {
        let obj = LinearPotential::isotropic(2);
        let ens = ParticleEnsemble::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(obj.gradient(&ens).unwrap().as_slice(), ens.as_slice());
        assert!((obj.value(&ens).unwrap() - 0.5 * (5.0 + 9.25) / 2.0).abs() < 1e-15);
        assert_eq!(obj.hessian_block(&ens, 0, 1).unwrap(), DMatrix::zeros(2, 2));
        assert_eq!(obj.grad_grad(&ens, 1).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn shifted_anisotropic() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let obj = LinearPotential::new(q, vec![1.0, 0.0]).unwrap();
        let ens = ParticleEnsemble::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(obj.value(&ens).unwrap(), 0.0);
        assert_eq!(obj.gradient_at(&ens, &[2.0, 1.0]).unwrap(), vec![2.5, 1.5]);
        assert!(LinearPotential::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]), vec![0.0; 2]).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let obj = LinearPotential::isotropic(3);
        let ens = ParticleEnsemble::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(obj.value(&ens).is_err());
        assert!(obj
            .hessian_block(&ParticleEnsemble::from_rows(&[vec![0.0; 3]]).unwrap(), 0, 1)
            .is_err());
    }
}
