use nalgebra::DMatrix;

use super::{check_index, check_point, Objective};
use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};

/// Maximum mean discrepancy with the regularized Coulomb kernel
/// `K(x, y) = (‖x − y‖² + ε²)^{−(d−2)/2}`:
/// `F(μ) = ∬ K d(μ − μ°)⊗²`.
///
/// The empirical double sums keep their diagonal terms for both `μ` and `μ°`,
/// so `F(μ°) = 0` exactly. Only value and gradient are available; the
/// Hessian kernel is not provided.
#[derive(Debug, Clone)]
pub struct CoulombMmd {
    target: ParticleEnsemble,
    eps_reg: f64,
    /// Precomputed `∬ K dμ°dμ°`.
    target_energy: f64,
}

impl CoulombMmd {
    pub fn new(target: ParticleEnsemble, eps_reg: f64) -> Result<Self> {
        if target.d() < 3 {
            return Err(Error::InvalidArgument(format!(
                "Coulomb kernel needs d >= 3, got {}",
                target.d()
            )));
        }
        if !(eps_reg > 0.0 && eps_reg.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_reg must be > 0, got {eps_reg}")));
        }
        let mut obj = Self {
            target,
            eps_reg,
            target_energy: 0.0,
        };
        obj.target_energy = obj.cross(&obj.target, &obj.target);
        Ok(obj)
    }

    pub fn target(&self) -> &ParticleEnsemble {
        &self.target
    }

    fn exponent(&self) -> f64 {
        (self.target.d() as f64 - 2.0) / 2.0
    }

    fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (r2 + self.eps_reg * self.eps_reg).powf(-self.exponent())
    }

    /// `∇_x K(x, y)` accumulated into `out` with weight `w`.
    fn add_kernel_grad(&self, x: &[f64], y: &[f64], w: f64, out: &mut [f64]) {
        let d = x.len() as f64;
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let c = -(d - 2.0) * (r2 + self.eps_reg * self.eps_reg).powf(-d / 2.0) * w;
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o += c * (a - b);
        }
    }

    fn cross(&self, a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
        let mut s = 0.0;
        for x in a.particles() {
            for y in b.particles() {
                s += self.kernel(x, y);
            }
        }
        s / (a.n() as f64 * b.n() as f64)
    }

    fn grad_point(&self, ens: &ParticleEnsemble, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let wn = 2.0 / ens.n() as f64;
        for y in ens.particles() {
            self.add_kernel_grad(x, y, wn, &mut g);
        }
        let wt = -2.0 / self.target.n() as f64;
        for y in self.target.particles() {
            self.add_kernel_grad(x, y, wt, &mut g);
        }
        g
    }
}

impl Objective for CoulombMmd {
    fn name(&self) -> &str {
        "coulomb_mmd"
    }

    fn dim(&self) -> usize {
        self.target.d()
    }

    fn value(&self, ens: &ParticleEnsemble) -> Result<f64> {
        self.check_dim(ens)?;
        Ok(self.cross(ens, ens) - 2.0 * self.cross(ens, &self.target) + self.target_energy)
    }

    fn gradient(&self, ens: &ParticleEnsemble) -> Result<StackedField> {
        self.check_dim(ens)?;
        let values = ens.particles().flat_map(|x| self.grad_point(ens, x)).collect();
        StackedField::new(ens.n(), ens.d(), values)
    }

    fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(ens)?;
        check_point(self.dim(), x)?;
        Ok(self.grad_point(ens, x))
    }

    fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>> {
        self.check_dim(ens)?;
        check_index(ens, i)?;
        let x = ens.particle(i);
        let d = x.len();
        let df = d as f64;
        let mut out = DMatrix::zeros(d, d);
        let mut add = |y: &[f64], w: f64| {
            let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            let base = r2 + self.eps_reg * self.eps_reg;
            let c0 = -(df - 2.0) * base.powf(-df / 2.0) * w;
            let c1 = (df - 2.0) * df * base.powf(-df / 2.0 - 1.0) * w;
            for p in 0..d {
                out[(p, p)] += c0;
                for q in 0..d {
                    out[(p, q)] += c1 * (x[p] - y[p]) * (x[q] - y[q]);
                }
            }
        };
        let wn = 2.0 / ens.n() as f64;
        for y in ens.particles() {
            add(y, wn);
        }
        let wt = -2.0 / self.target.n() as f64;
        for y in self.target.particles() {
            add(y, wt);
        }
        Ok(out)
    }

    fn supports_hessian(&self) -> bool {
        false
    }
}
