//! Random velocity fields for the perturbation step.
//!
//! The Hessian-guided field is `ξ = N^{-1/2} A u` with `u ~ N(0, I_{Nd})`, whose
//! stacked covariance is `(1/N) A² = K`. The spectral form `ξ = Σ λ_n g_n ψ_n`
//! has the same law and exists mainly as a cross-check.

use rand::Rng as _;
use rand_distr::StandardNormal;

use nalgebra::DVector;

use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};
use crate::hessian_op::{HessianOperator, Spectrum};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerMode {
    HessianGuided,
    Isotropic { scale: f64 },
}

/// Owns its RNG stream; independent samplers need distinct streams.
pub struct PerturbationSampler {
    mode: SamplerMode,
    rng: Rng,
}

impl PerturbationSampler {
    pub fn new(mode: SamplerMode, rng: Rng) -> Result<Self> {
        if let SamplerMode::Isotropic { scale } = mode {
            check_scale(scale)?;
        }
        Ok(Self { mode, rng })
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    /// `op` is required for the Hessian-guided mode and ignored otherwise.
    pub fn sample(&mut self, ens: &ParticleEnsemble, op: Option<&HessianOperator>) -> Result<StackedField> {
        match self.mode {
            SamplerMode::HessianGuided => {
                let op =
                    op.ok_or_else(|| Error::InvalidArgument("Hessian-guided sampling needs an operator".into()))?;
                sample_hessian_gp(op, &mut self.rng)
            }
            SamplerMode::Isotropic { scale } => sample_isotropic(ens, scale, &mut self.rng),
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "isotropic scale must be >= 0, got {scale}"
        )));
    }
    Ok(())
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn sample_hessian_gp(op: &HessianOperator, rng: &mut Rng) -> Result<StackedField> {
    let (n, d) = (op.n(), op.d());
    let u = DVector::from_vec(normals(n * d, rng));
    let xi = (op.kernel_matrix() * u) / (n as f64).sqrt();
    StackedField::new(n, d, xi.as_slice().to_vec())
}

/// Karhunen–Loève draw `Σ λ_n g_n ψ_n`.
pub fn sample_spectral(sp: &Spectrum, rng: &mut Rng) -> Result<StackedField> {
    let first = sp
        .eigenfields
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty spectrum".into()))?;
    let g = normals(sp.eigenvalues.len(), rng);
    let mut out = vec![0.0; first.as_slice().len()];
    for ((lam, psi), gn) in sp.eigenvalues.iter().zip(&sp.eigenfields).zip(g) {
        let c = lam * gn;
        for (o, p) in out.iter_mut().zip(psi.as_slice()) {
            *o += c * p;
        }
    }
    StackedField::new(first.n(), first.d(), out)
}

pub fn sample_isotropic(ens: &ParticleEnsemble, scale: f64, rng: &mut Rng) -> Result<StackedField> {
    check_scale(scale)?;
    let values = normals(ens.n() * ens.d(), rng).into_iter().map(|v| v * scale).collect();
    StackedField::new(ens.n(), ens.d(), values)
}

/// Isotropic scale whose `E‖ξ‖²_{L²(μ)}` equals that of the Hessian-guided field:
/// `s² d = Σ λ_n² = ‖A‖_F² / N²`.
pub fn matched_isotropic_scale(op: &HessianOperator) -> f64 {
    let n = op.n() as f64;
    op.kernel_matrix().norm() / (n * (op.d() as f64).sqrt())
}

/// `P(‖ξ‖ ≥ M) ≤ exp(−(e−1)M²/(2eκ₁) + Σκ_n/(2κ₁))` with `κ_n = λ_n²`, clamped to 1.
pub fn tail_bound(eigenvalues: &[f64], m: f64) -> Result<f64> {
    if eigenvalues.is_empty() {
        return Err(Error::Domain("tail bound needs at least one eigenvalue".into()));
    }
    let trace: f64 = eigenvalues.iter().map(|l| l * l).sum();
    let k1 = eigenvalues.iter().map(|l| l * l).fold(0.0, f64::max);
    if !(m * m > trace) || k1 == 0.0 {
        return Err(Error::Domain(format!(
            "tail bound requires M^2 > sum of squared eigenvalues (M^2 = {}, trace = {trace})",
            m * m
        )));
    }
    let e = std::f64::consts::E;
    let exponent = -(e - 1.0) * m * m / (2.0 * e * k1) + trace / (2.0 * k1);
    Ok(exponent.exp().min(1.0))
}
