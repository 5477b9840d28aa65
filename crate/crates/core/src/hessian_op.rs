//! The discrete Wasserstein Hessian on `L²(μ)^d` and saddle classification.
//!
//! The kernel matrix `A` stacks the blocks `∇²_μF(μ, x_i, x_j)` particle-major;
//! the operator acting on fields is `(1/N) A`, and the covariance of the
//! Hessian-guided Gaussian process is `(1/N) A²`.

use std::fmt;
use std::io::Write;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd;
use nalgebra::{DMatrix, DVector};

use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};
use crate::objective::Objective;

/// Default cap on `N·d` for dense assembly.
pub const DEFAULT_MAX_DIM: usize = 20_000;
/// Allowed relative asymmetry of the assembled kernel before symmetrization.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct HessianOperator {
    n: usize,
    d: usize,
    /// Symmetrized kernel matrix `A`.
    blocks: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Ascending eigenvalues of `(1/N) A`.
    pub eigenvalues: Vec<f64>,
    /// `L²(μ)`-orthonormal eigenfields, paired with `eigenvalues`.
    pub eigenfields: Vec<StackedField>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    NonStationary,
    SecondOrderStationary,
    Saddle,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::NonStationary => "NonStationary",
            Classification::SecondOrderStationary => "SecondOrderStationary",
            Classification::Saddle => "Saddle",
        })
    }
}

/// Outcome of [`classify`] with the quantities it was decided on.
#[derive(Debug, Clone)]
pub struct PointReport {
    pub class: Classification,
    pub grad_norm: f64,
    /// `None` when the gradient test alone decided.
    pub lambda_min: Option<f64>,
}

impl HessianOperator {
    pub fn assemble(obj: &dyn Objective, ens: &ParticleEnsemble) -> Result<Self> {
        Self::assemble_with_limit(obj, ens, DEFAULT_MAX_DIM)
    }

    pub fn assemble_with_limit(obj: &dyn Objective, ens: &ParticleEnsemble, max_dim: usize) -> Result<Self> {
        let size = ens.n() * ens.d();
        if size > max_dim {
            return Err(Error::TooLarge { size, limit: max_dim });
        }
        if !obj.supports_hessian() {
            return Err(obj.unsupported("hessian_block"));
        }
        let raw = obj.hessian_matrix(ens)?;
        Self::from_kernel_matrix(ens.n(), ens.d(), raw)
    }

    /// Wraps a raw particle-major kernel matrix, checking and enforcing symmetry.
    pub fn from_kernel_matrix(n: usize, d: usize, raw: DMatrix<f64>) -> Result<Self> {
        if raw.nrows() != n * d || raw.ncols() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                got: raw.nrows(),
                context: "kernel matrix size",
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Hessian kernel"));
        }
        let scale = raw.amax();
        let asym = (&raw - raw.transpose()).amax();
        let rel = if scale > 0.0 { asym / scale } else { 0.0 };
        if rel > SYMMETRY_TOLERANCE {
            return Err(Error::Asymmetric {
                asymmetry: rel,
                tolerance: SYMMETRY_TOLERANCE,
            });
        }
        let blocks = (&raw + raw.transpose()) * 0.5;
        Ok(Self { n, d, blocks })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// The symmetrized kernel matrix `A`.
    pub fn kernel_matrix(&self) -> &DMatrix<f64> {
        &self.blocks
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.blocks
            .view((i * self.d, j * self.d), (self.d, self.d))
            .into_owned()
    }

    /// `(H f)_i = (1/N) Σ_j A_ij f_j`.
    pub fn apply(&self, f: &StackedField) -> Result<StackedField> {
        self.check_field(f)?;
        let v = DVector::from_column_slice(f.as_slice());
        let out = (&self.blocks * v) / self.n as f64;
        StackedField::new(self.n, self.d, out.as_slice().to_vec())
    }

    /// `K = (1/N) A²`, whose `(i, j)` block is `K_μ(x_i, x_j)`.
    pub fn gp_covariance(&self) -> DMatrix<f64> {
        (&self.blocks * &self.blocks) / self.n as f64
    }

    /// Dense eigendecomposition of `(1/N) A`.
    pub fn spectrum(&self) -> Result<Spectrum> {
        let size = self.n * self.d;
        let inv_n = 1.0 / self.n as f64;
        let scaled = faer::Mat::<f64>::from_fn(size, size, |r, c| self.blocks[(r, c)] * inv_n);
        // sequential, so the result does not depend on the thread pool
        let par = faer::Par::Seq;
        let mut vals = faer::diag::Diag::<f64>::zeros(size);
        let mut vecs = faer::Mat::<f64>::zeros(size, size);
        let scratch =
            evd::self_adjoint_evd_scratch::<f64>(size, evd::ComputeEigenvectors::Yes, par, Default::default());
        evd::self_adjoint_evd(
            scaled.as_ref(),
            vals.as_mut(),
            Some(vecs.as_mut()),
            par,
            MemStack::new(&mut MemBuffer::new(scratch)),
            Default::default(),
        )
        .map_err(|e| Error::Degenerate(format!("symmetric eigensolver failed: {e:?}")))?;
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let root_n = (self.n as f64).sqrt();
        let mut eigenvalues = Vec::with_capacity(size);
        let mut eigenfields = Vec::with_capacity(size);
        for idx in order {
            eigenvalues.push(vals[idx]);
            let col: Vec<f64> = (0..size).map(|r| vecs[(r, idx)] * root_n).collect();
            eigenfields.push(StackedField::new(self.n, self.d, col)?);
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "symmetric eigensolver returned non-finite values".into(),
            ));
        }
        Ok(Spectrum {
            eigenvalues,
            eigenfields,
        })
    }

    pub fn min_eigenvalue(&self) -> Result<(f64, StackedField)> {
        let mut sp = self.spectrum()?;
        let field = sp.eigenfields.swap_remove(0);
        Ok((sp.eigenvalues[0], field))
    }

    fn check_field(&self, f: &StackedField) -> Result<()> {
        if f.n() != self.n || f.d() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.n * self.d,
                got: f.n() * f.d(),
                context: "field vs Hessian operator",
            });
        }
        Ok(())
    }
}

impl Spectrum {
    /// Writes `index,eigenvalue` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "eigenvalue"])?;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(ε, δ)` test: non-stationary if `‖∇F‖ > ε`, else a saddle iff `λ_min < −δ`.
pub fn classify(obj: &dyn Objective, ens: &ParticleEnsemble, eps: f64, delta: f64) -> Result<PointReport> {
    if !(eps > 0.0 && delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps and delta must be positive (eps={eps}, delta={delta})"
        )));
    }
    let grad_norm = obj.gradient(ens)?.l2_norm();
    if grad_norm > eps {
        return Ok(PointReport {
            class: Classification::NonStationary,
            grad_norm,
            lambda_min: None,
        });
    }
    let (lambda_min, _) = HessianOperator::assemble(obj, ens)?.min_eigenvalue()?;
    let class = if lambda_min < -delta {
        Classification::Saddle
    } else {
        Classification::SecondOrderStationary
    };
    Ok(PointReport {
        class,
        grad_norm,
        lambda_min: Some(lambda_min),
    })
}
