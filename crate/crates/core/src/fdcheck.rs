//! Finite-difference oracles for the objective contract.
//!
//! Kernel check derivation: with `μ = (1/N)Σδ_{x_k}`, moving particle `j` by
//! `t e_a` changes the gradient field at particle `i` by
//!
//! ```text
//! d/dt ∇_μF(μ_t, x_i(t)) = (1/N) ∇²_μF(μ, x_i, x_j) e_a + δ_ij ∇∇_μF(μ, x_i) e_a
//! ```
//!
//! The first term comes from the measure moving, the second (only for `i = j`)
//! from the evaluation point moving. The second term is measured on its own by
//! differencing `gradient_at` with `μ` frozen, so both analytic pieces are
//! checked separately and in sum.

use std::fmt;

use nalgebra::DMatrix;

use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};
use crate::hessian_op::HessianOperator;
use crate::objective::Objective;

pub const GRADIENT_TOL: f64 = 1e-4;
pub const SLOPE_MIN: f64 = 2.7;
pub const RESIDUAL_FLOOR: f64 = 1e-12;
pub const KERNEL_ABS_TOL: f64 = 1e-3;
pub const KERNEL_REL_TOL: f64 = 1e-3;
pub const DEFAULT_H: f64 = 1e-4;
pub const DEFAULT_H_GRID: [f64; 4] = [1e-1, 3e-2, 1e-2, 3e-3];
/// Grid used by the verify suite; one decade smaller so the network
/// objectives are inside their cubic regime for every sampled direction.
pub const SUITE_H_GRID: [f64; 4] = [3e-2, 1e-2, 3e-3, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Gradient,
    SecondOrder,
    HessianKernel,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckKind::Gradient => "gradient",
            CheckKind::SecondOrder => "second_order",
            CheckKind::HessianKernel => "hessian_kernel",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FDReport {
    pub objective: String,
    pub kind: CheckKind,
    pub steps: Vec<f64>,
    /// Gradient: relative error. Second order: `|r(h)|` per step.
    /// Kernel: worst normalized entry error (≤ 1 passes) for kernel, grad-grad, combined.
    pub errors: Vec<f64>,
    pub slope: Option<f64>,
    pub passed: bool,
    /// Free-form context, e.g. seed or particle pair.
    pub label: String,
}

impl FDReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn table_header() -> String {
        format!(
            "{:<20} {:<15} {:<14} {:>10} {:>12} {:>8}  {}",
            "objective", "check", "label", "h_min", "max_error", "slope", "result"
        )
    }
}

impl fmt::Display for FDReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h_min = self.steps.iter().cloned().fold(f64::INFINITY, f64::min);
        let slope = self.slope.map_or("-".to_string(), |s| format!("{s:.3}"));
        write!(
            f,
            "{:<20} {:<15} {:<14} {:>10.1e} {:>12.3e} {:>8}  {}",
            self.objective,
            self.kind.to_string(),
            self.label,
            h_min,
            self.max_error(),
            slope,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn print_table(reports: &[FDReport]) {
    println!("{}", FDReport::table_header());
    for r in reports {
        println!("{r}");
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("FD step must be > 0, got {h}")));
    }
    Ok(())
}

/// Central difference of `h ↦ F((Id + h v)#μ)` against `⟨∇_μF, v⟩`.
pub fn fd_gradient_check(obj: &dyn Objective, ens: &ParticleEnsemble, v: &StackedField, h: f64) -> Result<FDReport> {
    check_step(h)?;
    ens.check_field(v)?;
    if v.l2_norm() == 0.0 {
        return Err(Error::InvalidArgument("direction field must be nonzero".into()));
    }
    let plus = obj.value(&ens.pushforward(v, h)?)?;
    let minus = obj.value(&ens.pushforward(v, -h)?)?;
    let fd = (plus - minus) / (2.0 * h);
    let analytic = obj.gradient(ens)?.l2_inner(v)?;
    let diff = (fd - analytic).abs();
    let rel = diff / analytic.abs().max(1e-300);
    let passed = rel <= GRADIENT_TOL || diff <= RESIDUAL_FLOOR;
    Ok(FDReport {
        objective: obj.name().to_string(),
        kind: CheckKind::Gradient,
        steps: vec![h],
        errors: vec![if diff <= RESIDUAL_FLOOR { diff } else { rel }],
        slope: None,
        passed,
        label: String::new(),
    })
}

/// `⟨v, (H_op + H') v⟩` with `(H' v)_i = ∇∇_μF(μ, x_i) v_i`.
pub fn second_order_form(obj: &dyn Objective, ens: &ParticleEnsemble, v: &StackedField) -> Result<f64> {
    let op = HessianOperator::assemble(obj, ens)?;
    let hv = op.apply(v)?;
    let mut hp = StackedField::zeros(ens.n(), ens.d());
    for i in 0..ens.n() {
        let g = obj.grad_grad(ens, i)?;
        let vi = nalgebra::DVector::from_column_slice(v.at(i));
        hp.at_mut(i).copy_from_slice((g * vi).as_slice());
    }
    Ok(v.l2_inner(&hv)? + v.l2_inner(&hp)?)
}

/// Residual of the second-order pushforward expansion on a descending step grid.
pub fn fd_second_order_check(
    obj: &dyn Objective,
    ens: &ParticleEnsemble,
    v: &StackedField,
    h_grid: &[f64],
) -> Result<FDReport> {
    if h_grid.len() < 4 || h_grid.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::InvalidArgument(
            "h_grid must be strictly descending with >= 4 points".into(),
        ));
    }
    for h in h_grid {
        check_step(*h)?;
    }
    ens.check_field(v)?;
    let (f0, g) = obj.value_and_gradient(ens)?;
    let lin = g.l2_inner(v)?;
    let quad = second_order_form(obj, ens, v)?;
    let mut residuals = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let fh = obj.value(&ens.pushforward(v, h)?)?;
        residuals.push((fh - f0 - h * lin - 0.5 * h * h * quad).abs());
    }
    let floor = residuals.iter().all(|r| *r <= RESIDUAL_FLOOR);
    let slope = if residuals.iter().all(|r| *r > 0.0) {
        let xs: Vec<f64> = h_grid.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
        Some(ls_slope(&xs, &ys))
    } else {
        None
    };
    let passed = floor || slope.is_some_and(|s| s >= SLOPE_MIN);
    Ok(FDReport {
        objective: obj.name().to_string(),
        kind: CheckKind::SecondOrder,
        steps: h_grid.to_vec(),
        errors: residuals,
        slope,
        passed,
        label: String::new(),
    })
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Worst value of `|x − y| / (abs + rel·|y|)`; at most 1 means pass.
fn normalized_error(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b).abs() / (KERNEL_ABS_TOL + KERNEL_REL_TOL * b.abs()))
        .fold(0.0, f64::max)
}

/// Entrywise check of `∇²_μF(μ, x_i, x_j)` (and `∇∇_μF(μ, x_i)` when `i = j`).
pub fn fd_hessian_kernel_check(
    obj: &dyn Objective,
    ens: &ParticleEnsemble,
    i: usize,
    j: usize,
    h: f64,
) -> Result<FDReport> {
    check_step(h)?;
    let (n, d) = (ens.n(), ens.d());
    if i >= n || j >= n {
        return Err(Error::InvalidArgument(format!(
            "particle index out of range (i={i}, j={j}, N={n})"
        )));
    }
    let kernel = obj.hessian_block(ens, i, j)?;
    let nf = n as f64;

    // response of the gradient at particle i to moving particle j
    let mut response = DMatrix::zeros(d, d);
    for a in 0..d {
        let up = ens.with_shifted(j, a, h);
        let dn = ens.with_shifted(j, a, -h);
        let gu = obj.gradient_at(&up, up.particle(i))?;
        let gd = obj.gradient_at(&dn, dn.particle(i))?;
        for p in 0..d {
            response[(p, a)] = (gu[p] - gd[p]) / (2.0 * h);
        }
    }

    let mut errors = Vec::new();
    let expected_total;
    if i == j {
        let gg = obj.grad_grad(ens, i)?;
        let x = ens.particle(i);
        let mut gg_fd = DMatrix::zeros(d, d);
        for a in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[a] += h;
            xm[a] -= h;
            let gu = obj.gradient_at(ens, &xp)?;
            let gd = obj.gradient_at(ens, &xm)?;
            for p in 0..d {
                gg_fd[(p, a)] = (gu[p] - gd[p]) / (2.0 * h);
            }
        }
        let kernel_fd = (&response - &gg_fd) * nf;
        errors.push(normalized_error(&kernel_fd, &kernel));
        errors.push(normalized_error(&gg_fd, &gg));
        expected_total = &kernel / nf + gg;
    } else {
        errors.push(normalized_error(&(&response * nf), &kernel));
        expected_total = &kernel / nf;
    }
    errors.push(normalized_error(&response, &expected_total));

    let passed = errors.iter().all(|e| e.is_finite() && *e <= 1.0);
    Ok(FDReport {
        objective: obj.name().to_string(),
        kind: CheckKind::HessianKernel,
        steps: vec![h],
        errors,
        slope: None,
        passed,
        label: format!("i={i},j={j}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{LinearPotential, MeanQuartic};

    fn ens() -> ParticleEnsemble {
        ParticleEnsemble::from_rows(&[vec![0.3, -0.2], vec![1.1, 0.4], vec![-0.5, 0.9]]).unwrap()
    }

    fn dir() -> StackedField {
        StackedField::from_rows(&[vec![0.5, 1.0], vec![-0.3, 0.2], vec![0.8, -0.6]]).unwrap()
    }

    #[test]
    fn linear_potential_is_exact() {
        let obj = LinearPotential::isotropic(2);
        let g = fd_gradient_check(&obj, &ens(), &dir(), DEFAULT_H).unwrap();
        assert!(g.passed && g.max_error() < 1e-10, "{g}");
        let s = fd_second_order_check(&obj, &ens(), &StackedField::constant(3, &[1.0, -2.0]), &DEFAULT_H_GRID).unwrap();
        assert!(s.passed && s.max_error() < 1e-12, "{s}");
        let k = fd_hessian_kernel_check(&obj, &ens(), 0, 1, DEFAULT_H).unwrap();
        assert!(k.passed, "{k}");
        let k = fd_hessian_kernel_check(&obj, &ens(), 2, 2, DEFAULT_H).unwrap();
        assert!(k.passed, "{k}");
    }

    #[test]
    fn quartic_checks() {
        let obj = MeanQuartic::new(2);
        let g = fd_gradient_check(&obj, &ens(), &dir(), DEFAULT_H).unwrap();
        assert!(g.passed && g.max_error() < 1e-6, "{g}");
        let s = fd_second_order_check(&obj, &ens(), &dir(), &DEFAULT_H_GRID).unwrap();
        assert!(s.passed && s.slope.unwrap() >= SLOPE_MIN, "{s}");
        for (i, j) in [(0, 1), (1, 1)] {
            let k = fd_hessian_kernel_check(&obj, &ens(), i, j, DEFAULT_H).unwrap();
            assert!(k.passed, "{k}");
        }
    }

    #[test]
    fn quartic_saddle_recovers_minus_identity() {
        let obj = MeanQuartic::new(2);
        let sym = ParticleEnsemble::from_rows(&[vec![0.5, 0.25], vec![-0.5, -0.25]]).unwrap();
        let k = fd_hessian_kernel_check(&obj, &sym, 0, 1, DEFAULT_H).unwrap();
        assert!(k.passed, "{k}");
        assert!(k.errors[0] < 1e-3);
    }

    /// Deliberately broken gradient to prove the oracle bites.
    struct FlippedGradient(MeanQuartic);

    impl Objective for FlippedGradient {
        fn name(&self) -> &str {
            "flipped"
        }
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn value(&self, ens: &ParticleEnsemble) -> Result<f64> {
            self.0.value(ens)
        }
        fn gradient(&self, ens: &ParticleEnsemble) -> Result<StackedField> {
            Ok(self.0.gradient(ens)?.scaled(-1.0))
        }
        fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.gradient_at(ens, x)?.into_iter().map(|v| -v).collect())
        }
        fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>> {
            self.0.grad_grad(ens, i)
        }
    }

    #[test]
    fn wrong_sign_fails() {
        let obj = FlippedGradient(MeanQuartic::new(2));
        let g = fd_gradient_check(&obj, &ens(), &dir(), DEFAULT_H).unwrap();
        assert!(!g.passed);
    }

    #[test]
    fn rejects_bad_inputs() {
        let obj = MeanQuartic::new(2);
        assert!(fd_gradient_check(&obj, &ens(), &StackedField::zeros(3, 2), 1e-4).is_err());
        assert!(fd_gradient_check(&obj, &ens(), &dir(), 0.0).is_err());
        assert!(fd_second_order_check(&obj, &ens(), &dir(), &[1e-1, 1e-2, 1e-3]).is_err());
        assert!(fd_second_order_check(&obj, &ens(), &dir(), &[1e-3, 1e-2, 1e-1, 1.0]).is_err());
        assert!(fd_hessian_kernel_check(&obj, &ens(), 0, 5, 1e-4).is_err());
    }

    #[test]
    fn slope_of_exact_power() {
        let xs: Vec<f64> = DEFAULT_H_GRID.iter().map(|h: &f64| h.ln()).collect();
        let ys: Vec<f64> = DEFAULT_H_GRID.iter().map(|h: &f64| (2.0 * h.powi(3)).ln()).collect();
        assert!((ls_slope(&xs, &ys) - 3.0).abs() < 1e-12);
    }
}
