//! Self-check suite behind `pwgf verify`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::Result;
use crate::fdcheck::{self, FDReport};
use crate::gp_sampler::{sample_hessian_gp, sample_spectral};
use crate::hessian_op::HessianOperator;
use crate::objective::{
    CoulombMmd, Dataset, Icfl, LinearPotential, MatrixDecomposition, MeanQuartic, NeuralDims, Objective,
};
use crate::rng;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const STREAM_DIRECTION: u64 = 11;
const STREAM_SAMPLES: u64 = 12;

/// An objective with the ensembles it is checked at.
pub struct Case {
    pub obj: Box<dyn Objective>,
    pub ensembles: Vec<(u64, ParticleEnsemble)>,
}

fn gaussian(n: usize, d: usize, scale: f64, r: &mut rng::Rng) -> Result<ParticleEnsemble> {
    let pos = (0..n * d).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    ParticleEnsemble::new(n, d, pos)
}

/// Random direction with unit `L²(μ)` norm.
pub fn unit_direction(n: usize, d: usize, seed: u64) -> Result<StackedField> {
    let mut r = rng::substream(seed, STREAM_DIRECTION);
    let vals: Vec<f64> = (0..n * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let f = StackedField::new(n, d, vals)?;
    let norm = f.l2_norm();
    Ok(f.scaled(1.0 / norm))
}

pub fn linear_case() -> Result<Case> {
    let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 1.5]);
    let obj = LinearPotential::new(q, vec![0.1, -0.2, 0.3])?;
    let ensembles = SEEDS
        .iter()
        .map(|&s| Ok((s, gaussian(5, 3, 1.0, &mut rng::substream(s, rng::STREAM_INIT))?)))
        .collect::<Result<_>>()?;
    Ok(Case {
        obj: Box::new(obj),
        ensembles,
    })
}

pub fn quartic_case() -> Result<Case> {
    let ensembles = SEEDS
        .iter()
        .map(|&s| Ok((s, gaussian(6, 3, 1.0, &mut rng::substream(s, rng::STREAM_INIT))?)))
        .collect::<Result<_>>()?;
    Ok(Case {
        obj: Box::new(MeanQuartic::new(3)),
        ensembles,
    })
}

pub const SMALL_NET: NeuralDims = NeuralDims { k: 3, l: 5 };
pub const SMALL_N: usize = 10;
pub const SMALL_M: usize = 200;

fn small_net_ensembles() -> Result<Vec<(u64, ParticleEnsemble)>> {
    SEEDS
        .iter()
        .map(|&s| {
            let mut r = rng::substream(s, rng::STREAM_INIT);
            Ok((s, SMALL_NET.random_ensemble(SMALL_N, 1.0, 0.5, &mut r)?))
        })
        .collect()
}

pub fn small_matdecomp() -> Result<MatrixDecomposition> {
    let data = Dataset::standard_normal(SMALL_M, SMALL_NET.l, 7)?;
    MatrixDecomposition::new(SMALL_NET, SMALL_NET.default_target(4, 7)?, data)
}

pub fn small_icfl() -> Result<Icfl> {
    let data = Dataset::standard_normal(SMALL_M, SMALL_NET.l, 7)?;
    Icfl::new(SMALL_NET, SMALL_NET.default_target(6, 7)?, data, None)
}

pub fn matdecomp_case() -> Result<Case> {
    Ok(Case {
        obj: Box::new(small_matdecomp()?),
        ensembles: small_net_ensembles()?,
    })
}

pub fn icfl_case() -> Result<Case> {
    Ok(Case {
        obj: Box::new(small_icfl()?),
        ensembles: small_net_ensembles()?,
    })
}

pub fn standard_cases() -> Result<Vec<Case>> {
    Ok(vec![linear_case()?, quartic_case()?, matdecomp_case()?, icfl_case()?])
}

/// Gradient, second-order and kernel checks on every ensemble of every case.
/// Objectives without a Hessian get the gradient check only.
pub fn fd_suite(cases: &[Case]) -> Result<Vec<FDReport>> {
    let jobs: Vec<(&Case, u64, &ParticleEnsemble)> = cases
        .iter()
        .flat_map(|c| c.ensembles.iter().map(move |(s, e)| (c, *s, e)))
        .collect();
    let per_job: Vec<Result<Vec<FDReport>>> = jobs
        .par_iter()
        .map(|&(case, seed, ens)| {
            let obj = case.obj.as_ref();
            let label = format!("seed={seed}");
            let v = unit_direction(ens.n(), ens.d(), seed)?;
            let mut out = vec![fdcheck::fd_gradient_check(obj, ens, &v, fdcheck::DEFAULT_H)?.with_label(&label)];
            if obj.supports_hessian() {
                out.push(fdcheck::fd_second_order_check(obj, ens, &v, &fdcheck::SUITE_H_GRID)?.with_label(&label));
                for (i, j) in [(0, 1), (1, 1)] {
                    let r = fdcheck::fd_hessian_kernel_check(obj, ens, i, j, fdcheck::DEFAULT_H)?;
                    let l = format!("{label},{}", r.label);
                    out.push(r.with_label(l));
                }
            }
            Ok(out)
        })
        .collect();
    let mut reports = Vec::new();
    for r in per_job {
        reports.extend(r?);
    }
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct StatCheck {
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub passed: bool,
}

impl fmt::Display for StatCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<44} observed={:<12.4e} bound={:<12.4e} {}",
            self.name,
            self.observed,
            self.bound,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingPath {
    MatrixProduct,
    KarhunenLoeve,
}

/// Symmetric zero-mean ensemble of the quartic, where every kernel block of `K` is `I_d`.
pub fn quartic_saddle(n: usize, d: usize) -> Result<ParticleEnsemble> {
    crate::harness::symmetric_saddle(n, d, 1.0, &mut rng::substream(0, rng::STREAM_INIT))
}

/// Max entry error of the empirical stacked covariance against `K` on the
/// quartic saddle (`N = 8`, `d = 2`).
pub fn covariance_check(path: SamplingPath, draws: usize, seed: u64) -> Result<StatCheck> {
    let ens = quartic_saddle(8, 2)?;
    let op = HessianOperator::assemble(&MeanQuartic::new(2), &ens)?;
    let k = op.gp_covariance();
    let sp = op.spectrum()?;
    let mut r = rng::substream(seed, STREAM_SAMPLES);
    let s = k.nrows();
    let mut acc = DMatrix::zeros(s, s);
    for _ in 0..draws {
        let xi = match path {
            SamplingPath::MatrixProduct => sample_hessian_gp(&op, &mut r)?,
            SamplingPath::KarhunenLoeve => sample_spectral(&sp, &mut r)?,
        };
        let v = DVector::from_column_slice(xi.as_slice());
        acc.syger(1.0, &v, &v, 1.0);
    }
    acc.fill_upper_triangle_with_lower_triangle();
    let emp = acc / draws as f64;
    let err = (emp - &k).amax();
    Ok(StatCheck {
        name: format!("gp covariance ({path:?}, {draws} draws)"),
        observed: err,
        bound: 0.05,
        passed: err <= 0.05,
    })
}

/// Relative error of `Var⟨ψ₁, ξ⟩` against `λ₁²` for the dominant eigenpair of a
/// small random matrix-decomposition ensemble.
pub fn kl_variance_check(draws: usize, seed: u64) -> Result<StatCheck> {
    let obj = small_matdecomp()?;
    let ens = SMALL_NET.random_ensemble(SMALL_N, 1.0, 0.5, &mut rng::substream(seed, rng::STREAM_INIT))?;
    let op = HessianOperator::assemble(&obj, &ens)?;
    let sp = op.spectrum()?;
    let top = (0..sp.eigenvalues.len())
        .max_by(|&a, &b| sp.eigenvalues[a].abs().total_cmp(&sp.eigenvalues[b].abs()))
        .expect("nonempty spectrum");
    let (lam, psi) = (sp.eigenvalues[top], &sp.eigenfields[top]);
    let mut r = rng::substream(seed, STREAM_SAMPLES);
    let mut proj = Vec::with_capacity(draws);
    for _ in 0..draws {
        proj.push(psi.l2_inner(&sample_hessian_gp(&op, &mut r)?)?);
    }
    let mean = proj.iter().sum::<f64>() / draws as f64;
    let var = proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
    let rel = (var / (lam * lam) - 1.0).abs();
    Ok(StatCheck {
        name: format!("KL variance (lambda_1 = {lam:.4e}, {draws} draws)"),
        observed: rel,
        bound: 0.05,
        passed: rel <= 0.05,
    })
}

pub struct VerifyOutcome {
    pub reports: Vec<FDReport>,
    pub stats: Vec<StatCheck>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed) && self.stats.iter().all(|s| s.passed)
    }

    pub fn print(&self) {
        fdcheck::print_table(&self.reports);
        println!();
        for s in &self.stats {
            println!("{s}");
        }
        println!();
        let failed =
            self.reports.iter().filter(|r| !r.passed).count() + self.stats.iter().filter(|s| !s.passed).count();
        println!(
            "{} checks, {} failed: {}",
            self.reports.len() + self.stats.len(),
            failed,
            if self.passed() { "PASS" } else { "FAIL" }
        );
    }
}

/// Runs the FD suite over `cases` plus the sampler checks.
pub fn verify_cases(cases: &[Case]) -> Result<VerifyOutcome> {
    let reports = fd_suite(cases)?;
    let stats = vec![
        covariance_check(SamplingPath::MatrixProduct, 20_000, 0)?,
        covariance_check(SamplingPath::KarhunenLoeve, 20_000, 1)?,
        kl_variance_check(20_000, 2)?,
    ];
    Ok(VerifyOutcome { reports, stats })
}

/// The full default suite. Writes nothing.
pub fn verify() -> Result<VerifyOutcome> {
    let mut cases = standard_cases()?;
    // gradient-only: the Coulomb objective has no Hessian
    let mut r = rng::substream(0, rng::STREAM_TARGET);
    cases.push(Case {
        obj: Box::new(CoulombMmd::new(gaussian(8, 3, 1.0, &mut r)?, 0.1)?),
        ensembles: SEEDS
            .iter()
            .map(|&s| Ok((s, gaussian(6, 3, 1.0, &mut rng::substream(s, rng::STREAM_INIT))?)))
            .collect::<Result<_>>()?,
    });
    verify_cases(&cases)
}
