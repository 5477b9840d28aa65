//! Discrete perturbed Wasserstein gradient descent.
//!
//! Each iteration takes a gradient step `μ ← (Id − η∇_μF(μ))#μ`. When the
//! gradient norm drops to `ε` and no evaluation window is open, the ensemble
//! is pushed along a random field `η_p ξ`; `k_thres` steps later the decrease
//! since the perturbation is compared with `F_thres`, and an insufficient
//! decrease halts the run at the pre-perturbation ensemble.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;

use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};
use crate::gp_sampler::{matched_isotropic_scale, sample_hessian_gp, sample_isotropic};
use crate::hessian_op::{HessianOperator, DEFAULT_MAX_DIM};
use crate::objective::Objective;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Static,
    Isotropic,
    Hessian,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Isotropic => "isotropic",
            Mode::Hessian => "hessian",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Mode::Static),
            "isotropic" => Ok(Mode::Isotropic),
            "hessian" => Ok(Mode::Hessian),
            _ => Err(Error::Config(format!(
                "unknown mode '{s}' (expected static, isotropic or hessian)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PWGFConfig {
    pub eta: f64,
    pub eta_p: f64,
    pub eps: f64,
    /// Only used for diagnostics and by [`default_hyperparameters`].
    pub delta: f64,
    pub k_thres: usize,
    pub f_thres: f64,
    pub max_iters: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Samples per step; 0 means full batch.
    pub minibatch: usize,
    /// Isotropic baseline scale; `None` matches the Hessian-guided second moment.
    pub iso_scale: Option<f64>,
    /// Static mode stops once the gradient norm is ≤ `eps · static_halt_factor`; 0 disables.
    pub static_halt_factor: f64,
    pub hessian_max_dim: usize,
}

impl Default for PWGFConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            eta_p: 0.1,
            eps: 1e-6,
            delta: 0.5,
            k_thres: 200,
            f_thres: 0.01,
            max_iters: 2000,
            mode: Mode::Hessian,
            seed: 0,
            minibatch: 0,
            iso_scale: None,
            static_halt_factor: 0.0,
            hessian_max_dim: DEFAULT_MAX_DIM,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

impl PWGFConfig {
    pub fn validate(&self) -> Result<()> {
        positive("eta", self.eta)?;
        positive("eta_p", self.eta_p)?;
        positive("eps", self.eps)?;
        positive("delta", self.delta)?;
        positive("f_thres", self.f_thres)?;
        if self.k_thres < 1 {
            return Err(Error::Config("k_thres must be >= 1".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if let Some(s) = self.iso_scale {
            positive("iso_scale", s)?;
        }
        if !(self.static_halt_factor >= 0.0 && self.static_halt_factor.is_finite()) {
            return Err(Error::Config("static_halt_factor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Problem constants entering the hyperparameter formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsConfig {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub r1: f64,
    pub r2: f64,
    pub zeta: f64,
    pub delta_f: f64,
}

impl ConstantsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L1", self.l1),
            ("L2", self.l2),
            ("L3", self.l3),
            ("R1", self.r1),
            ("R2", self.r2),
            ("zeta", self.zeta),
            ("delta_F", self.delta_f),
        ] {
            positive(name, v)?;
        }
        if self.zeta >= 1.0 {
            return Err(Error::Config(format!("zeta must be < 1, got {}", self.zeta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    None,
    Perturb,
    EvalPass,
    EvalFailHalt,
}

impl Event {
    pub fn as_str(&self) -> &'static str {
        match self {
            Event::None => "none",
            Event::Perturb => "perturb",
            Event::EvalPass => "eval_pass",
            Event::EvalFailHalt => "eval_fail_halt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    HaltedAtStationary,
    MaxIters,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::HaltedAtStationary => "HaltedAtStationary",
            Status::MaxIters => "MaxIters",
        })
    }
}

/// One row per iteration, measured on the ensemble before that iteration's
/// perturbation and step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub f_value: f64,
    pub grad_norm: f64,
    pub event: Event,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub status: Status,
}

impl RunTrace {
    pub fn perturbations(&self) -> usize {
        self.records.iter().filter(|r| r.event == Event::Perturb).count()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "f_value", "grad_norm", "event", "elapsed_ms"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                format!("{:e}", r.f_value),
                format!("{:e}", r.grad_norm),
                r.event.as_str().to_string(),
                format!("{:.3}", r.elapsed_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(Id − η ∇_μF(μ))#μ`.
pub fn wgd_step(obj: &dyn Objective, ens: &ParticleEnsemble, eta: f64) -> Result<ParticleEnsemble> {
    positive("eta", eta)?;
    ens.pushforward(&obj.gradient(ens)?, -eta)
}

struct Batcher {
    size: usize,
    len: usize,
    rng: rng::Rng,
}

impl Batcher {
    fn new(obj: &dyn Objective, cfg: &PWGFConfig) -> Result<Option<Self>> {
        let Some(len) = obj.dataset_len() else {
            return Ok(None);
        };
        if cfg.minibatch == 0 || cfg.minibatch >= len {
            return Ok(None);
        }
        if obj.restrict(&[0]).is_none() {
            return Err(Error::Config(format!(
                "objective '{}' does not support minibatching",
                obj.name()
            )));
        }
        Ok(Some(Self {
            size: cfg.minibatch,
            len,
            rng: rng::substream(cfg.seed, rng::STREAM_MINIBATCH),
        }))
    }

    fn draw(&mut self, obj: &dyn Objective) -> Box<dyn Objective> {
        let mut idx = index::sample(&mut self.rng, self.len, self.size).into_vec();
        idx.sort_unstable();
        obj.restrict(&idx).expect("restriction support checked at construction")
    }
}

fn perturbation(obj: &dyn Objective, ens: &ParticleEnsemble, cfg: &PWGFConfig, event: u64) -> Result<StackedField> {
    let mut r = rng::perturbation_stream(cfg.seed, event);
    match cfg.mode {
        Mode::Static => unreachable!("static mode never perturbs"),
        Mode::Hessian => {
            let op = HessianOperator::assemble_with_limit(obj, ens, cfg.hessian_max_dim)?;
            sample_hessian_gp(&op, &mut r)
        }
        Mode::Isotropic => {
            let scale = match cfg.iso_scale {
                Some(s) => s,
                None => matched_isotropic_scale(&HessianOperator::assemble_with_limit(obj, ens, cfg.hessian_max_dim)?),
            };
            sample_isotropic(ens, scale, &mut r)
        }
    }
}

/// Runs the driver and returns the final ensemble with its trace.
pub fn run(obj: &dyn Objective, ens0: &ParticleEnsemble, cfg: &PWGFConfig) -> Result<(ParticleEnsemble, RunTrace)> {
    cfg.validate()?;
    obj.check_dim(ens0)?;
    if cfg.mode == Mode::Hessian && !obj.supports_hessian() {
        return Err(obj.unsupported("hessian_block"));
    }
    if cfg.mode == Mode::Isotropic && cfg.iso_scale.is_none() && !obj.supports_hessian() {
        return Err(Error::Config(format!(
            "objective '{}' has no Hessian; isotropic mode needs an explicit scale",
            obj.name()
        )));
    }
    let mut batcher = Batcher::new(obj, cfg)?;
    let start = Instant::now();
    let at = |iter: usize, e: Error| Error::Step {
        iter,
        source: Box::new(e),
    };

    let mut ens = ens0.clone();
    let mut records = Vec::with_capacity(cfg.max_iters.min(1 << 20));
    let k_thres = cfg.k_thres as i64;
    let mut k_p: i64 = -(k_thres + 1);
    let mut saved: Option<(ParticleEnsemble, f64)> = None;
    let mut events = 0u64;

    for k in 0..cfg.max_iters {
        let (f, full_grad) = obj.value_and_gradient(&ens).map_err(|e| at(k, e))?;
        if !f.is_finite() {
            return Err(at(k, Error::NonFinite("objective value")));
        }
        let grad_norm = full_grad.l2_norm();
        let batch = batcher.as_mut().map(|b| b.draw(obj));
        let step_obj: &dyn Objective = batch.as_deref().unwrap_or(obj);
        let mut step_grad = match &batch {
            Some(b) => b.gradient(&ens).map_err(|e| at(k, e))?,
            None => full_grad,
        };
        let check_norm = step_grad.l2_norm();
        let mut event = Event::None;
        let elapsed = || start.elapsed().as_secs_f64() * 1e3;

        if let Some((ens_p, f_p)) = saved.as_ref() {
            if k as i64 == k_p + k_thres {
                if f_p - f <= cfg.f_thres {
                    records.push(TraceRecord {
                        iter: k,
                        f_value: f,
                        grad_norm,
                        event: Event::EvalFailHalt,
                        elapsed_ms: elapsed(),
                    });
                    return Ok((
                        ens_p.clone(),
                        RunTrace {
                            records,
                            status: Status::HaltedAtStationary,
                        },
                    ));
                }
                event = Event::EvalPass;
                saved = None;
            }
        }

        if cfg.mode == Mode::Static {
            if cfg.static_halt_factor > 0.0 && check_norm <= cfg.eps * cfg.static_halt_factor {
                records.push(TraceRecord {
                    iter: k,
                    f_value: f,
                    grad_norm,
                    event,
                    elapsed_ms: elapsed(),
                });
                return Ok((
                    ens,
                    RunTrace {
                        records,
                        status: Status::HaltedAtStationary,
                    },
                ));
            }
        } else if check_norm <= cfg.eps && k as i64 - k_p > k_thres {
            let xi = perturbation(obj, &ens, cfg, events).map_err(|e| at(k, e))?;
            events += 1;
            let perturbed = ens.pushforward(&xi, cfg.eta_p).map_err(|e| at(k, e))?;
            saved = Some((std::mem::replace(&mut ens, perturbed), f));
            k_p = k as i64;
            event = Event::Perturb;
            step_grad = step_obj.gradient(&ens).map_err(|e| at(k, e))?;
        }

        records.push(TraceRecord {
            iter: k,
            f_value: f,
            grad_norm,
            event,
            elapsed_ms: elapsed(),
        });
        ens = ens.pushforward(&step_grad, -cfg.eta).map_err(|e| at(k, e))?;
    }
    Ok((
        ens,
        RunTrace {
            records,
            status: Status::MaxIters,
        },
    ))
}

/// Resolved hyperparameters with the intermediate quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub config: PWGFConfig,
    /// Perturbation norm bound `M`.
    pub m: f64,
    /// Per-perturbation failure probability `ζ'`.
    pub zeta_prime: f64,
    /// Unrounded window length before taking the ceiling.
    pub k_thres_raw: f64,
    pub fixed_point_iterations: usize,
}

pub fn default_hyperparameters(consts: &ConstantsConfig, eps: f64, delta: f64, eta: f64) -> Result<PWGFConfig> {
    Ok(derive_hyperparameters(consts, eps, delta, eta, None)?.config)
}

/// Hyperparameters from the problem constants. `lambda0` is the (negative)
/// curvature assumed at the saddle, defaulting to `−δ`.
pub fn derive_hyperparameters(
    consts: &ConstantsConfig,
    eps: f64,
    delta: f64,
    eta: f64,
    lambda0: Option<f64>,
) -> Result<Hyperparameters> {
    consts.validate()?;
    positive("eps", eps)?;
    positive("delta", delta)?;
    positive("eta", eta)?;
    let l23 = consts.l2 + consts.l3;
    if l23 * eps > delta * delta {
        return Err(Error::Config(format!(
            "requires (L2 + L3) * eps <= delta^2, got {} > {}",
            l23 * eps,
            delta * delta
        )));
    }
    if eta > 1.0 / consts.l1 {
        return Err(Error::Config(format!(
            "requires eta <= 1 / L1, got {eta} > {}",
            1.0 / consts.l1
        )));
    }
    let lam0 = lambda0.unwrap_or(-delta).abs();
    positive("|lambda0|", lam0)?;

    let e = std::f64::consts::E;
    let r1 = consts.r1;
    let log_growth = (eta * delta).ln_1p();
    let resolve = |zp: f64| {
        let m = (e * r1 * r1 / (e - 1.0) * (1.0 + 2.0 * (2.0 / zp).ln()))
            .sqrt()
            .max(2.0 * r1 * (4.0 * 2f64.sqrt() / zp).ln().sqrt());
        let r = (2.0 * std::f64::consts::PI).sqrt() * lam0 * zp / 8.0;
        let arg = 16.0 * 2f64.sqrt() * consts.l1.sqrt() * eta.sqrt() * m / (e.sqrt() * r * log_growth.sqrt());
        let k_raw = 2.0 / log_growth * arg.ln();
        let k = k_raw.ceil().max(1.0);
        let f_thres = (eta * k).powi(-3) / (18.0 * l23 * l23) * 1.5f64.ln().powi(2);
        (m, k_raw, k, f_thres)
    };

    let mut zp = consts.zeta;
    let mut out = resolve(zp);
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let next = consts.zeta / (consts.delta_f / out.3).ceil().max(1.0);
        let change = (next - zp).abs() / zp;
        zp = next;
        out = resolve(zp);
        if change <= 1e-6 {
            break;
        }
    }
    let (m, k_raw, k, f_thres) = out;
    if !(f_thres > 0.0 && f_thres.is_finite() && k.is_finite()) {
        return Err(Error::Config(format!(
            "hyperparameters are not representable (F_thres = {f_thres}, k_thres = {k})"
        )));
    }
    let eta_p = 2.0 * f_thres / (m * (eps + (eps * eps + 2.0 * consts.l1 * f_thres).sqrt()));
    Ok(Hyperparameters {
        config: PWGFConfig {
            eta,
            eta_p,
            eps,
            delta,
            k_thres: k as usize,
            f_thres,
            ..PWGFConfig::default()
        },
        m,
        zeta_prime: zp,
        k_thres_raw: k_raw,
        fixed_point_iterations: iterations,
    })
}

/// Checks `F(μ⁰) − F(μᵏ) ≥ (η/2) Σ_{l<k} ‖∇_μF(μˡ)‖²` on every prefix.
pub fn descent_audit(trace: &RunTrace, eta: f64) -> bool {
    let Some(first) = trace.records.first() else {
        return true;
    };
    let slack = 1e-10 * (1.0 + first.f_value.abs());
    let mut acc = 0.0;
    for r in &trace.records {
        if first.f_value - r.f_value < 0.5 * eta * acc - slack {
            return false;
        }
        acc += r.grad_norm * r.grad_norm;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{LinearPotential, MeanQuartic};

    fn symmetric_zero_mean(n_half: usize, d: usize, seed: u64) -> ParticleEnsemble {
        use rand::Rng;
        let mut r = rng::substream(seed, rng::STREAM_INIT);
        let mut rows = Vec::new();
        for _ in 0..n_half {
            let row: Vec<f64> = (0..d)
                .map(|_| (r.random::<f64>() - 0.5).mul_add(1024.0, 0.0).round() / 1024.0)
                .collect();
            rows.push(row.clone());
            rows.push(row.iter().map(|v| -v).collect());
        }
        ParticleEnsemble::from_rows(&rows).unwrap()
    }

    fn unit_mean(d: usize) -> ParticleEnsemble {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        a[0] = 1.5;
        b[0] = 0.5;
        a[1] = 0.25;
        b[1] = -0.25;
        ParticleEnsemble::from_rows(&[a, b]).unwrap()
    }

    #[test]
    fn step_examples() {
        let q = MeanQuartic::new(2);
        let s = ParticleEnsemble::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let out = wgd_step(&q, &s, 0.1).unwrap();
        assert!((out.particle(0)[0] - 1.4).abs() < 1e-15 && out.particle(0)[1] == 0.0);
        let sym = symmetric_zero_mean(2, 2, 0);
        assert_eq!(wgd_step(&q, &sym, 0.1).unwrap(), sym);
        let lin = LinearPotential::isotropic(2);
        let p = ParticleEnsemble::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let out = wgd_step(&lin, &p, 0.1).unwrap();
        assert!((out.particle(0)[0] - 0.9).abs() < 1e-15 && (out.particle(0)[1] - 0.9).abs() < 1e-15);
        assert!(wgd_step(&lin, &p, 0.0).is_err());
    }

    #[test]
    fn minimum_halts_at_pre_perturbation_ensemble() {
        let q = MeanQuartic::new(2);
        let ens = unit_mean(2);
        let cfg = PWGFConfig {
            max_iters: 1000,
            ..PWGFConfig::default()
        };
        let (out, trace) = run(&q, &ens, &cfg).unwrap();
        assert_eq!(trace.status, Status::HaltedAtStationary);
        assert_eq!(out, ens);
        assert_eq!(trace.records[0].event, Event::Perturb);
        let last = trace.records.last().unwrap();
        assert_eq!(last.event, Event::EvalFailHalt);
        assert_eq!(last.iter, cfg.k_thres);
    }

    #[test]
    fn static_saddle_is_a_fixed_point() {
        let q = MeanQuartic::new(3);
        let ens = symmetric_zero_mean(4, 3, 1);
        let cfg = PWGFConfig {
            mode: Mode::Static,
            max_iters: 300,
            ..PWGFConfig::default()
        };
        let (out, trace) = run(&q, &ens, &cfg).unwrap();
        assert_eq!(trace.status, Status::MaxIters);
        assert_eq!(trace.records.len(), 300);
        assert!(trace.records.iter().all(|r| r.f_value == 0.0 && r.event == Event::None));
        assert_eq!(out, ens);
    }

    #[test]
    fn hessian_mode_escapes_saddle() {
        let q = MeanQuartic::new(2);
        let ens = symmetric_zero_mean(4, 2, 2);
        let (out, trace) = run(&q, &ens, &PWGFConfig::default()).unwrap();
        assert_eq!(trace.status, Status::HaltedAtStationary);
        let m = out.mean();
        assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 1.0).abs() < 1e-3);
        let min_f = trace.records.iter().map(|r| r.f_value).fold(f64::INFINITY, f64::min);
        assert!(min_f < -0.24);
        check_window_accounting(&trace, 200);
    }

    fn check_window_accounting(trace: &RunTrace, k_thres: usize) {
        let perturbs: Vec<usize> = trace
            .records
            .iter()
            .filter(|r| r.event == Event::Perturb)
            .map(|r| r.iter)
            .collect();
        let evals: Vec<usize> = trace
            .records
            .iter()
            .filter(|r| matches!(r.event, Event::EvalPass | Event::EvalFailHalt))
            .map(|r| r.iter)
            .collect();
        assert!(evals.len() == perturbs.len() || evals.len() + 1 == perturbs.len());
        for (p, e) in perturbs.iter().zip(&evals) {
            assert_eq!(e - p, k_thres);
        }
        for w in perturbs.windows(2) {
            assert!(w[1] - w[0] > k_thres);
        }
    }

    #[test]
    fn perturbation_count_is_bounded() {
        let q = MeanQuartic::new(2);
        for seed in 0..5 {
            let ens = symmetric_zero_mean(3, 2, seed);
            let cfg = PWGFConfig {
                seed,
                k_thres: 50,
                max_iters: 5000,
                ..PWGFConfig::default()
            };
            let (_, trace) = run(&q, &ens, &cfg).unwrap();
            assert_eq!(trace.status, Status::HaltedAtStationary);
            let f0 = trace.records[0].f_value;
            let fmin = trace.records.iter().map(|r| r.f_value).fold(f64::INFINITY, f64::min);
            let bound = ((f0 - fmin + cfg.f_thres) / cfg.f_thres).ceil() as usize + 1;
            assert!(trace.perturbations() <= bound);
            check_window_accounting(&trace, 50);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let q = MeanQuartic::new(2);
        let ens = symmetric_zero_mean(3, 2, 4);
        for mode in [Mode::Hessian, Mode::Isotropic] {
            let cfg = PWGFConfig {
                mode,
                seed: 9,
                ..PWGFConfig::default()
            };
            let (a, ta) = run(&q, &ens, &cfg).unwrap();
            let (b, tb) = run(&q, &ens, &cfg).unwrap();
            assert_eq!(a, b);
            let strip = |t: &RunTrace| {
                t.records
                    .iter()
                    .map(|r| (r.iter, r.f_value, r.grad_norm, r.event))
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&ta), strip(&tb));
        }
    }

    #[test]
    fn static_descent_audit() {
        let q = MeanQuartic::new(2);
        let ens = ParticleEnsemble::from_rows(&[vec![0.75, 0.5], vec![0.25, -0.5]]).unwrap();
        let cfg = PWGFConfig {
            mode: Mode::Static,
            eta: 0.01,
            max_iters: 2000,
            ..PWGFConfig::default()
        };
        let (_, mut trace) = run(&q, &ens, &cfg).unwrap();
        assert!(descent_audit(&trace, 0.01));
        trace.records[500].f_value += 1.0;
        assert!(!descent_audit(&trace, 0.01));

        let flat = RunTrace {
            records: (0..5)
                .map(|i| TraceRecord {
                    iter: i,
                    f_value: 0.0,
                    grad_norm: 0.0,
                    event: Event::None,
                    elapsed_ms: 0.0,
                })
                .collect(),
            status: Status::MaxIters,
        };
        assert!(descent_audit(&flat, 0.1));
    }

    #[test]
    fn static_halt_factor() {
        let q = MeanQuartic::new(2);
        let ens = ParticleEnsemble::from_rows(&[vec![0.5, 0.0]]).unwrap();
        let cfg = PWGFConfig {
            mode: Mode::Static,
            max_iters: 10_000,
            static_halt_factor: 1e3,
            eps: 1e-6,
            ..PWGFConfig::default()
        };
        let (_, trace) = run(&q, &ens, &cfg).unwrap();
        assert_eq!(trace.status, Status::HaltedAtStationary);
        assert!(trace.records.last().unwrap().grad_norm <= 1e-3);
    }

    #[test]
    fn config_validation() {
        let bad = PWGFConfig {
            k_thres: 0,
            ..PWGFConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PWGFConfig {
            eta_p: -1.0,
            ..PWGFConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("hess".parse::<Mode>().is_err());
        assert_eq!("isotropic".parse::<Mode>().unwrap(), Mode::Isotropic);
    }

    fn consts() -> ConstantsConfig {
        ConstantsConfig {
            l1: 2.0,
            l2: 1.0,
            l3: 1.0,
            r1: 1.0,
            r2: 1.0,
            zeta: 0.1,
            delta_f: 1.0,
        }
    }

    #[test]
    fn hyperparameter_identity_and_preconditions() {
        let h = derive_hyperparameters(&consts(), 1e-3, 0.2, 0.1, None).unwrap();
        let c = &h.config;
        let rhs = c.eta_p * h.m * c.eps + 0.5 * consts().l1 * c.eta_p * c.eta_p * h.m * h.m;
        assert!((c.f_thres - rhs).abs() <= 1e-10 * c.f_thres);
        assert!(c.k_thres >= 1 && h.zeta_prime <= 0.1);
        let err = default_hyperparameters(&consts(), 1.0, 0.2, 0.1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("(L2 + L3) * eps <= delta^2"), "{err}");
        let err = default_hyperparameters(&consts(), 1e-3, 0.2, 1.0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("eta <= 1 / L1"), "{err}");
    }

    #[test]
    fn halving_delta_never_increases_f_thres() {
        for &eps in &[1e-4, 1e-3] {
            let mut prev = f64::INFINITY;
            for &delta in &[0.8, 0.4, 0.2, 0.1] {
                let f = default_hyperparameters(&consts(), eps, delta, 0.1).unwrap().f_thres;
                assert!(f <= prev);
                prev = f;
            }
        }
    }
}
