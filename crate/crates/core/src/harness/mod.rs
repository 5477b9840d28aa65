//! Experiment driver behind the `pwgf` command line.

pub mod config;
pub mod verify;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::hessian_op::{self, HessianOperator};
use crate::objective::{CoulombMmd, Dataset, Icfl, MatrixDecomposition, MeanQuartic, NeuralDims, Objective};
use crate::pwgf::{self, ConstantsConfig, Mode, PWGFConfig, RunTrace};
use crate::rng;

pub use config::KvConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MeanQuartic,
    Matdecomp,
    Icfl,
    CoulombMmd,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::MeanQuartic => "mean_quartic",
            Preset::Matdecomp => "matdecomp",
            Preset::Icfl => "icfl",
            Preset::CoulombMmd => "coulomb_mmd",
        }
    }

    fn is_neural(&self) -> bool {
        matches!(self, Preset::Matdecomp | Preset::Icfl)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_quartic" => Ok(Preset::MeanQuartic),
            "matdecomp" => Ok(Preset::Matdecomp),
            "icfl" => Ok(Preset::Icfl),
            "coulomb_mmd" => Ok(Preset::CoulombMmd),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (expected mean_quartic, matdecomp, icfl or coulomb_mmd)"
            ))),
        }
    }
}

/// Everything needed to rebuild the objective deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub preset: Preset,
    /// Particle dimension for `mean_quartic` / `coulomb_mmd`.
    pub d: usize,
    pub k: usize,
    pub l: usize,
    /// Data set size.
    pub samples: usize,
    pub target_n: usize,
    pub data_seed: u64,
    pub lambda_reg: Option<f64>,
    pub eps_reg: f64,
}

impl ObjectiveSpec {
    fn from_kv(c: &KvConfig, preset: Preset) -> Result<Self> {
        // the ICFL desk-scale default shrinks the published 400 neurons / 800 samples
        let (k, l, samples, target_n) = match preset {
            Preset::Icfl => (5, 20, 400, 20),
            _ => (5, 15, 400, 10),
        };
        let d_default = if preset == Preset::CoulombMmd { 3 } else { 2 };
        let lambda_reg = match c.raw("objective.lambda_reg") {
            None | Some("auto") => None,
            Some(_) => Some(c.require::<f64>("objective.lambda_reg")?),
        };
        let spec = Self {
            preset,
            d: c.get_or("objective.d", d_default)?,
            k: c.get_or("objective.k", k)?,
            l: c.get_or("objective.l", l)?,
            samples: c.get_or("objective.samples", samples)?,
            target_n: c.get_or(
                "objective.target_n",
                if preset == Preset::CoulombMmd { 16 } else { target_n },
            )?,
            data_seed: c.get_or("objective.data_seed", 0)?,
            lambda_reg,
            eps_reg: c.get_or("objective.eps_reg", 0.1)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        if self.preset.is_neural() {
            positive("objective.k", self.k)?;
            positive("objective.l", self.l)?;
            positive("objective.samples", self.samples)?;
        } else {
            positive("objective.d", self.d)?;
        }
        positive("objective.target_n", self.target_n)?;
        if self.preset == Preset::CoulombMmd && self.d < 3 {
            return Err(Error::Config("coulomb_mmd needs objective.d >= 3".into()));
        }
        if !(self.eps_reg > 0.0) {
            return Err(Error::Config("objective.eps_reg must be positive".into()));
        }
        if let Some(l) = self.lambda_reg {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config("objective.lambda_reg must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        if self.preset.is_neural() {
            self.k + self.l
        } else {
            self.d
        }
    }

    fn dims(&self) -> Result<NeuralDims> {
        NeuralDims::new(self.k, self.l)
    }

    pub fn build(&self) -> Result<Box<dyn Objective>> {
        Ok(match self.preset {
            Preset::MeanQuartic => Box::new(MeanQuartic::new(self.d)),
            Preset::Matdecomp => {
                let dims = self.dims()?;
                let data = Dataset::standard_normal(self.samples, self.l, self.data_seed)?;
                Box::new(MatrixDecomposition::new(
                    dims,
                    dims.default_target(self.target_n, self.data_seed)?,
                    data,
                )?)
            }
            Preset::Icfl => {
                let dims = self.dims()?;
                let data = Dataset::standard_normal(self.samples, self.l, self.data_seed)?;
                let target = dims.default_target(self.target_n, self.data_seed)?;
                Box::new(Icfl::new(dims, target, data, self.lambda_reg)?)
            }
            Preset::CoulombMmd => {
                let mut r = rng::substream(self.data_seed, rng::STREAM_TARGET);
                let target = gaussian_ensemble(self.target_n, self.d, 1.0, &mut r)?;
                Box::new(CoulombMmd::new(target, self.eps_reg)?)
            }
        })
    }

    fn echo(&self, out: &mut BTreeMap<String, String>) {
        out.insert("experiment.preset".into(), self.preset.as_str().into());
        if self.preset.is_neural() {
            out.insert("objective.k".into(), self.k.to_string());
            out.insert("objective.l".into(), self.l.to_string());
            out.insert("objective.samples".into(), self.samples.to_string());
        } else {
            out.insert("objective.d".into(), self.d.to_string());
        }
        if self.preset != Preset::MeanQuartic {
            out.insert("objective.target_n".into(), self.target_n.to_string());
            out.insert("objective.data_seed".into(), self.data_seed.to_string());
        }
        if self.preset == Preset::Icfl {
            out.insert(
                "objective.lambda_reg".into(),
                self.lambda_reg.map_or("auto".into(), |v| v.to_string()),
            );
        }
        if self.preset == Preset::CoulombMmd {
            out.insert("objective.eps_reg".into(), self.eps_reg.to_string());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    /// Gaussian entries; for the network presets `scale` applies to `a` and
    /// `w_scale` to `w`.
    Random {
        scale: f64,
        w_scale: f64,
    },
    /// Exact critical point: zero-mean symmetric pairs (`mean_quartic`) or
    /// all output weights zero (network presets).
    Saddle {
        scale: f64,
        w_scale: f64,
    },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    pub n: usize,
    pub init: InitSpec,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Template shared by all cells; mode and seed are set per cell.
    pub pwgf: PWGFConfig,
    pub outdir: PathBuf,
}

fn parse_optional_auto(c: &KvConfig, key: &str) -> Result<Option<f64>> {
    match c.raw(key) {
        None | Some("auto") => Ok(None),
        Some(_) => Ok(Some(c.require::<f64>(key)?)),
    }
}

/// Reads `constants.*` keys (the prefix is optional in a standalone file).
pub fn constants_from_kv(c: &KvConfig) -> Result<ConstantsConfig> {
    let get = |name: &str| -> Result<f64> {
        let prefixed = format!("constants.{name}");
        match c.get::<f64>(&prefixed)? {
            Some(v) => Ok(v),
            None => c
                .get::<f64>(name)?
                .ok_or_else(|| Error::Config(format!("missing required key '{prefixed}'"))),
        }
    };
    let consts = ConstantsConfig {
        l1: get("L1")?,
        l2: get("L2")?,
        l3: get("L3")?,
        r1: get("R1")?,
        r2: get("R2")?,
        zeta: get("zeta")?,
        delta_f: get("delta_F")?,
    };
    consts.validate()?;
    Ok(consts)
}

impl ExperimentConfig {
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        let preset: Preset = c.require::<String>("experiment.preset")?.parse()?;
        let objective = ObjectiveSpec::from_kv(c, preset)?;

        let default_scale = if preset.is_neural() { 0.1 } else { 1.0 };
        let scale = c.get_or("experiment.init_scale", default_scale)?;
        let w_scale = c.get_or("experiment.init_w_scale", 0.1)?;
        let init = match c.get_or("experiment.init", "random".to_string())?.as_str() {
            "random" => InitSpec::Random { scale, w_scale },
            "saddle" => InitSpec::Saddle { scale, w_scale },
            other => match other.strip_prefix("file:") {
                Some(p) if !p.is_empty() => InitSpec::File(PathBuf::from(p)),
                _ => {
                    return Err(Error::Config(format!(
                        "experiment.init: expected random, saddle or file:<path>, got '{other}'"
                    )))
                }
            },
        };
        if !(scale >= 0.0 && w_scale >= 0.0 && scale.is_finite() && w_scale.is_finite()) {
            return Err(Error::Config("init scales must be finite and >= 0".into()));
        }
        if matches!(init, InitSpec::Saddle { .. }) && preset == Preset::CoulombMmd {
            return Err(Error::Config("coulomb_mmd has no saddle initialization".into()));
        }
        // an init file fixes N unless the config says otherwise
        let file_ens = match &init {
            InitSpec::File(p) => {
                Some(ParticleEnsemble::load(p).map_err(|e| Error::Config(format!("init file {}: {e}", p.display())))?)
            }
            _ => None,
        };
        let n_default = match &file_ens {
            Some(e) => e.n(),
            None if preset.is_neural() => 100,
            None => 16,
        };
        let n: usize = c.get_or("experiment.n", n_default)?;
        if n == 0 {
            return Err(Error::Config("experiment.n must be positive".into()));
        }
        if matches!(init, InitSpec::Saddle { .. }) && preset == Preset::MeanQuartic && !n.is_multiple_of(2) {
            return Err(Error::Config(
                "mean_quartic saddle init needs an even experiment.n".into(),
            ));
        }

        let modes = c
            .list("experiment.modes")?
            .unwrap_or_else(|| vec!["static".into(), "isotropic".into(), "hessian".into()])
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<Mode>>>()?;
        let seeds = c
            .list("experiment.seeds")?
            .unwrap_or_else(|| vec!["0".into()])
            .iter()
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|e| Error::Config(format!("experiment.seeds: '{s}': {e}")))
            })
            .collect::<Result<Vec<u64>>>()?;
        if modes.is_empty() || seeds.is_empty() {
            return Err(Error::Config("need at least one mode and one seed".into()));
        }
        let outdir = PathBuf::from(c.get_or("experiment.outdir", "pwgf_out".to_string())?);

        let base = PWGFConfig::default();
        let mut cfg = PWGFConfig {
            eta: c.get_or("pwgf.eta", base.eta)?,
            eta_p: c.get_or("pwgf.eta_p", base.eta_p)?,
            eps: c.get_or("pwgf.eps", base.eps)?,
            delta: c.get_or("pwgf.delta", base.delta)?,
            k_thres: c.get_or("pwgf.k_thres", base.k_thres)?,
            f_thres: c.get_or("pwgf.f_thres", base.f_thres)?,
            max_iters: c.get_or("pwgf.max_iters", base.max_iters)?,
            minibatch: c.get_or("pwgf.minibatch", base.minibatch)?,
            iso_scale: parse_optional_auto(c, "pwgf.iso_scale")?,
            static_halt_factor: c.get_or("pwgf.static_halt_factor", base.static_halt_factor)?,
            hessian_max_dim: c.get_or("pwgf.hessian_max_dim", base.hessian_max_dim)?,
            ..base
        };
        match c.get_or("pwgf.hyper", "manual".to_string())?.as_str() {
            "manual" => {}
            "auto" => {
                let consts = constants_from_kv(c)?;
                let h = pwgf::derive_hyperparameters(&consts, cfg.eps, cfg.delta, cfg.eta, None)?;
                // explicit keys win over the derived values
                if c.raw("pwgf.eta_p").is_none() {
                    cfg.eta_p = h.config.eta_p;
                }
                if c.raw("pwgf.k_thres").is_none() {
                    cfg.k_thres = h.config.k_thres;
                }
                if c.raw("pwgf.f_thres").is_none() {
                    cfg.f_thres = h.config.f_thres;
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "pwgf.hyper must be manual or auto, got '{other}'"
                )))
            }
        }
        cfg.validate()?;
        c.reject_unknown()?;

        let out = Self {
            objective,
            n,
            init,
            modes,
            seeds,
            pwgf: cfg,
            outdir,
        };
        if let Some(ens) = &file_ens {
            out.check_ensemble(ens).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    fn check_ensemble(&self, ens: &ParticleEnsemble) -> Result<()> {
        if ens.d() != self.objective.dim() || ens.n() != self.n {
            return Err(Error::InvalidArgument(format!(
                "ensemble is {}x{}, configuration expects {}x{}",
                ens.n(),
                ens.d(),
                self.n,
                self.objective.dim()
            )));
        }
        Ok(())
    }

    pub fn initial_ensemble(&self, seed: u64) -> Result<ParticleEnsemble> {
        let mut r = rng::substream(seed, rng::STREAM_INIT);
        let spec = &self.objective;
        match &self.init {
            InitSpec::File(p) => {
                let ens = ParticleEnsemble::load(p)?;
                self.check_ensemble(&ens)?;
                Ok(ens)
            }
            InitSpec::Random { scale, w_scale } => {
                if spec.preset.is_neural() {
                    spec.dims()?.random_ensemble(self.n, *scale, *w_scale, &mut r)
                } else {
                    gaussian_ensemble(self.n, spec.d, *scale, &mut r)
                }
            }
            InitSpec::Saddle { scale, w_scale } => {
                if spec.preset.is_neural() {
                    spec.dims()?.random_ensemble(self.n, 0.0, *w_scale, &mut r)
                } else {
                    symmetric_saddle(self.n, spec.d, *scale, &mut r)
                }
            }
        }
    }

    /// Resolved configuration as sorted key/value pairs; reloading it
    /// reproduces every cell.
    pub fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        self.objective.echo(&mut m);
        m.insert("experiment.n".into(), self.n.to_string());
        match &self.init {
            InitSpec::Random { scale, w_scale } | InitSpec::Saddle { scale, w_scale } => {
                let kind = if matches!(self.init, InitSpec::Random { .. }) {
                    "random"
                } else {
                    "saddle"
                };
                m.insert("experiment.init".into(), kind.into());
                m.insert("experiment.init_scale".into(), scale.to_string());
                if self.objective.preset.is_neural() {
                    m.insert("experiment.init_w_scale".into(), w_scale.to_string());
                }
            }
            InitSpec::File(p) => {
                m.insert("experiment.init".into(), format!("file:{}", p.display()));
            }
        }
        let modes: Vec<&str> = self.modes.iter().map(Mode::as_str).collect();
        m.insert("experiment.modes".into(), modes.join(","));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        m.insert("experiment.seeds".into(), seeds.join(","));
        m.insert("experiment.outdir".into(), self.outdir.display().to_string());
        let c = &self.pwgf;
        m.insert("pwgf.hyper".into(), "manual".into());
        m.insert("pwgf.eta".into(), c.eta.to_string());
        m.insert("pwgf.eta_p".into(), c.eta_p.to_string());
        m.insert("pwgf.eps".into(), c.eps.to_string());
        m.insert("pwgf.delta".into(), c.delta.to_string());
        m.insert("pwgf.k_thres".into(), c.k_thres.to_string());
        m.insert("pwgf.f_thres".into(), c.f_thres.to_string());
        m.insert("pwgf.max_iters".into(), c.max_iters.to_string());
        m.insert("pwgf.minibatch".into(), c.minibatch.to_string());
        m.insert(
            "pwgf.iso_scale".into(),
            c.iso_scale.map_or("auto".into(), |v| v.to_string()),
        );
        m.insert("pwgf.static_halt_factor".into(), c.static_halt_factor.to_string());
        m.insert("pwgf.hessian_max_dim".into(), c.hessian_max_dim.to_string());
        m
    }

    pub fn cell_name(&self, mode: Mode, seed: u64) -> String {
        format!("{}_{}_seed{}", self.objective.preset.as_str(), mode, seed)
    }
}

fn gaussian_ensemble(n: usize, d: usize, scale: f64, r: &mut rng::Rng) -> Result<ParticleEnsemble> {
    let pos = (0..n * d).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    ParticleEnsemble::new(n, d, pos)
}

/// `±` pairs of Gaussian points rounded to a dyadic grid, so the mean is exactly 0.
pub fn symmetric_saddle(n: usize, d: usize, scale: f64, r: &mut rng::Rng) -> Result<ParticleEnsemble> {
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("symmetric init needs even N, got {n}")));
    }
    let grid = (1u64 << 20) as f64;
    let mut pos = Vec::with_capacity(n * d);
    for _ in 0..n / 2 {
        let row: Vec<f64> = (0..d)
            .map(|_| (scale * r.sample::<f64, _>(StandardNormal) * grid).round() / grid)
            .collect();
        pos.extend(row.iter().copied());
        pos.extend(row.iter().map(|v| -v));
    }
    ParticleEnsemble::new(n, d, pos)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rayon pool sized by `PWGF_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PWGF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("PWGF_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config("PWGF_THREADS must be >= 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub mode: Mode,
    pub seed: u64,
    pub trace: RunTrace,
    pub ensemble: ParticleEnsemble,
}

impl CellResult {
    pub fn summary(&self) -> String {
        let first = self.trace.records.first().map_or(f64::NAN, |r| r.f_value);
        let last = self.trace.records.last().map_or(f64::NAN, |r| r.f_value);
        format!(
            "{:<9} seed={:<3} status={:<18} iters={:<6} perturbations={:<3} f0={:.6e} f_last={:.6e}",
            self.mode,
            self.seed,
            self.trace.status.to_string(),
            self.trace.records.len(),
            self.trace.perturbations(),
            first,
            last
        )
    }
}

/// Runs a single `(mode, seed)` cell in memory.
pub fn run_cell(cfg: &ExperimentConfig, obj: &dyn Objective, mode: Mode, seed: u64) -> Result<CellResult> {
    let ens0 = cfg.initial_ensemble(seed)?;
    let pc = PWGFConfig {
        mode,
        seed,
        ..cfg.pwgf.clone()
    };
    let (ensemble, trace) = pwgf::run(obj, &ens0, &pc)?;
    Ok(CellResult {
        mode,
        seed,
        trace,
        ensemble,
    })
}

/// Runs every cell, writing traces, final ensembles and the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    let pool = thread_pool()?;
    let obj = cfg.objective.build()?;
    if cfg.modes.contains(&Mode::Hessian) && !obj.supports_hessian() {
        return Err(Error::Config(format!(
            "preset {} has no Hessian; hessian mode is unavailable",
            cfg.objective.preset.as_str()
        )));
    }
    if cfg.modes.contains(&Mode::Isotropic) && cfg.pwgf.iso_scale.is_none() && !obj.supports_hessian() {
        return Err(Error::Config(format!(
            "preset {} has no Hessian; set pwgf.iso_scale for isotropic mode",
            cfg.objective.preset.as_str()
        )));
    }
    let ens_dir = cfg.outdir.join("ensembles");
    fs::create_dir_all(&ens_dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", cfg.outdir.display())))?;
    write_atomic(
        &cfg.outdir
            .join(format!("{}_manifest.txt", cfg.objective.preset.as_str())),
        config::render(&cfg.manifest()).as_bytes(),
    )?;

    let cells: Vec<(Mode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let obj = obj.as_ref();
    let results: Vec<Result<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(mode, seed)| {
                let name = cfg.cell_name(mode, seed);
                let res = run_cell(cfg, obj, mode, seed).and_then(|cell| {
                    let mut buf = Vec::new();
                    cell.trace.write_csv(&mut buf)?;
                    write_atomic(&cfg.outdir.join(format!("{name}.csv")), &buf)?;
                    let mut buf = Vec::new();
                    cell.ensemble.write_csv(&mut buf)?;
                    write_atomic(&ens_dir.join(format!("{name}.csv")), &buf)?;
                    Ok(cell)
                });
                res.map_err(|e| e.context(format!("cell mode={mode} seed={seed}")))
            })
            .collect()
    });
    results.into_iter().collect()
}

fn round_sig(x: f64) -> f64 {
    let r: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    r + 0.0
}

/// One-line `(ε, δ)` classification of an ensemble file.
pub fn classify_point(
    cfg: &ExperimentConfig,
    ensemble: &Path,
    eps: f64,
    delta: f64,
    dump_spectrum: Option<&Path>,
) -> Result<String> {
    let obj = cfg.objective.build()?;
    let ens = ParticleEnsemble::load(ensemble)?;
    obj.check_dim(&ens)?;
    if !obj.supports_hessian() {
        return Err(obj.unsupported("hessian_block"));
    }
    let report = hessian_op::classify(obj.as_ref(), &ens, eps, delta)?;
    if let Some(path) = dump_spectrum {
        let sp = HessianOperator::assemble_with_limit(obj.as_ref(), &ens, cfg.pwgf.hessian_max_dim)?.spectrum()?;
        let mut buf = Vec::new();
        sp.write_csv(&mut buf)?;
        write_atomic(path, &buf)?;
    }
    let mut line = format!("{}, grad_norm={}", report.class, round_sig(report.grad_norm));
    if let Some(l) = report.lambda_min {
        line.push_str(&format!(", lambda_min={}", round_sig(l)));
    }
    Ok(line)
}

/// Resolved hyperparameters from a constants file, as `key = value` lines.
pub fn defaults_report(constants: &Path, eps: f64, delta: f64, eta: f64) -> Result<String> {
    let kv = KvConfig::load(constants)?;
    let consts = constants_from_kv(&kv)?;
    kv.reject_unknown()?;
    let h = pwgf::derive_hyperparameters(&consts, eps, delta, eta, None)?;
    let c = &h.config;
    let mut m = BTreeMap::new();
    m.insert("pwgf.eta".to_string(), c.eta.to_string());
    m.insert("pwgf.eta_p".to_string(), c.eta_p.to_string());
    m.insert("pwgf.eps".to_string(), c.eps.to_string());
    m.insert("pwgf.delta".to_string(), c.delta.to_string());
    m.insert("pwgf.k_thres".to_string(), c.k_thres.to_string());
    m.insert("pwgf.f_thres".to_string(), c.f_thres.to_string());
    m.insert("derived.M".to_string(), h.m.to_string());
    m.insert("derived.zeta_prime".to_string(), h.zeta_prime.to_string());
    m.insert("derived.k_thres_raw".to_string(), h.k_thres_raw.to_string());
    m.insert(
        "derived.fixed_point_iterations".to_string(),
        h.fixed_point_iterations.to_string(),
    );
    Ok(config::render(&m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(s: &str) -> KvConfig {
        KvConfig::parse(s).unwrap()
    }

    #[test]
    fn manifest_round_trips() {
        let c = ExperimentConfig::from_kv(&kv(
            "experiment.preset = matdecomp\nexperiment.seeds = 0..2\nexperiment.modes = static,hessian\npwgf.eta = 0.05\n",
        ))
        .unwrap();
        let again = ExperimentConfig::from_kv(&kv(&config::render(&c.manifest()))).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn auto_hyperparameters_are_resolved_into_the_manifest() {
        let c = ExperimentConfig::from_kv(&kv("experiment.preset = mean_quartic\npwgf.hyper = auto\npwgf.eps = 1e-3\npwgf.delta = 0.2\nconstants.L1 = 2\nconstants.L2 = 1\nconstants.L3 = 1\nconstants.R1 = 1\nconstants.R2 = 1\nconstants.zeta = 0.1\nconstants.delta_F = 1\n"))
        .unwrap();
        let m = c.manifest();
        assert_eq!(m["pwgf.hyper"], "manual");
        let again = ExperimentConfig::from_kv(&kv(&config::render(&m))).unwrap();
        assert_eq!(c.pwgf, again.pwgf);
    }

    #[test]
    fn config_errors() {
        for bad in [
            "experiment.preset = nope\n",
            "experiment.preset = mean_quartic\nexperiment.typo = 1\n",
            "experiment.preset = mean_quartic\nexperiment.modes = fast\n",
            "experiment.preset = mean_quartic\npwgf.eta = -1\n",
            "experiment.preset = coulomb_mmd\nexperiment.init = saddle\n",
            "experiment.preset = mean_quartic\nexperiment.init = file:/nonexistent/x.csv\n",
            "experiment.preset = mean_quartic\nexperiment.n = 3\nexperiment.init = saddle\n",
            "objective.d = 2\n",
        ] {
            let err = ExperimentConfig::from_kv(&kv(bad)).unwrap_err();
            assert!(err.is_config(), "{bad}: {err}");
        }
    }

    #[test]
    fn saddle_inits_are_exact() {
        let c = ExperimentConfig::from_kv(&kv(
            "experiment.preset = mean_quartic\nexperiment.init = saddle\nobjective.d = 4\n",
        ))
        .unwrap();
        let e = c.initial_ensemble(3).unwrap();
        assert!(e.mean().iter().all(|v| *v == 0.0));
        let c = ExperimentConfig::from_kv(&kv(
            "experiment.preset = matdecomp\nexperiment.init = saddle\nexperiment.n = 5\n",
        ))
        .unwrap();
        let e = c.initial_ensemble(3).unwrap();
        assert!(e.particles().all(|x| x[..5].iter().all(|v| *v == 0.0)));
        assert_ne!(e.particle(0)[5], 0.0);
    }

    #[test]
    fn init_file_sets_particle_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init.csv");
        let ens = gaussian_ensemble(6, 3, 1.0, &mut rng::substream(0, rng::STREAM_INIT)).unwrap();
        ens.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        let text = format!(
            "experiment.preset = mean_quartic\nobjective.d = 3\nexperiment.init = file:{}\n",
            path.display()
        );
        let c = ExperimentConfig::from_kv(&kv(&text)).unwrap();
        assert_eq!(c.n, 6);
        assert_eq!(c.initial_ensemble(0).unwrap(), ens);
        assert!(ExperimentConfig::from_kv(&kv(&format!("{text}experiment.n = 5\n"))).is_err());
    }

    #[test]
    fn rounding_for_display() {
        assert_eq!(round_sig(-1.0000000000000002).to_string(), "-1");
        assert_eq!(round_sig(-0.0).to_string(), "0");
        assert_eq!(round_sig(0.123456789).to_string(), "0.123456789");
    }
}
