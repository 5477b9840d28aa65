//! Shared machinery for the two-layer mean-field network objectives.
//!
//! A particle is `x = (a, w) ∈ R^k × R^l` and contributes the feature map
//! `h_x(z) = a σ(wᵀz)`; the ensemble feature is `h_μ(z) = (1/N) Σ_j h_{x_j}(z)`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{sigmoid, sigmoid_derivs, Dataset};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::rng;

/// Output dimension `k` and input dimension `l`; particles live in `R^{k+l}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuralDims {
    pub k: usize,
    pub l: usize,
}

impl NeuralDims {
    pub fn new(k: usize, l: usize) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::InvalidArgument(format!(
                "network dims must be positive (k={k}, l={l})"
            )));
        }
        Ok(Self { k, l })
    }

    pub fn d(&self) -> usize {
        self.k + self.l
    }

    pub(crate) fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(self.k)
    }

    /// Particles with `a ~ N(0, a_scale²)` and `w ~ N(0, w_scale²)` entrywise.
    pub fn random_ensemble(&self, n: usize, a_scale: f64, w_scale: f64, r: &mut rng::Rng) -> Result<ParticleEnsemble> {
        let mut pos = Vec::with_capacity(n * self.d());
        for _ in 0..n {
            for _ in 0..self.k {
                pos.push(a_scale * r.sample::<f64, _>(StandardNormal));
            }
            for _ in 0..self.l {
                pos.push(w_scale * r.sample::<f64, _>(StandardNormal));
            }
        }
        ParticleEnsemble::new(n, self.d(), pos)
    }

    /// Default teacher: `n` neurons with `a ~ N(0, 1)`, `w ~ N(0, 1/l)`.
    pub fn default_target(&self, n: usize, data_seed: u64) -> Result<ParticleEnsemble> {
        let mut r = rng::substream(data_seed, rng::STREAM_TARGET);
        self.random_ensemble(n, 1.0, 1.0 / (self.l as f64).sqrt(), &mut r)
    }
}

/// `h_μ(z) = (1/N) Σ_j a_j σ(w_jᵀz)`.
pub fn h_mu_features(dims: NeuralDims, ens: &ParticleEnsemble, z: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; dims.k];
    for x in ens.particles() {
        let (a, w) = dims.split(x);
        let s = sigmoid(dot(w, z));
        for (hr, ar) in h.iter_mut().zip(a) {
            *hr += ar * s;
        }
    }
    let inv = 1.0 / ens.n() as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    h
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-particle activations on the data set, `N × M` row-major.
pub(crate) struct Activations {
    pub m: usize,
    pub s: Vec<f64>,
    pub ds: Vec<f64>,
    pub dds: Vec<f64>,
}

impl Activations {
    pub fn compute(dims: NeuralDims, ens: &ParticleEnsemble, data: &Dataset) -> Self {
        let m = data.len();
        let n = ens.n();
        let mut s = Vec::with_capacity(n * m);
        let mut ds = Vec::with_capacity(n * m);
        let mut dds = Vec::with_capacity(n * m);
        for x in ens.particles() {
            let (_, w) = dims.split(x);
            for t in 0..m {
                let (a, b, c) = sigmoid_derivs(dot(w, data.sample(t)));
                s.push(a);
                ds.push(b);
                dds.push(c);
            }
        }
        Self { m, s, ds, dds }
    }

    /// Activations of one extra neuron with input weights `w`.
    pub fn single(w: &[f64], data: &Dataset) -> Self {
        let m = data.len();
        let mut s = Vec::with_capacity(m);
        let mut ds = Vec::with_capacity(m);
        let mut dds = Vec::with_capacity(m);
        for t in 0..m {
            let (a, b, c) = sigmoid_derivs(dot(w, data.sample(t)));
            s.push(a);
            ds.push(b);
            dds.push(c);
        }
        Self { m, s, ds, dds }
    }

    pub fn s(&self, i: usize) -> &[f64] {
        &self.s[i * self.m..(i + 1) * self.m]
    }

    pub fn ds(&self, i: usize) -> &[f64] {
        &self.ds[i * self.m..(i + 1) * self.m]
    }

    pub fn dds(&self, i: usize) -> &[f64] {
        &self.dds[i * self.m..(i + 1) * self.m]
    }
}

/// `h_μ(z)` for every sample, `M × k` row-major.
pub(crate) fn features(dims: NeuralDims, ens: &ParticleEnsemble, act: &Activations) -> Vec<f64> {
    let (k, m) = (dims.k, act.m);
    let mut h = vec![0.0; m * k];
    for (i, x) in ens.particles().enumerate() {
        let (a, _) = dims.split(x);
        for (t, s) in act.s(i).iter().enumerate() {
            for r in 0..k {
                h[t * k + r] += a[r] * s;
            }
        }
    }
    let inv = 1.0 / ens.n() as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    h
}

pub(crate) fn check_target(dims: NeuralDims, target: &ParticleEnsemble, data: &Dataset) -> Result<()> {
    if target.d() != dims.d() {
        return Err(Error::DimensionMismatch {
            expected: dims.d(),
            got: target.d(),
            context: "target ensemble dimension",
        });
    }
    if data.input_dim() != dims.l {
        return Err(Error::DimensionMismatch {
            expected: dims.l,
            got: data.input_dim(),
            context: "data set input dimension",
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_examples() {
        let dims = NeuralDims::new(2, 3).unwrap();
        let zero_a = ParticleEnsemble::from_rows(&[vec![0.0, 0.0, 1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(h_mu_features(dims, &zero_a, &[1.0, 1.0, 1.0]), vec![0.0, 0.0]);

        let single = ParticleEnsemble::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(h_mu_features(dims, &single, &[0.3, -2.0, 5.0]), vec![0.5, 0.0]);

        let cancel =
            ParticleEnsemble::from_rows(&[vec![1.5, -0.5, 0.2, 0.1, -0.3], vec![-1.5, 0.5, 0.2, 0.1, -0.3]]).unwrap();
        let h = h_mu_features(dims, &cancel, &[1.0, -1.0, 0.5]);
        assert!(h.iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn batched_features_match_pointwise() {
        let dims = NeuralDims::new(2, 3).unwrap();
        let data = Dataset::standard_normal(7, 3, 1).unwrap();
        let mut r = rng::substream(3, 0);
        let ens = dims.random_ensemble(4, 1.0, 1.0, &mut r).unwrap();
        let act = Activations::compute(dims, &ens, &data);
        let h = features(dims, &ens, &act);
        for t in 0..7 {
            let p = h_mu_features(dims, &ens, data.sample(t));
            assert!((p[0] - h[2 * t]).abs() < 1e-15 && (p[1] - h[2 * t + 1]).abs() < 1e-15);
        }
    }
}
