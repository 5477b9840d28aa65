use nalgebra::DMatrix;
use rayon::prelude::*;

use super::neural::{check_target, dot, features, Activations, NeuralDims};
use super::{check_index, check_point, Dataset, Objective};
use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::Result;

/// Matrix decomposition with a mean-field network:
/// `F(μ) = ½ E_z ‖h_μ(z) h_μ(z)ᵀ − h_{μ°}(z) h_{μ°}(z)ᵀ‖_F²`.
///
/// With `ΔM = M_μ − M_{μ°}` and `g(z) = ΔM(z) h_μ(z)` the first variation is
/// `δF/δμ(a, w) = 2 E_z[σ(wᵀz) aᵀ g(z)]`, and the Hessian kernel is
/// `2 E_z[J_x(z) (M_μ + ‖h_μ‖² I + ΔM) J_y(z)ᵀ]` where
/// `J_x(z) = [σ(wᵀz) I_k ; σ'(wᵀz) z aᵀ]` is the transposed Jacobian of `h_x`.
#[derive(Debug, Clone)]
pub struct MatrixDecomposition {
    dims: NeuralDims,
    data: Dataset,
    target: ParticleEnsemble,
    /// `h_{μ°}(z)`, `M × k`.
    target_h: Vec<f64>,
}

/// Quantities shared by every per-particle evaluation at a fixed ensemble.
struct State {
    act: Activations,
    /// `h_μ(z)`, `M × k`.
    h: Vec<f64>,
    /// `ΔM(z)`, `M × k × k`.
    dm: Vec<f64>,
    /// `ΔM(z) h_μ(z)`, `M × k`.
    g: Vec<f64>,
}

impl MatrixDecomposition {
    pub fn new(dims: NeuralDims, target: ParticleEnsemble, data: Dataset) -> Result<Self> {
        check_target(dims, &target, &data)?;
        let act = Activations::compute(dims, &target, &data);
        let target_h = features(dims, &target, &act);
        Ok(Self {
            dims,
            data,
            target,
            target_h,
        })
    }

    pub fn dims(&self) -> NeuralDims {
        self.dims
    }

    pub fn target(&self) -> &ParticleEnsemble {
        &self.target
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    fn state(&self, ens: &ParticleEnsemble) -> Result<State> {
        self.check_dim(ens)?;
        let k = self.dims.k;
        let act = Activations::compute(self.dims, ens, &self.data);
        let h = features(self.dims, ens, &act);
        let m = self.data.len();
        let mut dm = vec![0.0; m * k * k];
        let mut g = vec![0.0; m * k];
        for t in 0..m {
            let ht = &h[t * k..(t + 1) * k];
            let h0 = &self.target_h[t * k..(t + 1) * k];
            let block = &mut dm[t * k * k..(t + 1) * k * k];
            for r in 0..k {
                for c in 0..k {
                    block[r * k + c] = ht[r] * ht[c] - h0[r] * h0[c];
                }
            }
            for r in 0..k {
                g[t * k + r] = dot(&block[r * k..(r + 1) * k], ht);
            }
        }
        Ok(State { act, h, dm, g })
    }

    fn value_from(&self, st: &State) -> f64 {
        0.5 * st.dm.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// Gradient at a point with activations `s`, `ds` along the data set.
    fn grad_point(&self, st: &State, a: &[f64], s: &[f64], ds: &[f64]) -> Vec<f64> {
        let (k, l, m) = (self.dims.k, self.dims.l, self.data.len());
        let mut out = vec![0.0; k + l];
        for t in 0..m {
            let gt = &st.g[t * k..(t + 1) * k];
            for r in 0..k {
                out[r] += s[t] * gt[r];
            }
            let coef = ds[t] * dot(a, gt);
            for (o, zq) in out[k..].iter_mut().zip(self.data.sample(t)) {
                *o += coef * zq;
            }
        }
        let scale = 2.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    fn grad_grad_point(&self, st: &State, a: &[f64], ds: &[f64], dds: &[f64]) -> DMatrix<f64> {
        let (k, l, m) = (self.dims.k, self.dims.l, self.data.len());
        let mut out = DMatrix::zeros(k + l, k + l);
        for t in 0..m {
            let gt = &st.g[t * k..(t + 1) * k];
            let z = self.data.sample(t);
            for r in 0..k {
                for q in 0..l {
                    out[(r, k + q)] += ds[t] * gt[r] * z[q];
                }
            }
            let coef = dds[t] * dot(a, gt);
            for p in 0..l {
                for q in p..l {
                    out[(k + p, k + q)] += coef * z[p] * z[q];
                }
            }
        }
        for r in 0..k {
            for q in 0..l {
                out[(k + q, r)] = out[(r, k + q)];
            }
        }
        for p in 0..l {
            for q in 0..p {
                out[(k + p, k + q)] = out[(k + q, k + p)];
            }
        }
        out * (2.0 / m as f64)
    }

    /// `B(z) = M_μ + ‖h_μ‖² I + ΔM` and `B(z) a_j` for every particle.
    fn curvature(&self, st: &State, ens: &ParticleEnsemble) -> (Vec<f64>, Vec<f64>) {
        let (k, m, n) = (self.dims.k, self.data.len(), ens.n());
        let mut b = vec![0.0; m * k * k];
        for t in 0..m {
            let ht = &st.h[t * k..(t + 1) * k];
            let hn = dot(ht, ht);
            for r in 0..k {
                for c in 0..k {
                    let mut v = ht[r] * ht[c] + st.dm[t * k * k + r * k + c];
                    if r == c {
                        v += hn;
                    }
                    b[t * k * k + r * k + c] = v;
                }
            }
        }
        let mut ba = vec![0.0; n * m * k];
        for (j, x) in ens.particles().enumerate() {
            let (a, _) = self.dims.split(x);
            for t in 0..m {
                let bt = &b[t * k * k..(t + 1) * k * k];
                for r in 0..k {
                    ba[(j * m + t) * k + r] = dot(&bt[r * k..(r + 1) * k], a);
                }
            }
        }
        (b, ba)
    }

    /// Row `i` of kernel blocks, `d × (N d)`.
    fn hessian_row(&self, st: &State, ens: &ParticleEnsemble, b: &[f64], ba: &[f64], i: usize) -> DMatrix<f64> {
        let (k, l, m, n) = (self.dims.k, self.dims.l, self.data.len(), ens.n());
        let d = k + l;
        let (ai, _) = self.dims.split(ens.particle(i));
        let (si, dsi) = (st.act.s(i), st.act.ds(i));
        let mut row = DMatrix::zeros(d, n * d);
        let mut ww = vec![0.0; l * l];
        for j in 0..n {
            let (sj, dsj) = (st.act.s(j), st.act.ds(j));
            let off = j * d;
            ww.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..m {
                let z = self.data.sample(t);
                let bt = &b[t * k * k..(t + 1) * k * k];
                let baj = &ba[(j * m + t) * k..(j * m + t + 1) * k];
                let bai = &ba[(i * m + t) * k..(i * m + t + 1) * k];
                let ss = si[t] * sj[t];
                for r in 0..k {
                    for c in 0..k {
                        row[(r, off + c)] += ss * bt[r * k + c];
                    }
                }
                let sd = si[t] * dsj[t];
                let ds_s = dsi[t] * sj[t];
                for q in 0..l {
                    for r in 0..k {
                        row[(r, off + k + q)] += sd * baj[r] * z[q];
                        row[(k + q, off + r)] += ds_s * z[q] * bai[r];
                    }
                }
                let coef = dsi[t] * dsj[t] * dot(ai, baj);
                for p in 0..l {
                    let cz = coef * z[p];
                    for q in p..l {
                        ww[p * l + q] += cz * z[q];
                    }
                }
            }
            for p in 0..l {
                for q in p..l {
                    row[(k + p, off + k + q)] = ww[p * l + q];
                    row[(k + q, off + k + p)] = ww[p * l + q];
                }
            }
        }
        row * (2.0 / m as f64)
    }
}

impl Objective for MatrixDecomposition {
    fn name(&self) -> &str {
        "matdecomp"
    }

    fn dim(&self) -> usize {
        self.dims.d()
    }

    fn value(&self, ens: &ParticleEnsemble) -> Result<f64> {
        let st = self.state(ens)?;
        Ok(self.value_from(&st))
    }

    fn gradient(&self, ens: &ParticleEnsemble) -> Result<StackedField> {
        Ok(self.value_and_gradient(ens)?.1)
    }

    fn value_and_gradient(&self, ens: &ParticleEnsemble) -> Result<(f64, StackedField)> {
        let st = self.state(ens)?;
        let values: Vec<f64> = (0..ens.n())
            .into_par_iter()
            .flat_map_iter(|i| {
                let (a, _) = self.dims.split(ens.particle(i));
                self.grad_point(&st, a, st.act.s(i), st.act.ds(i))
            })
            .collect();
        Ok((self.value_from(&st), StackedField::new(ens.n(), ens.d(), values)?))
    }

    fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
        check_point(self.dim(), x)?;
        let st = self.state(ens)?;
        let (a, w) = self.dims.split(x);
        let act = Activations::single(w, &self.data);
        Ok(self.grad_point(&st, a, &act.s, &act.ds))
    }

    fn hessian_block(&self, ens: &ParticleEnsemble, i: usize, j: usize) -> Result<DMatrix<f64>> {
        check_index(ens, i)?;
        check_index(ens, j)?;
        let st = self.state(ens)?;
        let (b, ba) = self.curvature(&st, ens);
        let d = self.dim();
        let row = self.hessian_row(&st, ens, &b, &ba, i);
        Ok(row.columns(j * d, d).into_owned())
    }

    fn hessian_matrix(&self, ens: &ParticleEnsemble) -> Result<DMatrix<f64>> {
        let st = self.state(ens)?;
        let (b, ba) = self.curvature(&st, ens);
        let (n, d) = (ens.n(), self.dim());
        let rows: Vec<DMatrix<f64>> = (0..n)
            .into_par_iter()
            .map(|i| self.hessian_row(&st, ens, &b, &ba, i))
            .collect();
        let mut a = DMatrix::zeros(n * d, n * d);
        for (i, row) in rows.iter().enumerate() {
            a.view_mut((i * d, 0), (d, n * d)).copy_from(row);
        }
        Ok(a)
    }

    fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>> {
        check_index(ens, i)?;
        let st = self.state(ens)?;
        let (a, _) = self.dims.split(ens.particle(i));
        Ok(self.grad_grad_point(&st, a, st.act.ds(i), st.act.dds(i)))
    }

    fn dataset_len(&self) -> Option<usize> {
        Some(self.data.len())
    }

    fn restrict(&self, indices: &[usize]) -> Option<Box<dyn Objective>> {
        let data = self.data.subset(indices).ok()?;
        let k = self.dims.k;
        let target_h = indices
            .iter()
            .flat_map(|&t| self.target_h[t * k..(t + 1) * k].iter().copied())
            .collect();
        Some(Box::new(Self {
            dims: self.dims,
            data,
            target: self.target.clone(),
            target_h,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup(n: usize, seed: u64) -> (MatrixDecomposition, ParticleEnsemble) {
        let dims = NeuralDims::new(3, 5).unwrap();
        let data = Dataset::standard_normal(200, 5, 11).unwrap();
        let target = dims.default_target(4, 11).unwrap();
        let obj = MatrixDecomposition::new(dims, target, data).unwrap();
        let mut r = rng::substream(seed, rng::STREAM_INIT);
        let ens = dims.random_ensemble(n, 1.0, 0.6, &mut r).unwrap();
        (obj, ens)
    }

    #[test]
    fn zero_at_target_and_nonnegative() {
        let (obj, ens) = setup(6, 1);
        assert_eq!(obj.value(obj.target()).unwrap(), 0.0);
        assert!(obj.value(&ens).unwrap() > 0.0);
    }

    #[test]
    fn zero_output_weights_give_zero_gradient() {
        let (obj, ens) = setup(5, 2);
        let zeroed: Vec<Vec<f64>> = ens
            .particles()
            .map(|x| {
                let mut x = x.to_vec();
                x[..3].iter_mut().for_each(|v| *v = 0.0);
                x
            })
            .collect();
        let zeroed = ParticleEnsemble::from_rows(&zeroed).unwrap();
        let g = obj.gradient(&zeroed).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saddle_aa_block_is_minus_twice_weighted_target() {
        let (obj, ens) = setup(4, 3);
        let zeroed: Vec<Vec<f64>> = ens
            .particles()
            .map(|x| {
                let mut x = x.to_vec();
                x[..3].iter_mut().for_each(|v| *v = 0.0);
                x
            })
            .collect();
        let zeroed = ParticleEnsemble::from_rows(&zeroed).unwrap();
        let blk = obj.hessian_block(&zeroed, 0, 2).unwrap();
        // with h_μ = 0: aa-block = −2 E[σ_i σ_j M_{μ°}], every other sub-block vanishes
        let dims = obj.dims();
        let data = obj.dataset();
        let wi = &zeroed.particle(0)[3..];
        let wj = &zeroed.particle(2)[3..];
        let mut expect = DMatrix::<f64>::zeros(3, 3);
        for t in 0..data.len() {
            let z = data.sample(t);
            let h0 = super::super::h_mu_features(dims, obj.target(), z);
            let w = super::super::sigmoid(dot(wi, z)) * super::super::sigmoid(dot(wj, z));
            for r in 0..3 {
                for c in 0..3 {
                    expect[(r, c)] -= 2.0 * w * h0[r] * h0[c];
                }
            }
        }
        expect /= data.len() as f64;
        assert!((blk.view((0, 0), (3, 3)) - &expect).amax() < 1e-12);
        assert!(blk.view((0, 3), (3, 5)).amax() < 1e-15);
        assert!(blk.view((3, 0), (5, 8)).amax() < 1e-15);
    }

    #[test]
    fn kernel_transpose_symmetry() {
        let (obj, ens) = setup(5, 4);
        let a = obj.hessian_matrix(&ens).unwrap();
        assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        let b01 = obj.hessian_block(&ens, 0, 1).unwrap();
        assert!((b01 - a.view((0, 8), (8, 8))).amax() < 1e-14);
    }

    #[test]
    fn batched_gradient_matches_pointwise() {
        let (obj, ens) = setup(4, 5);
        let g = obj.gradient(&ens).unwrap();
        for i in 0..4 {
            let p = obj.gradient_at(&ens, ens.particle(i)).unwrap();
            for (u, v) in p.iter().zip(g.at(i)) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn restriction_matches_subset_dataset() {
        let (obj, ens) = setup(4, 6);
        let idx = [3usize, 10, 50];
        let sub = obj.restrict(&idx).unwrap();
        let direct =
            MatrixDecomposition::new(obj.dims(), obj.target().clone(), obj.dataset().subset(&idx).unwrap()).unwrap();
        assert_eq!(sub.value(&ens).unwrap(), direct.value(&ens).unwrap());
    }
}
