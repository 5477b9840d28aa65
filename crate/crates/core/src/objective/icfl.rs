//! In-context feature learning loss with the attention matrix solved out.
//!
//! With `Σ = E[h_μ h_μᵀ]`, `S = Σ + λI`, `C = E[h_{μ°} h_μᵀ]` and the ridge
//! solution `P = C S⁻¹`, the objective is
//!
//! ```text
//! F(μ) = ½ E‖ζ(z)‖² + (λ/2)‖P‖_F²,    ζ(z) = h_{μ°}(z) − P h_μ(z)
//!      = ½ tr E[h_{μ°} h_{μ°}ᵀ] − ½ tr(C S⁻¹ Cᵀ)
//! ```
//!
//! i.e. the minimum over the attention matrix of the ridge-regularized loss,
//! so the envelope theorem gives `δF/δμ(a, w) = −E[σ(wᵀz) ζᵀ P a]` exactly.
//! For `λ = 0` this is `½ E‖h_{μ°} − Σ_{μ°μ} Σ_{μμ}⁻¹ h_μ‖²`.
//!
//! The second variation is, with `α_x = E[σ_x h_μ]`, `β_x = E[σ_x ζ]`,
//! `c_xy = E[σ_x σ_y]`, `Q = PᵀP`,
//!
//! ```text
//! δ²F(x, y) = (aᵀQb)(c_xy − α_xᵀS⁻¹α_y) + (α_xᵀS⁻¹b)(β_yᵀPa)
//!           − (aᵀS⁻¹b)(β_xᵀβ_y)        + (aᵀS⁻¹α_y)(β_xᵀPb)
//! ```
//!
//! and the kernel block is its mixed `(x, y)` gradient. At a first-order
//! stationary point (`Pᵀβ_x = 0` on the support) the second and fourth terms
//! drop out.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::neural::{check_target, dot, features, Activations, NeuralDims};
use super::{check_index, check_point, Dataset, Objective};
use crate::ensemble::{ParticleEnsemble, StackedField};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Icfl {
    dims: NeuralDims,
    data: Dataset,
    target: ParticleEnsemble,
    target_h: Vec<f64>,
    lambda_reg: f64,
}

struct State {
    act: Activations,
    h: Vec<f64>,
    /// `ζ(z)`, `M × k`.
    zeta: Vec<f64>,
    s_inv: DMatrix<f64>,
    p: DMatrix<f64>,
    q: DMatrix<f64>,
}

/// Per-particle summaries used by the kernel.
struct ParticleTerms {
    a: DVector<f64>,
    alpha: DVector<f64>,
    beta: DVector<f64>,
    /// `∂α/∂w = E[σ' z h_μᵀ]`, `l × k`.
    d_alpha: DMatrix<f64>,
    /// `∂β/∂w = E[σ' z ζᵀ]`, `l × k`.
    d_beta: DMatrix<f64>,
}

/// A scalar function of `(x, y)` with its gradients and mixed derivative.
struct Bilinear {
    val: f64,
    gx: DVector<f64>,
    gy: DVector<f64>,
    mixed: DMatrix<f64>,
}

impl Bilinear {
    /// Mixed derivative `∇_x ∇_yᵀ (f g)`.
    fn product_mixed(&self, g: &Bilinear) -> DMatrix<f64> {
        &g.mixed * self.val + &self.mixed * g.val + &self.gx * g.gy.transpose() + &g.gx * self.gy.transpose()
    }
}

impl Icfl {
    /// `lambda_reg = None` picks `1e-6 · tr(Σ_{μ°μ°}) / k`, frozen at construction.
    pub fn new(dims: NeuralDims, target: ParticleEnsemble, data: Dataset, lambda_reg: Option<f64>) -> Result<Self> {
        check_target(dims, &target, &data)?;
        let act = Activations::compute(dims, &target, &data);
        let target_h = features(dims, &target, &act);
        let lambda_reg = match lambda_reg {
            Some(l) if l >= 0.0 && l.is_finite() => l,
            Some(l) => return Err(Error::InvalidArgument(format!("lambda_reg must be >= 0, got {l}"))),
            None => {
                let tr = target_h.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
                1e-6 * tr / dims.k as f64
            }
        };
        Ok(Self {
            dims,
            data,
            target,
            target_h,
            lambda_reg,
        })
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    pub fn dims(&self) -> NeuralDims {
        self.dims
    }

    pub fn target(&self) -> &ParticleEnsemble {
        &self.target
    }

    fn mean_outer(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let (k, m) = (self.dims.k, self.data.len());
        let mut out = DMatrix::zeros(k, k);
        for t in 0..m {
            for r in 0..k {
                for c in 0..k {
                    out[(r, c)] += x[t * k + r] * y[t * k + c];
                }
            }
        }
        out / m as f64
    }

    fn state(&self, ens: &ParticleEnsemble) -> Result<State> {
        self.check_dim(ens)?;
        let (k, m) = (self.dims.k, self.data.len());
        let act = Activations::compute(self.dims, ens, &self.data);
        let h = features(self.dims, ens, &act);
        let sigma = self.mean_outer(&h, &h);
        let s = &sigma + DMatrix::identity(k, k) * self.lambda_reg;
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::Degenerate(format!(
                "Σ_μμ + λI is not positive definite (λ = {:.3e}); feature covariance is singular",
                self.lambda_reg
            ))
        })?;
        let s_inv = chol.inverse();
        let c = self.mean_outer(&self.target_h, &h);
        let p = &c * &s_inv;
        let mut zeta = vec![0.0; m * k];
        for t in 0..m {
            let ht = DVector::from_column_slice(&h[t * k..(t + 1) * k]);
            let ph = &p * ht;
            for r in 0..k {
                zeta[t * k + r] = self.target_h[t * k + r] - ph[r];
            }
        }
        if zeta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite residual in ICFL solve".into()));
        }
        let q = p.transpose() * &p;
        Ok(State {
            act,
            h,
            zeta,
            s_inv,
            p,
            q,
        })
    }

    fn value_from(&self, st: &State) -> f64 {
        let m = self.data.len() as f64;
        0.5 * st.zeta.iter().map(|v| v * v).sum::<f64>() / m + 0.5 * self.lambda_reg * st.p.norm_squared()
    }

    fn terms(&self, st: &State, x: &[f64], s: &[f64], ds: &[f64]) -> ParticleTerms {
        let (k, l, m) = (self.dims.k, self.dims.l, self.data.len());
        let (a, _) = self.dims.split(x);
        let mut alpha = DVector::zeros(k);
        let mut beta = DVector::zeros(k);
        let mut d_alpha = DMatrix::zeros(l, k);
        let mut d_beta = DMatrix::zeros(l, k);
        for t in 0..m {
            let z = self.data.sample(t);
            let ht = &st.h[t * k..(t + 1) * k];
            let zt = &st.zeta[t * k..(t + 1) * k];
            for r in 0..k {
                alpha[r] += s[t] * ht[r];
                beta[r] += s[t] * zt[r];
            }
            for q in 0..l {
                let c = ds[t] * z[q];
                for r in 0..k {
                    d_alpha[(q, r)] += c * ht[r];
                    d_beta[(q, r)] += c * zt[r];
                }
            }
        }
        let inv = 1.0 / m as f64;
        ParticleTerms {
            a: DVector::from_column_slice(a),
            alpha: alpha * inv,
            beta: beta * inv,
            d_alpha: d_alpha * inv,
            d_beta: d_beta * inv,
        }
    }

    fn grad_from_terms(&self, st: &State, t: &ParticleTerms) -> Vec<f64> {
        let ga = -(st.p.transpose() * &t.beta);
        let gw = -(&t.d_beta * (&st.p * &t.a));
        ga.iter().chain(gw.iter()).copied().collect()
    }

    fn embed(&self, a_part: Option<DVector<f64>>, w_part: Option<DVector<f64>>) -> DVector<f64> {
        let (k, l) = (self.dims.k, self.dims.l);
        let mut v = DVector::zeros(k + l);
        if let Some(a) = a_part {
            v.rows_mut(0, k).copy_from(&a);
        }
        if let Some(w) = w_part {
            v.rows_mut(k, l).copy_from(&w);
        }
        v
    }

    fn place(&self, row_w: bool, col_w: bool, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (k, l) = (self.dims.k, self.dims.l);
        let mut out = DMatrix::zeros(k + l, k + l);
        let r0 = if row_w { k } else { 0 };
        let c0 = if col_w { k } else { 0 };
        out.view_mut((r0, c0), (m.nrows(), m.ncols())).copy_from(m);
        out
    }

    /// Pairwise moments `c_ij`, `E[σ'_i σ_j z]`, `E[σ_i σ'_j z]`, `E[σ'_i σ'_j z zᵀ]`.
    fn pair_moments(&self, st: &State, i: usize, j: usize) -> (f64, DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let (l, m) = (self.dims.l, self.data.len());
        let (si, dsi) = (st.act.s(i), st.act.ds(i));
        let (sj, dsj) = (st.act.s(j), st.act.ds(j));
        let mut c = 0.0;
        let mut cw = DVector::zeros(l);
        let mut cv = DVector::zeros(l);
        let mut cwv = DMatrix::zeros(l, l);
        for t in 0..m {
            let z = self.data.sample(t);
            c += si[t] * sj[t];
            let (u, v, w) = (dsi[t] * sj[t], si[t] * dsj[t], dsi[t] * dsj[t]);
            for p in 0..l {
                cw[p] += u * z[p];
                cv[p] += v * z[p];
                let wz = w * z[p];
                for q in p..l {
                    cwv[(p, q)] += wz * z[q];
                }
            }
        }
        for p in 0..l {
            for q in 0..p {
                cwv[(p, q)] = cwv[(q, p)];
            }
        }
        let inv = 1.0 / m as f64;
        (c * inv, cw * inv, cv * inv, cwv * inv)
    }

    fn kernel_block(&self, st: &State, ti: &ParticleTerms, tj: &ParticleTerms, i: usize, j: usize) -> DMatrix<f64> {
        let (c, cw, cv, cwv) = self.pair_moments(st, i, j);
        let (s_inv, p, q) = (&st.s_inv, &st.p, &st.q);
        let (ai, aj) = (&ti.a, &tj.a);
        let s_alpha_i = s_inv * &ti.alpha;
        let s_alpha_j = s_inv * &tj.alpha;
        let p_beta_i = p.transpose() * &ti.beta;
        let p_beta_j = p.transpose() * &tj.beta;
        let s_ai = s_inv * ai;
        let s_aj = s_inv * aj;

        let f1 = Bilinear {
            val: ai.dot(&(q * aj)),
            gx: self.embed(Some(q * aj), None),
            gy: self.embed(Some(q * ai), None),
            mixed: self.place(false, false, q),
        };
        let g1 = Bilinear {
            val: c - ti.alpha.dot(&s_alpha_j),
            gx: self.embed(None, Some(&cw - &ti.d_alpha * &s_alpha_j)),
            gy: self.embed(None, Some(&cv - &tj.d_alpha * &s_alpha_i)),
            mixed: self.place(true, true, &(&cwv - &ti.d_alpha * s_inv * tj.d_alpha.transpose())),
        };
        let f2 = Bilinear {
            val: s_alpha_i.dot(aj),
            gx: self.embed(None, Some(&ti.d_alpha * &s_aj)),
            gy: self.embed(Some(s_alpha_i.clone()), None),
            mixed: self.place(true, false, &(&ti.d_alpha * s_inv)),
        };
        let g2 = Bilinear {
            val: p_beta_j.dot(ai),
            gx: self.embed(Some(p_beta_j.clone()), None),
            gy: self.embed(None, Some(&tj.d_beta * (p * ai))),
            mixed: self.place(false, true, &(p.transpose() * tj.d_beta.transpose())),
        };
        let f3 = Bilinear {
            val: ai.dot(&s_aj),
            gx: self.embed(Some(s_aj.clone()), None),
            gy: self.embed(Some(s_ai.clone()), None),
            mixed: self.place(false, false, s_inv),
        };
        let g3 = Bilinear {
            val: ti.beta.dot(&tj.beta),
            gx: self.embed(None, Some(&ti.d_beta * &tj.beta)),
            gy: self.embed(None, Some(&tj.d_beta * &ti.beta)),
            mixed: self.place(true, true, &(&ti.d_beta * tj.d_beta.transpose())),
        };
        let f4 = Bilinear {
            val: s_alpha_j.dot(ai),
            gx: self.embed(Some(s_alpha_j.clone()), None),
            gy: self.embed(None, Some(&tj.d_alpha * &s_ai)),
            mixed: self.place(false, true, &(s_inv * tj.d_alpha.transpose())),
        };
        let g4 = Bilinear {
            val: p_beta_i.dot(aj),
            gx: self.embed(None, Some(&ti.d_beta * (p * aj))),
            gy: self.embed(Some(p_beta_i.clone()), None),
            mixed: self.place(true, false, &(&ti.d_beta * p)),
        };

        f1.product_mixed(&g1) + f2.product_mixed(&g2) - f3.product_mixed(&g3) + f4.product_mixed(&g4)
    }

    fn all_terms(&self, st: &State, ens: &ParticleEnsemble) -> Vec<ParticleTerms> {
        (0..ens.n())
            .into_par_iter()
            .map(|i| self.terms(st, ens.particle(i), st.act.s(i), st.act.ds(i)))
            .collect()
    }
}

impl Objective for Icfl {
    fn name(&self) -> &str {
        "icfl"
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
        let terms = self.all_terms(&st, ens);
        let values = terms.iter().flat_map(|t| self.grad_from_terms(&st, t)).collect();
        Ok((self.value_from(&st), StackedField::new(ens.n(), ens.d(), values)?))
    }

    fn gradient_at(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
        check_point(self.dim(), x)?;
        let st = self.state(ens)?;
        let (_, w) = self.dims.split(x);
        let act = Activations::single(w, &self.data);
        let t = self.terms(&st, x, &act.s, &act.ds);
        Ok(self.grad_from_terms(&st, &t))
    }

    fn hessian_block(&self, ens: &ParticleEnsemble, i: usize, j: usize) -> Result<DMatrix<f64>> {
        check_index(ens, i)?;
        check_index(ens, j)?;
        let st = self.state(ens)?;
        let ti = self.terms(&st, ens.particle(i), st.act.s(i), st.act.ds(i));
        let tj = self.terms(&st, ens.particle(j), st.act.s(j), st.act.ds(j));
        Ok(self.kernel_block(&st, &ti, &tj, i, j))
    }

    fn hessian_matrix(&self, ens: &ParticleEnsemble) -> Result<DMatrix<f64>> {
        let st = self.state(ens)?;
        let terms = self.all_terms(&st, ens);
        let (n, d) = (ens.n(), self.dim());
        let rows: Vec<Vec<DMatrix<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| self.kernel_block(&st, &terms[i], &terms[j], i, j))
                    .collect()
            })
            .collect();
        let mut a = DMatrix::zeros(n * d, n * d);
        for (i, row) in rows.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                a.view_mut((i * d, j * d), (d, d)).copy_from(b);
            }
        }
        Ok(a)
    }

    /// Hessian in `x` of `−β_xᵀ P a`.
    fn grad_grad(&self, ens: &ParticleEnsemble, i: usize) -> Result<DMatrix<f64>> {
        check_index(ens, i)?;
        let st = self.state(ens)?;
        let (k, l, m) = (self.dims.k, self.dims.l, self.data.len());
        let t = self.terms(&st, ens.particle(i), st.act.s(i), st.act.ds(i));
        let pa = &st.p * &t.a;
        let aw = -(st.p.transpose() * t.d_beta.transpose());
        let dds = st.act.dds(i);
        let mut ww = DMatrix::zeros(l, l);
        for s in 0..m {
            let z = self.data.sample(s);
            let coef = dds[s] * dot(&st.zeta[s * k..(s + 1) * k], pa.as_slice());
            for p in 0..l {
                for q in 0..l {
                    ww[(p, q)] += coef * z[p] * z[q];
                }
            }
        }
        ww *= -1.0 / m as f64;
        let mut out = DMatrix::zeros(k + l, k + l);
        out.view_mut((0, k), (k, l)).copy_from(&aw);
        out.view_mut((k, 0), (l, k)).copy_from(&aw.transpose());
        out.view_mut((k, k), (l, l)).copy_from(&ww);
        Ok(out)
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
            lambda_reg: self.lambda_reg,
        }))
    }
}
