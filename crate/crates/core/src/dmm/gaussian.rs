use rand::Rng;
use rayon::prelude::*;

use super::{check_design, cholesky_from_l, cholesky_l_terms, group_outputs, vech_len, MlpArchitecture, MlpWorkspace, ThetaLayout, GROUP_CHUNK};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::model::{GroupedDataset, LatentModel, LoglikTerms};
use crate::models::{gaussian_prior, log_ig_logvar, log_normal_logvar};
use crate::scalar::{dot, first_non_finite, Real};
use crate::special::group_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPriors {
    pub w_var: f64,
    pub beta_var: f64,
    /// Inverse-gamma shape and scale for `σ_ε²`.
    pub ig_shape: f64,
    pub ig_scale: f64,
    /// `Ω⁻¹ ~ Wishart(s I, ν)`.
    pub wishart_scale: f64,
    /// Defaults to `m_L + 1` when `None`.
    pub wishart_dof: Option<f64>,
}

impl Default for GaussianPriors {
    fn default() -> Self {
        Self {
            w_var: 100.0,
            beta_var: 100.0,
            ig_shape: 1.01,
            ig_scale: 1.01,
            wishart_scale: 0.01,
            wishart_dof: None,
        }
    }
}

/// Gaussian-output DMM: `y_i = (β + α_k)ᵀ h⁽ᴸ⁾(x_i) + ε_i`,
/// `ε_i ~ N(0, σ_ε²)`, `α_k ~ N(0, Ω_α)`.
///
/// `θ = (w, β, log σ_ε², vech*(L))` with `Ω_α⁻¹ = LLᵀ`; latent rows `α_k`.
#[derive(Clone, Debug)]
pub struct GaussianDmm<T> {
    arch: MlpArchitecture,
    data: GroupedDataset<T>,
    priors: GaussianPriors,
    layout: ThetaLayout,
}

/// Pieces of `θ` for the Gaussian head.
pub(crate) struct GaussianTheta<'a, T> {
    pub w: &'a [T],
    pub beta: &'a [T],
    pub theta_eps: T,
    pub l: &'a [T],
}

impl<T: Real> GaussianDmm<T> {
    pub fn new(arch: MlpArchitecture, data: GroupedDataset<T>) -> Result<Self> {
        Self::with_priors(arch, data, GaussianPriors::default())
    }

    pub fn with_priors(arch: MlpArchitecture, data: GroupedDataset<T>, priors: GaussianPriors) -> Result<Self> {
        check_design(&arch, data.x())?;
        let ml = arch.output_dim();
        let layout = ThetaLayout {
            n_w: arch.n_weights(),
            n_beta: ml,
            n_extra: 1,
            n_l: vech_len(ml),
        };
        Ok(Self {
            arch,
            data,
            priors,
            layout,
        })
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn data(&self) -> &GroupedDataset<T> {
        &self.data
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn priors(&self) -> &GaussianPriors {
        &self.priors
    }

    fn nu(&self) -> f64 {
        self.priors.wishart_dof.unwrap_or(self.arch.output_dim() as f64 + 1.0)
    }

    pub(crate) fn split<'a>(&self, theta: &'a [T]) -> Result<GaussianTheta<'a, T>> {
        if theta.len() != self.layout.dim() {
            return Err(Error::Dimension {
                what: "theta",
                expected: self.layout.dim(),
                got: theta.len(),
            });
        }
        Ok(GaussianTheta {
            w: &theta[self.layout.w()],
            beta: &theta[self.layout.beta()],
            theta_eps: theta[self.layout.extra().start],
            l: &theta[self.layout.l()],
        })
    }

    fn check_alpha(&self, alpha: &Matrix<T>) -> Result<()> {
        if alpha.rows() != self.data.num_groups() || alpha.cols() != self.arch.output_dim() {
            return Err(Error::Dimension {
                what: "alpha rows x cols",
                expected: self.data.num_groups() * self.arch.output_dim(),
                got: alpha.rows() * alpha.cols(),
            });
        }
        Ok(())
    }

    /// Conditional posterior of `α_k` for every group in `data`:
    /// mean `Σ_k H_kᵀ(y_k − H_kβ)/σ_ε²` and a factor of the precision
    /// `Σ_k⁻¹ = Ω_α⁻¹ + H_kᵀH_k/σ_ε²`.
    pub fn alpha_conditionals(&self, theta: &[T], data: &GroupedDataset<T>) -> Result<Vec<(Vec<T>, Cholesky<T>)>> {
        let th = self.split(theta)?;
        check_design(&self.arch, data.x())?;
        let lower = cholesky_from_l(th.l)?;
        let omega_inv = lower.matmul(&lower.transpose());
        let inv_e = (-th.theta_eps).exp();
        let k_total = data.num_groups();
        let starts: Vec<usize> = (0..k_total).step_by(GROUP_CHUNK).collect();
        let parts: Vec<Result<Vec<(Vec<T>, Cholesky<T>)>>> = starts
            .par_iter()
            .map(|&s| {
                let mut ws = MlpWorkspace::new(&self.arch);
                (s..(s + GROUP_CHUNK).min(k_total))
                    .map(|k| {
                        let range = data.group_range(k);
                        let h = group_outputs(&self.arch, th.w, data.x(), range.clone(), &mut ws);
                        let resid: Vec<T> =
                            range.clone().enumerate().map(|(r, i)| data.y()[i] - dot(h.row(r), th.beta)).collect();
                        let mut prec = h.tr_matmul(&h);
                        prec.scale(inv_e);
                        prec.add_assign(&omega_inv);
                        let chol = prec.cholesky("alpha conditional precision")?;
                        let rhs: Vec<T> = h.tr_matvec(&resid).into_iter().map(|v| v * inv_e).collect();
                        Ok((chol.solve(&rhs), chol))
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(k_total);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Linear predictor `(β + α)ᵀ h⁽ᴸ⁾(x)` for one input row.
    pub fn eta(&self, theta: &[T], alpha_k: &[T], x: &[T]) -> Result<T> {
        let th = self.split(theta)?;
        let h = super::mlp_forward(&self.arch, th.w, x)?;
        Ok(h.iter().zip(th.beta).zip(alpha_k).map(|((&h, &b), &a)| h * (b + a)).sum())
    }

    /// `σ_ε²` implied by `θ`.
    pub fn noise_var(&self, theta: &[T]) -> Result<T> {
        Ok(self.split(theta)?.theta_eps.exp())
    }

    /// Per-group sums of `(log-lik, Σ r², ∂/∂w, ∂/∂β)`, reduced in group order.
    fn likelihood(&self, th: &GaussianTheta<'_, T>, alpha: &Matrix<T>, want_grad: bool) -> (T, T, Vec<T>, Vec<T>) {
        let inv_e = (-th.theta_eps).exp();
        let k_total = self.data.num_groups();
        let ml = self.arch.output_dim();
        let n_w = if want_grad { th.w.len() } else { 0 };
        let starts: Vec<usize> = (0..k_total).step_by(GROUP_CHUNK).collect();
        let parts: Vec<(T, T, Vec<T>, Vec<T>)> = starts
            .par_iter()
            .map(|&s| {
                let mut ws = MlpWorkspace::new(&self.arch);
                let mut ll = T::zero();
                let mut ss = T::zero();
                let mut gw = vec![T::zero(); n_w];
                let mut gb = vec![T::zero(); if want_grad { ml } else { 0 }];
                let mut coef = vec![T::zero(); ml];
                let mut grad_out = vec![T::zero(); ml];
                for k in s..(s + GROUP_CHUNK).min(k_total) {
                    for ((c, &b), &a) in coef.iter_mut().zip(th.beta).zip(alpha.row(k)) {
                        *c = b + a;
                    }
                    for i in self.data.group_range(k) {
                        self.arch.forward_into(th.w, self.data.x().row(i), &mut ws);
                        let eta = dot(ws.output(), &coef);
                        let r = self.data.y()[i] - eta;
                        ll += log_normal_logvar(r, th.theta_eps, inv_e);
                        ss += r * r;
                        if want_grad {
                            let up = r * inv_e;
                            for (g, &h) in gb.iter_mut().zip(ws.output()) {
                                *g += up * h;
                            }
                            for (g, &c) in grad_out.iter_mut().zip(&coef) {
                                *g = up * c;
                            }
                            self.arch.backward_into(th.w, &grad_out, &mut ws, &mut gw);
                        }
                    }
                }
                (ll, ss, gw, gb)
            })
            .collect();
        let mut ll = T::zero();
        let mut ss = T::zero();
        let mut gw = vec![T::zero(); n_w];
        let mut gb = vec![T::zero(); if want_grad { ml } else { 0 }];
        for (l, s, w, b) in parts {
            ll += l;
            ss += s;
            gw.iter_mut().zip(w).for_each(|(a, b)| *a += b);
            gb.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        (ll, ss, gw, gb)
    }
}

impl<T: Real> LatentModel<T> for GaussianDmm<T> {
    type Latent = Matrix<T>;

    fn dim_theta(&self) -> usize {
        self.layout.dim()
    }

    fn initial_latents(&self) -> Matrix<T> {
        Matrix::zeros(self.data.num_groups(), self.arch.output_dim())
    }

    /// Exact draws from `N(μ_k, Σ_k)` per group; `prev` is ignored.
    fn sample_latents<R: Rng + ?Sized>(&self, theta: &[T], _prev: &Matrix<T>, rng: &mut R) -> Result<Matrix<T>> {
        let cond = self.alpha_conditionals(theta, &self.data)?;
        let base: u64 = rng.random();
        let ml = self.arch.output_dim();
        let rows: Vec<Vec<T>> = cond
            .par_iter()
            .enumerate()
            .with_min_len(GROUP_CHUNK)
            .map(|(k, (mean, chol))| {
                let mut r = group_rng(base, k);
                let mut z: Vec<T> = (0..ml).map(|_| T::std_normal(&mut r)).collect();
                // Lᵀ x = z gives x ~ N(0, (LLᵀ)⁻¹).
                chol.solve_upper_in_place(&mut z);
                mean.iter().zip(z).map(|(&m, e)| m + e).collect()
            })
            .collect();
        let mut out = Matrix::zeros(rows.len(), ml);
        for (k, row) in rows.into_iter().enumerate() {
            out.row_mut(k).copy_from_slice(&row);
        }
        Ok(out)
    }

    fn log_g_and_grad(&self, theta: &[T], alpha: &Matrix<T>) -> Result<(T, Vec<T>)> {
        let th = self.split(theta)?;
        self.check_alpha(alpha)?;
        let (ll, ss, gw, gb) = self.likelihood(&th, alpha, true);
        let mut grad = vec![T::zero(); self.layout.dim()];
        grad[self.layout.w()].copy_from_slice(&gw);
        grad[self.layout.beta()].copy_from_slice(&gb);
        let half = T::lit(0.5);
        let n = T::lit(self.data.n() as f64);
        let (lp_e, g_e) = log_ig_logvar(th.theta_eps, self.priors.ig_shape, self.priors.ig_scale);
        grad[self.layout.extra().start] = -half * n + half * (-th.theta_eps).exp() * ss + g_e;
        let lp_w = gaussian_prior(th.w, self.priors.w_var, &mut grad[self.layout.w()]);
        let lp_b = gaussian_prior(th.beta, self.priors.beta_var, &mut grad[self.layout.beta()]);
        let lt = cholesky_l_terms(th.l, alpha, self.nu(), self.priors.wishart_scale)?;
        grad[self.layout.l()].copy_from_slice(&lt.grad);
        if let Some(index) = first_non_finite(&grad) {
            return Err(Error::NonFinite {
                what: "Gaussian DMM gradient",
                index,
            });
        }
        Ok((ll + lt.log_alpha + lp_w + lp_b + lp_e + lt.log_prior, grad))
    }

    fn loglik_terms(&self, theta: &[T], alpha: &Matrix<T>) -> Result<LoglikTerms<T>> {
        let th = self.split(theta)?;
        self.check_alpha(alpha)?;
        let (ll, _, _, _) = self.likelihood(&th, alpha, false);
        let mut scratch = vec![T::zero(); th.w.len().max(th.beta.len())];
        let lp_w = gaussian_prior(th.w, self.priors.w_var, &mut scratch[..th.w.len()]);
        let lp_b = gaussian_prior(th.beta, self.priors.beta_var, &mut scratch[..th.beta.len()]);
        let (lp_e, _) = log_ig_logvar(th.theta_eps, self.priors.ig_shape, self.priors.ig_scale);
        let lt = cholesky_l_terms(th.l, alpha, self.nu(), self.priors.wishart_scale)?;
        Ok(LoglikTerms {
            log_lik: ll,
            log_prior: lp_w + lp_b + lp_e + lt.log_prior,
        })
    }
}
