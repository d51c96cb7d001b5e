use rand::Rng;
use rayon::prelude::*;

use super::{check_design, group_outputs, MlpArchitecture, MlpWorkspace, ThetaLayout, GROUP_CHUNK};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GroupedDataset, LatentModel, LoglikTerms};
use crate::models::{gaussian_prior, log_ig_logvar, log_normal_logvar};
use crate::scalar::{dot, first_non_finite, Real};
use crate::special::{group_rng, log_norm_cdf, truncated_normal_sign, LN_2PI};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliPriors {
    pub w_var: f64,
    pub beta_var: f64,
    /// Inverse-gamma shape and scale for each diagonal element of `Ω_α`.
    pub ig_shape: f64,
    pub ig_scale: f64,
}

impl Default for BernoulliPriors {
    fn default() -> Self {
        Self {
            w_var: 50.0,
            beta_var: 5.0,
            ig_shape: 0.1,
            ig_scale: 0.1,
        }
    }
}

/// Probit-augmented latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliLatent<T> {
    /// `K × m_L`.
    pub alpha: Matrix<T>,
    pub ystar: Vec<T>,
}

/// Binary-output DMM with probit link:
/// `y*_i = (β + α_k)ᵀ h⁽ᴸ⁾(x_i) + ε_i`, `ε_i ~ N(0, 1)`, `y_i = 1(y*_i > 0)`,
/// `α_k ~ N(0, diag(exp(ω)))`.
///
/// `θ = (w, β, ω)`; latent `(α, y*)` drawn by warm-started Gibbs sweeps.
#[derive(Clone, Debug)]
pub struct BernoulliDmm<T> {
    arch: MlpArchitecture,
    data: GroupedDataset<T>,
    priors: BernoulliPriors,
    layout: ThetaLayout,
    sweeps: usize,
}

pub(crate) struct BernoulliTheta<'a, T> {
    pub w: &'a [T],
    pub beta: &'a [T],
    pub omega: &'a [T],
}

impl<T: Real> BernoulliDmm<T> {
    pub fn new(arch: MlpArchitecture, data: GroupedDataset<T>) -> Result<Self> {
        Self::with_priors(arch, data, BernoulliPriors::default(), 5)
    }

    pub fn with_priors(
        arch: MlpArchitecture,
        data: GroupedDataset<T>,
        priors: BernoulliPriors,
        sweeps: usize,
    ) -> Result<Self> {
        check_design(&arch, data.x())?;
        if !data.is_binary() {
            return Err(Error::Data("Bernoulli DMM needs 0/1 responses".into()));
        }
        if sweeps == 0 {
            return Err(Error::Config("Gibbs sweeps must be at least 1".into()));
        }
        let ml = arch.output_dim();
        let layout = ThetaLayout {
            n_w: arch.n_weights(),
            n_beta: ml,
            n_extra: ml,
            n_l: 0,
        };
        Ok(Self {
            arch,
            data,
            priors,
            layout,
            sweeps,
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

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub(crate) fn split<'a>(&self, theta: &'a [T]) -> Result<BernoulliTheta<'a, T>> {
        if theta.len() != self.layout.dim() {
            return Err(Error::Dimension {
                what: "theta",
                expected: self.layout.dim(),
                got: theta.len(),
            });
        }
        Ok(BernoulliTheta {
            w: &theta[self.layout.w()],
            beta: &theta[self.layout.beta()],
            omega: &theta[self.layout.extra()],
        })
    }

    fn check_latent(&self, z: &BernoulliLatent<T>) -> Result<()> {
        if z.alpha.rows() != self.data.num_groups() || z.alpha.cols() != self.arch.output_dim() {
            return Err(Error::Dimension {
                what: "alpha rows x cols",
                expected: self.data.num_groups() * self.arch.output_dim(),
                got: z.alpha.rows() * z.alpha.cols(),
            });
        }
        if z.ystar.len() != self.data.n() {
            return Err(Error::Dimension {
                what: "ystar",
                expected: self.data.n(),
                got: z.ystar.len(),
            });
        }
        Ok(())
    }

    /// `(α, y*)` for a zero random effect and `y*` at ±0.8 by response sign.
    pub fn initial_latents_for(&self, data: &GroupedDataset<T>) -> BernoulliLatent<T> {
        let h = T::lit(0.8);
        BernoulliLatent {
            alpha: Matrix::zeros(data.num_groups(), self.arch.output_dim()),
            ystar: data.y().iter().map(|&v| if v > T::lit(0.5) { h } else { -h }).collect(),
        }
    }

    /// `sweeps` Gibbs sweeps over `(α | y*, θ)` then `(y* | α, θ, y)` on
    /// `data`, warm-started from `prev`.
    pub fn gibbs_on<R: Rng + ?Sized>(
        &self,
        theta: &[T],
        data: &GroupedDataset<T>,
        prev: &BernoulliLatent<T>,
        sweeps: usize,
        rng: &mut R,
    ) -> Result<BernoulliLatent<T>> {
        let th = self.split(theta)?;
        check_design(&self.arch, data.x())?;
        if prev.alpha.rows() != data.num_groups() || prev.ystar.len() != data.n() {
            return Err(Error::Dimension {
                what: "warm-start latents",
                expected: data.n(),
                got: prev.ystar.len(),
            });
        }
        let ml = self.arch.output_dim();
        let prior_prec: Vec<T> = th.omega.iter().map(|&o| (-o).exp()).collect();
        let base: u64 = rng.random();
        let k_total = data.num_groups();
        let starts: Vec<usize> = (0..k_total).step_by(GROUP_CHUNK).collect();
        let parts: Vec<Result<Vec<(Vec<T>, Vec<T>)>>> = starts
            .par_iter()
            .map(|&s| {
                let mut ws = MlpWorkspace::new(&self.arch);
                (s..(s + GROUP_CHUNK).min(k_total))
                    .map(|k| {
                        let mut r = group_rng(base, k);
                        let range = data.group_range(k);
                        let h = group_outputs(&self.arch, th.w, data.x(), range.clone(), &mut ws);
                        let hb: Vec<T> = (0..h.rows()).map(|j| dot(h.row(j), th.beta)).collect();
                        let mut prec = h.tr_matmul(&h);
                        for (j, &p) in prior_prec.iter().enumerate() {
                            prec[(j, j)] += p;
                        }
                        let chol = prec.cholesky("Bernoulli alpha precision")?;
                        let mut ys = prev.ystar[range.clone()].to_vec();
                        let mut a = prev.alpha.row(k).to_vec();
                        for _ in 0..sweeps {
                            let resid: Vec<T> = ys.iter().zip(&hb).map(|(&y, &m)| y - m).collect();
                            let mean = chol.solve(&h.tr_matvec(&resid));
                            let mut z: Vec<T> = (0..ml).map(|_| T::std_normal(&mut r)).collect();
                            chol.solve_upper_in_place(&mut z);
                            for ((aj, &mj), &zj) in a.iter_mut().zip(&mean).zip(&z) {
                                *aj = mj + zj;
                            }
                            for (j, i) in range.clone().enumerate() {
                                let eta = hb[j] + dot(h.row(j), &a);
                                ys[j] = truncated_normal_sign(eta, data.y()[i] > T::lit(0.5), &mut r);
                            }
                        }
                        Ok((a, ys))
                    })
                    .collect()
            })
            .collect();
        let mut alpha = Matrix::zeros(k_total, ml);
        let mut ystar = Vec::with_capacity(data.n());
        let mut k = 0;
        for p in parts {
            for (a, ys) in p? {
                alpha.row_mut(k).copy_from_slice(&a);
                ystar.extend(ys);
                k += 1;
            }
        }
        Ok(BernoulliLatent { alpha, ystar })
    }

    /// Success probability `Φ((β + α)ᵀ h⁽ᴸ⁾(x))` for one input row.
    pub fn prob(&self, theta: &[T], alpha_k: &[T], x: &[T]) -> Result<T> {
        let th = self.split(theta)?;
        let h = super::mlp_forward(&self.arch, th.w, x)?;
        let eta: T = h.iter().zip(th.beta).zip(alpha_k).map(|((&h, &b), &a)| h * (b + a)).sum();
        Ok(T::lit(crate::special::norm_cdf(eta.as_f64())))
    }

    fn priors_and_grad(&self, th: &BernoulliTheta<'_, T>, grad: Option<&mut [T]>) -> T {
        let mut scratch = vec![T::zero(); self.layout.dim()];
        let g = grad.unwrap_or(&mut scratch);
        let lp_w = gaussian_prior(th.w, self.priors.w_var, &mut g[self.layout.w()]);
        let lp_b = gaussian_prior(th.beta, self.priors.beta_var, &mut g[self.layout.beta()]);
        let mut lp_o = T::zero();
        for (j, &o) in th.omega.iter().enumerate() {
            let (lp, go) = log_ig_logvar(o, self.priors.ig_shape, self.priors.ig_scale);
            lp_o += lp;
            g[self.layout.extra().start + j] += go;
        }
        lp_w + lp_b + lp_o
    }
}

impl<T: Real> LatentModel<T> for BernoulliDmm<T> {
    type Latent = BernoulliLatent<T>;

    fn dim_theta(&self) -> usize {
        self.layout.dim()
    }

    fn initial_latents(&self) -> BernoulliLatent<T> {
        self.initial_latents_for(&self.data)
    }

    fn sample_latents<R: Rng + ?Sized>(
        &self,
        theta: &[T],
        prev: &BernoulliLatent<T>,
        rng: &mut R,
    ) -> Result<BernoulliLatent<T>> {
        self.gibbs_on(theta, &self.data, prev, self.sweeps, rng)
    }

    /// `log p(y* | α, θ) + log p(α | ω) + log p(θ)`.
    fn log_g_and_grad(&self, theta: &[T], z: &BernoulliLatent<T>) -> Result<(T, Vec<T>)> {
        let th = self.split(theta)?;
        self.check_latent(z)?;
        let ml = self.arch.output_dim();
        let n_w = th.w.len();
        let k_total = self.data.num_groups();
        let half = T::lit(0.5);
        let starts: Vec<usize> = (0..k_total).step_by(GROUP_CHUNK).collect();
        let parts: Vec<(T, Vec<T>, Vec<T>)> = starts
            .par_iter()
            .map(|&s| {
                let mut ws = MlpWorkspace::new(&self.arch);
                let mut ll = T::zero();
                let mut gw = vec![T::zero(); n_w];
                let mut gb = vec![T::zero(); ml];
                let mut coef = vec![T::zero(); ml];
                let mut grad_out = vec![T::zero(); ml];
                for k in s..(s + GROUP_CHUNK).min(k_total) {
                    for ((c, &b), &a) in coef.iter_mut().zip(th.beta).zip(z.alpha.row(k)) {
                        *c = b + a;
                    }
                    for i in self.data.group_range(k) {
                        self.arch.forward_into(th.w, self.data.x().row(i), &mut ws);
                        let r = z.ystar[i] - dot(ws.output(), &coef);
                        ll -= half * (T::lit(LN_2PI) + r * r);
                        for (g, &h) in gb.iter_mut().zip(ws.output()) {
                            *g += r * h;
                        }
                        for (g, &c) in grad_out.iter_mut().zip(&coef) {
                            *g = r * c;
                        }
                        self.arch.backward_into(th.w, &grad_out, &mut ws, &mut gw);
                    }
                }
                (ll, gw, gb)
            })
            .collect();
        let mut grad = vec![T::zero(); self.layout.dim()];
        let mut ll = T::zero();
        for (l, w, b) in parts {
            ll += l;
            grad[self.layout.w()].iter_mut().zip(w).for_each(|(a, b)| *a += b);
            grad[self.layout.beta()].iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
        // α_kj ~ N(0, exp(ω_j)).
        let extra = self.layout.extra().start;
        for (j, &o) in th.omega.iter().enumerate() {
            let inv = (-o).exp();
            let mut a2 = T::zero();
            for k in 0..k_total {
                let a = z.alpha[(k, j)];
                ll += log_normal_logvar(a, o, inv);
                a2 += a * a;
            }
            grad[extra + j] += -half * T::lit(k_total as f64) + half * a2 * inv;
        }
        let lp = self.priors_and_grad(&th, Some(&mut grad));
        if let Some(index) = first_non_finite(&grad) {
            return Err(Error::NonFinite {
                what: "Bernoulli DMM gradient",
                index,
            });
        }
        Ok((ll + lp, grad))
    }

    /// `log p(y | α, θ) = Σ log Φ(±η_i)` with the observed responses.
    fn loglik_terms(&self, theta: &[T], z: &BernoulliLatent<T>) -> Result<LoglikTerms<T>> {
        let th = self.split(theta)?;
        self.check_latent(z)?;
        let k_total = self.data.num_groups();
        let starts: Vec<usize> = (0..k_total).step_by(GROUP_CHUNK).collect();
        let parts: Vec<f64> = starts
            .par_iter()
            .map(|&s| {
                let mut ws = MlpWorkspace::new(&self.arch);
                let mut ll = 0.0;
                for k in s..(s + GROUP_CHUNK).min(k_total) {
                    let coef: Vec<T> = th.beta.iter().zip(z.alpha.row(k)).map(|(&b, &a)| b + a).collect();
                    for i in self.data.group_range(k) {
                        self.arch.forward_into(th.w, self.data.x().row(i), &mut ws);
                        let eta = dot(ws.output(), &coef).as_f64();
                        ll += log_norm_cdf(if self.data.y()[i] > T::lit(0.5) { eta } else { -eta });
                    }
                }
                ll
            })
            .collect();
        let log_prior = self.priors_and_grad(&th, None);
        Ok(LoglikTerms {
            log_lik: T::lit(parts.iter().sum()),
            log_prior,
        })
    }
}
