use rand::Rng;
use rayon::prelude::*;

use super::{log_normal_logvar, RePriors};
use crate::error::{Error, Result};
use crate::model::{GroupedDataset, LatentModel, LoglikTerms};
use crate::scalar::{dot, Real};
use crate::special::group_rng;

/// Linear regression with a Gaussian random intercept per group:
/// `y_i = x_iᵀβ + α_k + ε_i`, `α_k ~ N(0, σ_α²)`, `ε_i ~ N(0, σ_ε²)`.
///
/// `θ = (β, log σ_α², log σ_ε²)`, latent `z = α`.
#[derive(Clone, Debug)]
pub struct LinearReModel<T> {
    data: GroupedDataset<T>,
    priors: RePriors,
}

impl<T: Real> LinearReModel<T> {
    pub fn new(data: GroupedDataset<T>) -> Self {
        Self::with_priors(data, RePriors::default())
    }

    pub fn with_priors(data: GroupedDataset<T>, priors: RePriors) -> Self {
        Self { data, priors }
    }

    pub fn data(&self) -> &GroupedDataset<T> {
        &self.data
    }

    pub fn priors(&self) -> &RePriors {
        &self.priors
    }

    pub fn n_beta(&self) -> usize {
        self.data.n_inputs()
    }

    fn split<'a>(&self, theta: &'a [T]) -> Result<(&'a [T], T, T)> {
        let nb = self.n_beta();
        if theta.len() != nb + 2 {
            return Err(Error::Dimension {
                what: "theta",
                expected: nb + 2,
                got: theta.len(),
            });
        }
        Ok((&theta[..nb], theta[nb], theta[nb + 1]))
    }

    fn check_alpha(&self, alpha: &[T]) -> Result<()> {
        if alpha.len() != self.data.num_groups() {
            return Err(Error::Dimension {
                what: "alpha",
                expected: self.data.num_groups(),
                got: alpha.len(),
            });
        }
        Ok(())
    }

    /// Conditional posterior `α_k | θ, y_k ~ N(mean_k, var_k)` for every group.
    pub fn alpha_posterior(&self, theta: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let (beta, th_a, th_e) = self.split(theta)?;
        let (inv_a, inv_e) = ((-th_a).exp(), (-th_e).exp());
        let x = self.data.x();
        let y = self.data.y();
        Ok((0..self.data.num_groups())
            .map(|k| {
                let r = self.data.group_range(k);
                let nk = T::lit(r.len() as f64);
                let sum: T = r.map(|i| y[i] - dot(x.row(i), beta)).sum();
                let var = T::one() / (inv_a + nk * inv_e);
                (var * sum * inv_e, var)
            })
            .unzip())
    }

    fn likelihood_parts(&self, beta: &[T], alpha: &[T], th_e: T, grad_beta: Option<&mut [T]>) -> (T, T) {
        let x = self.data.x();
        let y = self.data.y();
        let inv_e = (-th_e).exp();
        let parts: Vec<(T, T, Vec<T>)> = (0..self.data.num_groups())
            .into_par_iter()
            .with_min_len(64)
            .map(|k| {
                let mut ll = T::zero();
                let mut ss = T::zero();
                let mut gb = vec![T::zero(); beta.len()];
                for i in self.data.group_range(k) {
                    let r = y[i] - dot(x.row(i), beta) - alpha[k];
                    ll += log_normal_logvar(r, th_e, inv_e);
                    ss += r * r;
                    for (g, &xi) in gb.iter_mut().zip(x.row(i)) {
                        *g += r * xi;
                    }
                }
                (ll, ss, gb)
            })
            .collect();
        let mut ll = T::zero();
        let mut ss = T::zero();
        let mut gb_total = vec![T::zero(); beta.len()];
        for (l, s, gb) in parts {
            ll += l;
            ss += s;
            for (a, b) in gb_total.iter_mut().zip(gb) {
                *a += b;
            }
        }
        if let Some(out) = grad_beta {
            for (o, g) in out.iter_mut().zip(gb_total) {
                *o += g * inv_e;
            }
        }
        (ll, ss)
    }
}

impl<T: Real> LatentModel<T> for LinearReModel<T> {
    type Latent = Vec<T>;

    fn dim_theta(&self) -> usize {
        self.n_beta() + 2
    }

    fn initial_latents(&self) -> Vec<T> {
        vec![T::zero(); self.data.num_groups()]
    }

    /// Exact independent draws; `prev` is ignored.
    fn sample_latents<R: Rng + ?Sized>(&self, theta: &[T], _prev: &Vec<T>, rng: &mut R) -> Result<Vec<T>> {
        let (mean, var) = self.alpha_posterior(theta)?;
        let base: u64 = rng.random();
        Ok((0..mean.len())
            .into_par_iter()
            .with_min_len(64)
            .map(|k| {
                let mut r = group_rng(base, k);
                mean[k] + var[k].sqrt() * T::std_normal(&mut r)
            })
            .collect())
    }

    fn log_g_and_grad(&self, theta: &[T], alpha: &Vec<T>) -> Result<(T, Vec<T>)> {
        let (beta, th_a, th_e) = self.split(theta)?;
        self.check_alpha(alpha)?;
        let nb = beta.len();
        let mut grad = vec![T::zero(); nb + 2];
        let half = T::lit(0.5);
        let (ll, ss) = self.likelihood_parts(beta, alpha, th_e, Some(&mut grad[..nb]));
        let n = T::lit(self.data.n() as f64);
        grad[nb + 1] = -half * n + half * ss * (-th_e).exp();

        let inv_a = (-th_a).exp();
        let mut lz = T::zero();
        let mut a2 = T::zero();
        for &a in alpha {
            lz += log_normal_logvar(a, th_a, inv_a);
            a2 += a * a;
        }
        let kk = T::lit(alpha.len() as f64);
        grad[nb] = -half * kk + half * a2 * inv_a;

        let mut lp = self.priors.beta_term(beta, &mut grad[..nb]);
        let (pa, ga) = self.priors.logvar_term(th_a);
        let (pe, ge) = self.priors.logvar_term(th_e);
        lp += pa + pe;
        grad[nb] += ga;
        grad[nb + 1] += ge;
        Ok((ll + lz + lp, grad))
    }

    fn loglik_terms(&self, theta: &[T], alpha: &Vec<T>) -> Result<LoglikTerms<T>> {
        let (beta, th_a, th_e) = self.split(theta)?;
        self.check_alpha(alpha)?;
        let (log_lik, _) = self.likelihood_parts(beta, alpha, th_e, None);
        let mut scratch = vec![T::zero(); beta.len()];
        let log_prior =
            self.priors.beta_term(beta, &mut scratch) + self.priors.logvar_term(th_a).0 + self.priors.logvar_term(th_e).0;
        Ok(LoglikTerms { log_lik, log_prior })
    }
}
