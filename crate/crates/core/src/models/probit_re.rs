use rand::Rng;
use rayon::prelude::*;

use super::{log_normal_logvar, RePriors};
use crate::error::{Error, Result};
use crate::model::{GroupedDataset, LatentModel, LoglikTerms};
use crate::scalar::{dot, Real};
use crate::special::{group_rng, log_norm_cdf, truncated_normal_sign, LN_2PI};

/// Augmented latent state of the probit random-effects model.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbitLatent<T> {
    pub alpha: Vec<T>,
    pub ystar: Vec<T>,
}

/// Probit regression with a random intercept:
/// `y*_i = x_iᵀβ + α_k + ε_i`, `ε_i ~ N(0, 1)`, `y_i = 1(y*_i > 0)`.
///
/// `θ = (β, log σ_α²)`, latent `z = (α, y*)` drawn by a warm-started Gibbs
/// sampler alternating `α | y*` and `y* | α, y`.
#[derive(Clone, Debug)]
pub struct ProbitReModel<T> {
    data: GroupedDataset<T>,
    priors: RePriors,
    sweeps: usize,
}

impl<T: Real> ProbitReModel<T> {
    pub fn new(data: GroupedDataset<T>) -> Result<Self> {
        Self::with_priors(data, RePriors::default(), 5)
    }

    pub fn with_priors(data: GroupedDataset<T>, priors: RePriors, sweeps: usize) -> Result<Self> {
        if !data.is_binary() {
            return Err(Error::Data("probit model needs 0/1 responses".into()));
        }
        if sweeps == 0 {
            return Err(Error::Config("Gibbs sweeps must be at least 1".into()));
        }
        Ok(Self { data, priors, sweeps })
    }

    pub fn data(&self) -> &GroupedDataset<T> {
        &self.data
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    fn split<'a>(&self, theta: &'a [T]) -> Result<(&'a [T], T)> {
        let nb = self.data.n_inputs();
        if theta.len() != nb + 1 {
            return Err(Error::Dimension {
                what: "theta",
                expected: nb + 1,
                got: theta.len(),
            });
        }
        Ok((&theta[..nb], theta[nb]))
    }

    fn check_latent(&self, z: &ProbitLatent<T>) -> Result<()> {
        if z.alpha.len() != self.data.num_groups() {
            return Err(Error::Dimension {
                what: "alpha",
                expected: self.data.num_groups(),
                got: z.alpha.len(),
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

    /// Runs `sweeps` Gibbs sweeps from `prev`; each sweep draws `α | y*`
    /// then `y* | α`. Groups are independent given `θ`, so each group runs
    /// its own chain on its own random stream.
    pub fn gibbs<R: Rng + ?Sized>(
        &self,
        theta: &[T],
        prev: &ProbitLatent<T>,
        sweeps: usize,
        rng: &mut R,
    ) -> Result<ProbitLatent<T>> {
        let (beta, th_a) = self.split(theta)?;
        self.check_latent(prev)?;
        let inv_a = (-th_a).exp();
        let x = self.data.x();
        let y = self.data.y();
        let base: u64 = rng.random();
        let per_group: Vec<(T, Vec<T>)> = (0..self.data.num_groups())
            .into_par_iter()
            .with_min_len(16)
            .map(|k| {
                let mut r = group_rng(base, k);
                let range = self.data.group_range(k);
                let xb: Vec<T> = range.clone().map(|i| dot(x.row(i), beta)).collect();
                let mut ys: Vec<T> = prev.ystar[range.clone()].to_vec();
                let mut a = prev.alpha[k];
                let var = T::one() / (inv_a + T::lit(xb.len() as f64));
                let sd = var.sqrt();
                for _ in 0..sweeps {
                    let sum: T = ys.iter().zip(&xb).map(|(&s, &m)| s - m).sum();
                    a = var * sum + sd * T::std_normal(&mut r);
                    for (j, i) in range.clone().enumerate() {
                        ys[j] = truncated_normal_sign(xb[j] + a, y[i] > T::lit(0.5), &mut r);
                    }
                }
                (a, ys)
            })
            .collect();
        let mut alpha = Vec::with_capacity(per_group.len());
        let mut ystar = Vec::with_capacity(self.data.n());
        for (a, ys) in per_group {
            alpha.push(a);
            ystar.extend(ys);
        }
        Ok(ProbitLatent { alpha, ystar })
    }
}

impl<T: Real> LatentModel<T> for ProbitReModel<T> {
    type Latent = ProbitLatent<T>;

    fn dim_theta(&self) -> usize {
        self.data.n_inputs() + 1
    }

    /// `α = 0` and `y*` at ±0.8 with the sign of the response.
    fn initial_latents(&self) -> ProbitLatent<T> {
        let h = T::lit(0.8);
        ProbitLatent {
            alpha: vec![T::zero(); self.data.num_groups()],
            ystar: self.data.y().iter().map(|&v| if v > T::lit(0.5) { h } else { -h }).collect(),
        }
    }

    fn sample_latents<R: Rng + ?Sized>(
        &self,
        theta: &[T],
        prev: &ProbitLatent<T>,
        rng: &mut R,
    ) -> Result<ProbitLatent<T>> {
        self.gibbs(theta, prev, self.sweeps, rng)
    }

    /// `log p(y*, y | α, β) + log p(α | σ_α²) + log p(θ)`.
    fn log_g_and_grad(&self, theta: &[T], z: &ProbitLatent<T>) -> Result<(T, Vec<T>)> {
        let (beta, th_a) = self.split(theta)?;
        self.check_latent(z)?;
        let nb = beta.len();
        let mut grad = vec![T::zero(); nb + 1];
        let x = self.data.x();
        let half = T::lit(0.5);
        let mut ll = T::zero();
        for k in 0..self.data.num_groups() {
            for i in self.data.group_range(k) {
                let r = z.ystar[i] - dot(x.row(i), beta) - z.alpha[k];
                ll -= half * (T::lit(LN_2PI) + r * r);
                for (g, &xi) in grad[..nb].iter_mut().zip(x.row(i)) {
                    *g += r * xi;
                }
            }
        }
        let inv_a = (-th_a).exp();
        let mut a2 = T::zero();
        for &a in &z.alpha {
            ll += log_normal_logvar(a, th_a, inv_a);
            a2 += a * a;
        }
        grad[nb] = -half * T::lit(z.alpha.len() as f64) + half * a2 * inv_a;
        let lp_b = self.priors.beta_term(beta, &mut grad[..nb]);
        let (lp_a, g_a) = self.priors.logvar_term(th_a);
        grad[nb] += g_a;
        Ok((ll + lp_b + lp_a, grad))
    }

    /// `log p(y | α, θ) = Σ log Φ(±η_i)` with the observed responses.
    fn loglik_terms(&self, theta: &[T], z: &ProbitLatent<T>) -> Result<LoglikTerms<T>> {
        let (beta, th_a) = self.split(theta)?;
        self.check_latent(z)?;
        let x = self.data.x();
        let y = self.data.y();
        let mut ll = 0.0;
        for k in 0..self.data.num_groups() {
            for i in self.data.group_range(k) {
                let eta = (dot(x.row(i), beta) + z.alpha[k]).as_f64();
                ll += log_norm_cdf(if y[i] > T::lit(0.5) { eta } else { -eta });
            }
        }
        let mut scratch = vec![T::zero(); beta.len()];
        let log_prior = self.priors.beta_term(beta, &mut scratch) + self.priors.logvar_term(th_a).0;
        Ok(LoglikTerms {
            log_lik: T::lit(ll),
            log_prior,
        })
    }
}
