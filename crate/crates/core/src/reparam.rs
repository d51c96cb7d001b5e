//! One-draw reparameterization gradient of the hybrid ELBO.

use rand::Rng;

use crate::error::{Error, Result};
use crate::factor_gaussian::{is_masked, ReparamNoise, VariationalParams};
use crate::linalg::Matrix;
use crate::model::LatentModel;
use crate::scalar::{dot, first_non_finite, Real};
use crate::special::{group_rng, LN_2PI};

/// Unbiased single-draw estimate of `∇_λ L` with the draw that produced it.
#[derive(Clone, Debug)]
pub struct GradientEstimate<T, Z> {
    pub g_mu: Vec<T>,
    /// `m × p`, masked entries zero.
    pub g_b: Matrix<T>,
    pub g_d: Vec<T>,
    pub noisy_elbo: T,
    pub theta: Vec<T>,
    pub latents: Z,
}

impl<T: Real, Z> GradientEstimate<T, Z> {
    /// `(g_mu, vec(g_B), g_d)` in the packed layout of `λ`.
    pub fn packed(&self) -> Vec<T> {
        let (m, p) = (self.g_b.rows(), self.g_b.cols());
        let mut out = Vec::with_capacity(2 * m + m * p);
        out.extend_from_slice(&self.g_mu);
        for j in 0..p {
            out.extend(self.g_b.column(j));
        }
        out.extend_from_slice(&self.g_d);
        out
    }
}

/// Draws `ε⁰`, sets `θ = μ + Bε₁ + d∘ε₂`, draws `z ~ p(z | θ, y)`, and
/// assembles the gradient from `g = ∇_θ log g(θ, z)`:
///
/// ```text
/// ∇_μ = g + Σ⁻¹(Bε₁ + d∘ε₂)
/// ∇_B = ∇_μ ε₁ᵀ
/// ∇_d = ∇_μ ∘ ε₂
/// ```
pub fn estimate_gradient<T, M, R>(
    params: &VariationalParams<T>,
    model: &M,
    prev_latents: &M::Latent,
    rng: &mut R,
) -> Result<GradientEstimate<T, M::Latent>>
where
    T: Real,
    M: LatentModel<T>,
    R: Rng + ?Sized,
{
    let (m, p) = (params.m(), params.p());
    if model.dim_theta() != m {
        return Err(Error::Dimension {
            what: "model dim(theta)",
            expected: m,
            got: model.dim_theta(),
        });
    }
    // Exactly two words are taken from `rng` per call, so runs that differ
    // only in `p` share their random numbers step by step.
    let noise_seed: u64 = rng.random();
    let latent_seed: u64 = rng.random();
    let noise = ReparamNoise::draw_split(m, p, noise_seed);
    let theta = params.sample_theta(&noise)?;
    let latents = model.sample_latents(&theta, prev_latents, &mut group_rng(latent_seed, 0))?;
    let (_, g) = model.log_g_and_grad(&theta, &latents)?;
    if g.len() != m {
        return Err(Error::Dimension {
            what: "model gradient",
            expected: m,
            got: g.len(),
        });
    }
    if let Some(index) = first_non_finite(&g) {
        return Err(Error::NonFinite {
            what: "model gradient",
            index,
        });
    }

    let mut resid = params.b().matvec(&noise.eps1);
    for ((r, &d), &e) in resid.iter_mut().zip(params.d()).zip(&noise.eps2) {
        *r += d * e;
    }
    let woodbury = params.woodbury()?;
    let s = woodbury.apply(&resid);
    let g_mu: Vec<T> = g.iter().zip(&s).map(|(&a, &b)| a + b).collect();
    let g_b = Matrix::from_fn(m, p, |i, j| {
        if is_masked(i, j) {
            T::zero()
        } else {
            g_mu[i] * noise.eps1[j]
        }
    });
    let g_d = g_mu.iter().zip(&noise.eps2).map(|(&a, &e)| a * e).collect();

    let log_q0 = -T::lit(0.5) * (T::lit(m as f64 * LN_2PI) + woodbury.log_det_sigma() + dot(&resid, &s));
    let terms = model.loglik_terms(&theta, &latents)?;
    let noisy_elbo = terms.log_lik + terms.log_prior - log_q0;
    if !noisy_elbo.is_finite() {
        return Err(Error::NonFinite {
            what: "noisy ELBO",
            index: 0,
        });
    }
    Ok(GradientEstimate {
        g_mu,
        g_b,
        g_d,
        noisy_elbo,
        theta,
        latents,
    })
}

/// `log p(y | z, θ) + log p(θ) − log q⁰(θ)`.
pub fn noisy_elbo<T: Real, M: LatentModel<T>>(
    params: &VariationalParams<T>,
    model: &M,
    theta: &[T],
    latents: &M::Latent,
) -> Result<T> {
    let terms = model.loglik_terms(theta, latents)?;
    let value = terms.log_lik + terms.log_prior - params.log_q0(theta)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "noisy ELBO",
            index: 0,
        });
    }
    Ok(value)
}
