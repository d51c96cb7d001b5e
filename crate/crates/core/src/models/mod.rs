//! Random-effects regression models with a scalar group intercept.

mod linear_re;
mod probit_re;

pub use linear_re::LinearReModel;
pub use probit_re::{ProbitLatent, ProbitReModel};

use crate::scalar::Real;
use crate::special::{ln_gamma, LN_2PI};

/// Hyperparameters shared by the random-effects models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RePriors {
    /// Prior variance of each fixed effect.
    pub beta_var: f64,
    /// Inverse-gamma shape and scale for the variance parameters.
    pub ig_shape: f64,
    pub ig_scale: f64,
}

impl Default for RePriors {
    fn default() -> Self {
        Self {
            beta_var: 100.0,
            ig_shape: 1.01,
            ig_scale: 1.01,
        }
    }
}

impl RePriors {
    /// `log N(β; 0, v I)` and adds its gradient into `grad`.
    pub(crate) fn beta_term<T: Real>(&self, beta: &[T], grad: &mut [T]) -> T {
        gaussian_prior(beta, self.beta_var, grad)
    }

    /// Log density and gradient of `θ = log σ²` under `σ² ~ IG(a, b)`.
    pub(crate) fn logvar_term<T: Real>(&self, theta: T) -> (T, T) {
        log_ig_logvar(theta, self.ig_shape, self.ig_scale)
    }
}

pub(crate) fn gaussian_prior<T: Real>(x: &[T], var: f64, grad: &mut [T]) -> T {
    let inv = T::lit(1.0 / var);
    let mut ss = T::zero();
    for (g, &v) in grad.iter_mut().zip(x) {
        *g -= v * inv;
        ss += v * v;
    }
    -T::lit(0.5) * (T::lit(x.len() as f64 * (LN_2PI + var.ln())) + ss * inv)
}

pub(crate) fn log_ig_logvar<T: Real>(theta: T, a: f64, b: f64) -> (T, T) {
    let e = (-theta).exp();
    let (ta, tb) = (T::lit(a), T::lit(b));
    let lp = T::lit(a * b.ln() - ln_gamma(a)) - ta * theta - tb * e;
    (lp, -ta + tb * e)
}

/// `log N(x; mean, exp(log_var))`.
#[inline]
pub(crate) fn log_normal_logvar<T: Real>(resid: T, log_var: T, inv_var: T) -> T {
    -T::lit(0.5) * (T::lit(LN_2PI) + log_var + resid * resid * inv_var)
}
