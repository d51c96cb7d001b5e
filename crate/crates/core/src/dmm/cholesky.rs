//! Random-effect precision `Ω⁻¹ = LLᵀ` parameterized by
//! `l = vech*(L)`: the lower triangle of `L` stacked column by column, with
//! log-diagonals.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::special::{ln_gamma, LN_2PI};

pub fn vech_len(m: usize) -> usize {
    m * (m + 1) / 2
}

fn dim_from_len(len: usize) -> Result<usize> {
    let m = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if vech_len(m) != len {
        return Err(Error::Dimension {
            what: "vech* length",
            expected: vech_len(m),
            got: len,
        });
    }
    Ok(m)
}

/// `L` from `l`, exponentiating the diagonal.
pub fn cholesky_from_l<T: Real>(l: &[T]) -> Result<Matrix<T>> {
    let m = dim_from_len(l.len())?;
    let mut out = Matrix::zeros(m, m);
    let mut k = 0;
    for j in 0..m {
        for i in j..m {
            out[(i, j)] = if i == j { l[k].exp() } else { l[k] };
            k += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`cholesky_from_l`]; the diagonal of `lower` must be positive.
pub fn l_from_cholesky<T: Real>(lower: &Matrix<T>) -> Result<Vec<T>> {
    let m = lower.rows();
    let mut out = Vec::with_capacity(vech_len(m));
    for j in 0..m {
        for i in j..m {
            if i == j {
                if !(lower[(i, i)] > T::zero()) {
                    return Err(Error::NotPositiveDefinite {
                        context: "Cholesky factor diagonal",
                    });
                }
                out.push(lower[(i, i)].ln());
            } else {
                out.push(lower[(i, j)]);
            }
        }
    }
    Ok(out)
}

/// Contributions of `l` to `log g`.
#[derive(Clone, Debug)]
pub struct CholeskyLTerms<T> {
    /// `log p(l)`: Wishart density of `LLᵀ` plus the log Jacobian
    /// `m log 2 + Σ_i (m − i + 2) log L_ii`.
    pub log_prior: T,
    /// `Σ_k log N(α_k; 0, (LLᵀ)⁻¹)`.
    pub log_alpha: T,
    /// Gradient of `log_prior + log_alpha` in `l`.
    pub grad: Vec<T>,
}

/// Evaluates the `l` terms for the rows of `alpha` (one per group) under
/// `Ω⁻¹ ~ Wishart(s I, ν)`.
///
/// With `A = Σ_k α_k α_kᵀ` and `G = (K + ν − m − 1) L⁻ᵀ − A L − L / s`, the
/// gradient is `G_ij` below the diagonal and `L_ii G_ii + (m − i + 2)` on it.
pub fn cholesky_l_terms<T: Real>(l: &[T], alpha: &Matrix<T>, nu: f64, s_scale: f64) -> Result<CholeskyLTerms<T>> {
    let lower = cholesky_from_l(l)?;
    let m = lower.rows();
    if alpha.cols() != m {
        return Err(Error::Dimension {
            what: "random effect width",
            expected: m,
            got: alpha.cols(),
        });
    }
    if !(nu > (m as f64) - 1.0) || !(s_scale > 0.0) {
        return Err(Error::Config(format!(
            "Wishart needs nu > m - 1 and a positive scale (nu = {nu}, scale = {s_scale})"
        )));
    }
    let k = alpha.rows();
    let half = T::lit(0.5);
    let mf = m as f64;
    let sum_log_diag: T = (0..m).map(|i| l[diag_index(m, i)]).sum();

    // Σ_k log N(α_k; 0, (LLᵀ)⁻¹) = Σ_k [−m/2 log 2π + Σ log L_ii − ½‖Lᵀα_k‖²].
    let lt_alpha_sq: T = (0..k)
        .map(|r| {
            let a = alpha.row(r);
            (0..m)
                .map(|j| {
                    let v: T = (j..m).map(|i| lower[(i, j)] * a[i]).sum();
                    v * v
                })
                .sum::<T>()
        })
        .sum();
    let log_alpha = T::lit(k as f64) * (T::lit(-0.5 * mf * LN_2PI) + sum_log_diag) - half * lt_alpha_sq;

    // Wishart(s I, ν) at W = LLᵀ, plus the Jacobian of l ↦ W.
    let frob: T = lower.as_slice().iter().map(|&x| x * x).sum();
    let ln_mv_gamma =
        mf * (mf - 1.0) / 4.0 * std::f64::consts::PI.ln() + (1..=m).map(|j| ln_gamma(0.5 * nu + 0.5 * (1.0 - j as f64))).sum::<f64>();
    let wishart = T::lit(nu - mf - 1.0) * sum_log_diag - half * frob / T::lit(s_scale)
        - T::lit(0.5 * nu * mf * std::f64::consts::LN_2 + 0.5 * nu * mf * s_scale.ln() + ln_mv_gamma);
    let jacobian = T::lit(mf * std::f64::consts::LN_2)
        + (0..m).map(|i| T::lit((m - i + 1) as f64) * l[diag_index(m, i)]).sum::<T>();
    let log_prior = wishart + jacobian;

    let a_mat = alpha.tr_matmul(alpha);
    let a_l = a_mat.matmul(&lower);
    let coef = T::lit(k as f64 + nu - mf - 1.0);
    let inv_s = T::lit(1.0 / s_scale);
    let mut grad = Vec::with_capacity(l.len());
    for j in 0..m {
        for i in j..m {
            let mut g = -a_l[(i, j)] - lower[(i, j)] * inv_s;
            if i == j {
                // (L⁻ᵀ)_ii = 1 / L_ii; L⁻ᵀ has no strictly lower entries.
                g += coef / lower[(i, i)];
                grad.push(lower[(i, i)] * g + T::lit((m - i + 1) as f64));
            } else {
                grad.push(g);
            }
        }
    }
    if let Some(index) = crate::scalar::first_non_finite(&grad) {
        return Err(Error::NonFinite {
            what: "Cholesky-l gradient",
            index,
        });
    }
    Ok(CholeskyLTerms {
        log_prior,
        log_alpha,
        grad,
    })
}

/// Position of `log L_ii` in `l`.
fn diag_index(m: usize, i: usize) -> usize {
    // Columns 0..i contribute m, m-1, ..., m-i+1 entries.
    i * m - i * i.saturating_sub(1) / 2
}
