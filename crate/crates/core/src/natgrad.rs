//! Fisher information of the factor Gaussian family and the damped natural
//! gradient.
//!
//! The FIM in `λ = (μ, vec(B), d)` is block sparse: the `μ` block is `Σ⁻¹`
//! and decouples from the `(B, d)` blocks. With `S = Σ⁻¹` the remaining
//! blocks act as
//!
//! ```text
//! F_BB vec(V) = vec(S V BᵀSB + S B VᵀSB)
//! F_Bd u      = 2 vec(S diag(d∘u) S B)
//! F_dB vec(V) = 2 d ∘ diag(S V BᵀS)
//! F_dd        = 2 (d dᵀ) ∘ S ∘ S
//! ```
//!
//! Kronecker products are never formed; every product is an `m × p` matrix
//! product against the dense `S`, which is rebuilt once per optimization
//! step. The damped `μ` block is inverted analytically by a Woodbury
//! identity and the `(B, d)` system is solved by preconditioned CG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_gaussian::{is_masked, packed_len, ReparamNoise, VariationalParams, Woodbury};
use crate::linalg::{Cholesky, Matrix};
use crate::model::LatentModel;
use crate::scalar::{axpy, dot, norm, Real};

/// Largest `m` for which the dense per-step `Σ⁻¹` is formed.
pub const M_DENSE_MAX: usize = 4096;

/// Instances up to this size verify the analytic `F̃₁₁⁻¹` against a dense
/// solve when the context is built.
const F11_SELF_CHECK_MAX_M: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingSpec {
    /// Relative (Tikhonov) damping `δ` applied to the block diagonals.
    pub delta: f64,
    /// Absolute ridge added to the `B` and `d` diagonals.
    pub abs_floor: f64,
    /// Relative residual target for CG.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for DampingSpec {
    fn default() -> Self {
        Self {
            delta: 1.0,
            abs_floor: 1e-8,
            cg_tol: 1e-4,
            cg_max_iter: 200,
        }
    }
}

impl DampingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.abs_floor >= 0.0) {
            return Err(Error::Config(format!(
                "abs_floor must be >= 0, got {}",
                self.abs_floor
            )));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Config(format!("cg_tol must be > 0, got {}", self.cg_tol)));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::Config("cg_max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// How `F̃₁₁⁻¹ g` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F11Path {
    Analytic,
    /// The analytic path failed its self-check; dense Cholesky is used.
    DenseFallback,
}

/// Per-step precomputation shared by every FIM product.
#[derive(Clone, Debug)]
pub struct FimContext<T> {
    params: VariationalParams<T>,
    woodbury: Woodbury<T>,
    sigma_inv: Matrix<T>,
    /// `S B`, `m × p`.
    s_b: Matrix<T>,
    /// `BᵀSB`, `p × p`.
    bt_s_b: Matrix<T>,
    /// Undamped `F_dd`.
    f_dd: Matrix<T>,
    /// Undamped diagonal of `F_BB`, packed column-major; masked slots zero.
    diag_bb: Vec<T>,
    diag_dd: Vec<T>,
    /// `diag(B C̃ Bᵀ)` with `C̃ = (I + BᵀD⁻²B)⁻¹`.
    q: Vec<T>,
    f11_path: F11Path,
}

#[derive(Clone, Debug)]
pub struct NaturalGradient<T> {
    /// Packed like `λ`.
    pub packed: Vec<T>,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

impl<T: Real> FimContext<T> {
    pub fn build(params: &VariationalParams<T>) -> Result<Self> {
        let m = params.m();
        if m > M_DENSE_MAX {
            return Err(Error::DenseBudget { m, max: M_DENSE_MAX });
        }
        let woodbury = params.woodbury()?;
        let sigma_inv = woodbury.dense_inverse();
        let b = params.b();
        let s_b = sigma_inv.matmul(b);
        let bt_s_b = b.tr_matmul(&s_b);
        let d = params.d();
        let two = T::lit(2.0);
        let f_dd = Matrix::from_fn(m, m, |i, j| {
            let s = sigma_inv[(i, j)];
            two * d[i] * d[j] * s * s
        });
        let p = params.p();
        let mut diag_bb = vec![T::zero(); m * p];
        for j in 0..p {
            for a in 0..m {
                if !is_masked(a, j) {
                    let sb = s_b[(a, j)];
                    diag_bb[j * m + a] = sigma_inv[(a, a)] * bt_s_b[(j, j)] + sb * sb;
                }
            }
        }
        let diag_dd = f_dd.diagonal();

        // q_i = Σ_j (B C̃)_ij B_ij.
        let c_bt = woodbury.inner().solve_matrix(&b.transpose()); // p × m
        let q = (0..m)
            .map(|i| (0..p).map(|j| c_bt[(j, i)] * b[(i, j)]).sum())
            .collect();

        let mut ctx = Self {
            params: params.clone(),
            woodbury,
            sigma_inv,
            s_b,
            bt_s_b,
            f_dd,
            diag_bb,
            diag_dd,
            q,
            f11_path: F11Path::Analytic,
        };
        if m <= F11_SELF_CHECK_MAX_M {
            ctx.f11_path = ctx.f11_self_check();
        }
        Ok(ctx)
    }

    pub fn params(&self) -> &VariationalParams<T> {
        &self.params
    }

    pub fn sigma_inv_dense(&self) -> &Matrix<T> {
        &self.sigma_inv
    }

    pub fn f11_path(&self) -> F11Path {
        self.f11_path
    }

    /// Damped diagonals of the `(B, d)` operator; used as the CG
    /// preconditioner. Masked slots get 1.
    pub fn damped_diagonal(&self, spec: &DampingSpec) -> Vec<T> {
        let scale = T::lit(1.0 + spec.delta);
        let floor = T::lit(spec.abs_floor);
        let (m, p) = (self.params.m(), self.params.p());
        let mut out = Vec::with_capacity(m * p + m);
        for j in 0..p {
            for a in 0..m {
                out.push(if is_masked(a, j) {
                    T::one()
                } else {
                    scale * self.diag_bb[j * m + a] + floor
                });
            }
        }
        out.extend(self.diag_dd.iter().map(|&x| scale * x + floor));
        out
    }

    /// Damped `[F̃_BB F_Bd; F_dB F̃_dd] v`, masked coordinates zeroed.
    pub fn fim_bd_matvec(&self, spec: &DampingSpec, v: &[T]) -> Result<Vec<T>> {
        let (m, p) = (self.params.m(), self.params.p());
        let mp = m * p;
        if v.len() != mp + m {
            return Err(Error::Dimension {
                what: "(B, d) block vector",
                expected: mp + m,
                got: v.len(),
            });
        }
        let mut out = vec![T::zero(); mp + m];
        let d = self.params.d();
        let two = T::lit(2.0);
        let u = &v[mp..];

        if p > 0 {
            // V as an m × p matrix (column-major in v).
            let vmat = Matrix::from_fn(m, p, |i, j| if is_masked(i, j) { T::zero() } else { v[j * m + i] });
            let s_v = self.sigma_inv.matmul(&vmat);
            let vt_s_b = vmat.tr_matmul(&self.s_b); // p × p
            let mut bb = s_v.matmul(&self.bt_s_b);
            bb.add_assign(&self.s_b.matmul(&vt_s_b));

            // F_Bd u = 2 S diag(d∘u) S B.
            let mut scaled = self.s_b.clone();
            for i in 0..m {
                let w = two * d[i] * u[i];
                for x in scaled.row_mut(i) {
                    *x *= w;
                }
            }
            let bd = self.sigma_inv.matmul(&scaled);
            for j in 0..p {
                for i in 0..m {
                    if !is_masked(i, j) {
                        out[j * m + i] = bb[(i, j)] + bd[(i, j)];
                    }
                }
            }
            // F_dB vec(V) = 2 d ∘ rowdot(S V, S B).
            for i in 0..m {
                out[mp + i] = two * d[i] * dot(s_v.row(i), self.s_b.row(i));
            }
        }

        let dd = self.f_dd.matvec(u);
        for i in 0..m {
            out[mp + i] += dd[i];
        }

        // Damping on both diagonal blocks.
        let delta = T::lit(spec.delta);
        let floor = T::lit(spec.abs_floor);
        for j in 0..p {
            for i in 0..m {
                let k = j * m + i;
                if is_masked(i, j) {
                    out[k] = T::zero();
                } else {
                    out[k] += (delta * self.diag_bb[k] + floor) * v[k];
                }
            }
        }
        for i in 0..m {
            out[mp + i] += (delta * self.diag_dd[i] + floor) * u[i];
        }
        Ok(out)
    }

    /// `F̃₁₁⁻¹ g` with `F̃₁₁ = Σ⁻¹ + δ diag(Σ⁻¹)`.
    ///
    /// `F̃₁₁ = A − U C̃ Uᵀ` with diagonal `A = (1+δ)D⁻² − δ D⁻⁴ diag(B C̃ Bᵀ)`
    /// and `U = D⁻²B`, so only diagonals and `m × p` factors are touched.
    pub fn f11_damped_inverse_apply(&self, spec: &DampingSpec, g: &[T]) -> Result<Vec<T>> {
        let m = self.params.m();
        if g.len() != m {
            return Err(Error::Dimension {
                what: "mu gradient",
                expected: m,
                got: g.len(),
            });
        }
        match self.f11_path {
            F11Path::Analytic => self.f11_analytic(spec.delta, g),
            F11Path::DenseFallback => self.f11_dense(spec.delta, g),
        }
    }

    fn f11_analytic(&self, delta: f64, g: &[T]) -> Result<Vec<T>> {
        let delta = T::lit(delta);
        let one = T::one();
        let d_inv2 = self.woodbury.d_inv2();
        let u = self.woodbury.d_inv2_b();
        let a_inv: Vec<T> = d_inv2
            .iter()
            .zip(&self.q)
            .map(|(&di2, &q)| one / ((one + delta) * di2 - delta * q * di2 * di2))
            .collect();
        let a_inv_g: Vec<T> = g.iter().zip(&a_inv).map(|(&x, &a)| a * x).collect();
        let p = self.params.p();
        if p == 0 {
            return Ok(a_inv_g);
        }
        // C̃⁻¹ − UᵀA⁻¹U = I + BᵀD⁻²B − UᵀA⁻¹U.
        let b = self.params.b();
        let mut a_inv_u = u.clone();
        for (i, &a) in a_inv.iter().enumerate() {
            for x in a_inv_u.row_mut(i) {
                *x *= a;
            }
        }
        let mut inner = b.tr_matmul(u);
        let ut_a_u = u.tr_matmul(&a_inv_u);
        for j in 0..p {
            inner[(j, j)] += one;
            for k in 0..p {
                inner[(j, k)] -= ut_a_u[(j, k)];
            }
        }
        let inner = inner.cholesky("damped F11 capacitance")?;
        let w = inner.solve(&u.tr_matvec(&a_inv_g));
        let corr = a_inv_u.matvec(&w);
        Ok(a_inv_g.iter().zip(&corr).map(|(&x, &c)| x + c).collect())
    }

    fn f11_dense(&self, delta: f64, g: &[T]) -> Result<Vec<T>> {
        Ok(self.f11_dense_factor(delta)?.solve(g))
    }

    fn f11_dense_factor(&self, delta: f64) -> Result<Cholesky<T>> {
        let mut f = self.sigma_inv.clone();
        let scale = T::lit(1.0 + delta);
        for i in 0..f.rows() {
            f[(i, i)] *= scale;
        }
        f.cholesky("damped F11")
    }

    /// Compares the analytic `F̃₁₁⁻¹` with a dense solve on a fixed probe.
    fn f11_self_check(&self) -> F11Path {
        let m = self.params.m();
        let probe: Vec<T> = (0..m).map(|i| T::lit(1.0 + 0.37 * i as f64).sin()).collect();
        let delta = 0.5;
        let (Ok(a), Ok(b)) = (self.f11_analytic(delta, &probe), self.f11_dense(delta, &probe)) else {
            log::warn!("analytic damped F11 inverse unavailable; using dense solves");
            return F11Path::DenseFallback;
        };
        let diff: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| x - y).collect();
        let rel = norm(&diff).as_f64() / norm(&b).as_f64().max(f64::MIN_POSITIVE);
        let tol = if std::mem::size_of::<T>() == 4 { 1e-3 } else { 1e-8 };
        if rel > tol {
            log::warn!("analytic damped F11 inverse self-check failed (rel err {rel:e}); using dense solves");
            F11Path::DenseFallback
        } else {
            F11Path::Analytic
        }
    }

    /// Damped natural gradient of a packed Euclidean gradient.
    pub fn natural_gradient(&self, spec: &DampingSpec, grad: &[T]) -> Result<NaturalGradient<T>> {
        let (m, p) = (self.params.m(), self.params.p());
        if grad.len() != packed_len(m, p) {
            return Err(Error::Dimension {
                what: "packed gradient",
                expected: packed_len(m, p),
                got: grad.len(),
            });
        }
        let mut packed = self.f11_damped_inverse_apply(spec, &grad[..m])?;
        let mut rhs = grad[m..].to_vec();
        for j in 0..p {
            for i in 0..m {
                if is_masked(i, j) {
                    rhs[j * m + i] = T::zero();
                }
            }
        }
        let precond = self.damped_diagonal(spec);
        let cg = pcg(
            |v| self.fim_bd_matvec(spec, v),
            &rhs,
            &precond,
            spec.cg_tol,
            spec.cg_max_iter,
        )?;
        packed.extend(cg.x);
        Ok(NaturalGradient {
            packed,
            cg_iterations: cg.iterations,
            cg_residual: cg.residual,
        })
    }

    /// Full damped FIM as a dense `(2m+mp)²` matrix, assembled from the
    /// block operators. Masked rows and columns are zero.
    pub fn dense_damped_fim(&self, spec: &DampingSpec) -> Result<Matrix<T>> {
        let (m, p) = (self.params.m(), self.params.p());
        let n = packed_len(m, p);
        let mut f = Matrix::zeros(n, n);
        let delta = T::lit(spec.delta);
        for i in 0..m {
            for j in 0..m {
                f[(i, j)] = self.sigma_inv[(i, j)];
            }
            f[(i, i)] += delta * self.sigma_inv[(i, i)];
        }
        let nb = m * p + m;
        let mut e = vec![T::zero(); nb];
        for c in 0..nb {
            if c < m * p && is_masked(c % m, c / m) {
                continue;
            }
            e[c] = T::one();
            let col = self.fim_bd_matvec(spec, &e)?;
            e[c] = T::zero();
            for (r, v) in col.into_iter().enumerate() {
                f[(m + r, m + c)] = v;
            }
        }
        Ok(f)
    }
}

pub struct CgSolution<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradient for an SPD operator.
pub fn pcg<T: Real>(
    mut apply: impl FnMut(&[T]) -> Result<Vec<T>>,
    b: &[T],
    precond_diag: &[T],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution<T>> {
    let n = b.len();
    let b_norm = norm(b).as_f64();
    let mut x = vec![T::zero(); n];
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = b.to_vec();
    let mut z: Vec<T> = r.iter().zip(precond_diag).map(|(&ri, &pi)| ri / pi).collect();
    let mut dir = z.clone();
    let mut rz = dot(&r, &z);
    let mut residual = 1.0;
    for it in 1..=max_iter {
        let ad = apply(&dir)?;
        let curvature = dot(&dir, &ad);
        if !(curvature > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                context: "damped FIM in CG",
            });
        }
        let alpha = rz / curvature;
        axpy(alpha, &dir, &mut x);
        axpy(-alpha, &ad, &mut r);
        residual = norm(&r).as_f64() / b_norm;
        if residual <= tol {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual,
            });
        }
        for ((zi, &ri), &pi) in z.iter_mut().zip(&r).zip(precond_diag) {
            *zi = ri / pi;
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (di, &zi) in dir.iter_mut().zip(&z) {
            *di = zi + beta * *di;
        }
    }
    Err(Error::CgNotConverged {
        iterations: max_iter,
        residual,
    })
}

/// Score `∇_λ log q⁰_λ(θ)` in packed layout, from the dense precision.
pub fn score_lambda<T: Real>(params: &VariationalParams<T>, sigma_inv: &Matrix<T>, theta: &[T]) -> Vec<T> {
    let (m, p) = (params.m(), params.p());
    let r: Vec<T> = theta.iter().zip(params.mu()).map(|(&t, &mu)| t - mu).collect();
    let sr = sigma_inv.matvec(&r);
    let b = params.b();
    let mut out = Vec::with_capacity(packed_len(m, p));
    out.extend_from_slice(&sr);
    // ∇_B = (Sr)(Sr)ᵀB − SB,  G = ½(Sr rᵀS − S).
    let srt_b = b.tr_matvec(&sr);
    for j in 0..p {
        for i in 0..m {
            if is_masked(i, j) {
                out.push(T::zero());
            } else {
                let sb: T = (0..m).map(|k| sigma_inv[(i, k)] * b[(k, j)]).sum();
                out.push(sr[i] * srt_b[j] - sb);
            }
        }
    }
    for (i, &d) in params.d().iter().enumerate() {
        out.push(d * (sr[i] * sr[i] - sigma_inv[(i, i)]));
    }
    out
}

/// Monte-Carlo FIM `E[s sᵀ]` together with per-entry standard errors.
#[derive(Clone, Debug)]
pub struct McFim<T> {
    pub mean: Matrix<T>,
    pub std_err: Matrix<T>,
}

fn accumulate_outer(sum: &mut [f64], sum_sq: &mut [f64], s: &[f64]) {
    let n = s.len();
    for i in 0..n {
        for j in 0..n {
            let v = s[i] * s[j];
            sum[i * n + j] += v;
            sum_sq[i * n + j] += v * v;
        }
    }
}

fn finish_mc<T: Real>(n: usize, sum: Vec<f64>, sum_sq: Vec<f64>, samples: usize) -> McFim<T> {
    let ns = samples as f64;
    let mut mean = Matrix::zeros(n, n);
    let mut se = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let mu = sum[k] / ns;
            let var = ((sum_sq[k] / ns - mu * mu) * ns / (ns - 1.0).max(1.0)).max(0.0);
            mean[(i, j)] = T::lit(mu);
            se[(i, j)] = T::lit((var / ns).sqrt());
        }
    }
    McFim { mean, std_err: se }
}

/// Monte-Carlo estimate of the FIM of `q⁰_λ` from analytic scores.
pub fn mc_fim<T: Real>(params: &VariationalParams<T>, n_samples: usize, seed: u64) -> Result<McFim<T>> {
    let sigma_inv = params.woodbury()?.dense_inverse();
    let n = params.packed_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; n * n];
    let mut sum_sq = vec![0.0; n * n];
    for _ in 0..n_samples {
        let noise = ReparamNoise::draw(params.m(), params.p(), &mut rng);
        let theta = params.sample_theta(&noise)?;
        let s: Vec<f64> = score_lambda(params, &sigma_inv, &theta).iter().map(|x| x.as_f64()).collect();
        accumulate_outer(&mut sum, &mut sum_sq, &s);
    }
    Ok(finish_mc(n, sum, sum_sq, n_samples))
}

/// Monte-Carlo FIM of the hybrid family `q_λ(θ, z) = p(z | θ, y) q⁰_λ(θ)`.
///
/// Each draw samples `θ` and then `z` from the model, and forms the joint
/// score as the sum of the `q⁰` score and the score of `p(z | θ, y)` in `λ`,
/// which is identically zero. `θ` noise comes from the same stream as
/// [`mc_fim`] and latent draws from a separate one, so the two estimates
/// agree exactly.
pub fn mc_fim_joint<T: Real, M: LatentModel<T>>(
    params: &VariationalParams<T>,
    model: &M,
    n_samples: usize,
    seed: u64,
) -> Result<McFim<T>> {
    let sigma_inv = params.woodbury()?.dense_inverse();
    let n = params.packed_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    latent_rng.set_stream(1);
    let mut latents = model.initial_latents();
    let mut sum = vec![0.0; n * n];
    let mut sum_sq = vec![0.0; n * n];
    for _ in 0..n_samples {
        let noise = ReparamNoise::draw(params.m(), params.p(), &mut rng);
        let theta = params.sample_theta(&noise)?;
        latents = model.sample_latents(&theta, &latents, &mut latent_rng)?;
        let conditional_score = vec![T::zero(); n];
        let s: Vec<f64> = score_lambda(params, &sigma_inv, &theta)
            .iter()
            .zip(&conditional_score)
            .map(|(&a, &b)| (a + b).as_f64())
            .collect();
        accumulate_outer(&mut sum, &mut sum_sq, &s);
    }
    // Touch the rng so the latent stream is provably distinct.
    let _: u64 = latent_rng.random();
    Ok(finish_mc(n, sum, sum_sq, n_samples))
}
