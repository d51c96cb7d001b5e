//! Gaussian variational family with factor covariance `Σ = BBᵀ + D²`.
//!
//! Parameters pack as `λ = (μ, vec(B), d)` with `vec` column-major. The
//! strict upper triangle of `B` is structurally zero; those slots are still
//! present in the packed vector (always zero) so `dim(λ) = 2m + mp`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::{dot, first_non_finite, Real};
use crate::special::LN_2PI;

/// Absolute lower bound on `|d_i|`.
pub const D_FLOOR: f64 = 1e-8;

/// `B[i, j]` with `j > i` is fixed at zero.
#[inline]
pub fn is_masked(row: usize, col: usize) -> bool {
    col > row
}

/// Length of the packed parameter vector.
#[inline]
pub fn packed_len(m: usize, p: usize) -> usize {
    2 * m + m * p
}

/// Zeroes the masked (strict upper triangular) entries of an `m × p` matrix.
pub fn apply_mask<T: Real>(b: &mut Matrix<T>) {
    for i in 0..b.rows() {
        for j in (i + 1)..b.cols() {
            b[(i, j)] = T::zero();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams<T> {
    mu: Vec<T>,
    b: Matrix<T>,
    d: Vec<T>,
}

/// Standard normal noise driving one reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamNoise<T> {
    pub eps1: Vec<T>,
    pub eps2: Vec<T>,
}

impl<T: Real> ReparamNoise<T> {
    pub fn draw<R: Rng + ?Sized>(m: usize, p: usize, rng: &mut R) -> Self {
        let eps1 = (0..p).map(|_| T::std_normal(rng)).collect();
        let eps2 = (0..m).map(|_| T::std_normal(rng)).collect();
        Self { eps1, eps2 }
    }

    /// Draws `ε₂` and `ε₁` from separate substreams of `seed`, so `ε₂` is the
    /// same for every `p`.
    pub fn draw_split(m: usize, p: usize, seed: u64) -> Self {
        let mut r2 = crate::special::group_rng(seed, 0);
        let mut r1 = crate::special::group_rng(seed, 1);
        Self {
            eps1: (0..p).map(|_| T::std_normal(&mut r1)).collect(),
            eps2: (0..m).map(|_| T::std_normal(&mut r2)).collect(),
        }
    }

    pub fn zeros(m: usize, p: usize) -> Self {
        Self {
            eps1: vec![T::zero(); p],
            eps2: vec![T::zero(); m],
        }
    }
}

impl<T: Real> VariationalParams<T> {
    pub fn new(mu: Vec<T>, b: Matrix<T>, d: Vec<T>) -> Result<Self> {
        let m = mu.len();
        if b.rows() != m {
            return Err(Error::Dimension {
                what: "rows of B",
                expected: m,
                got: b.rows(),
            });
        }
        if d.len() != m {
            return Err(Error::Dimension {
                what: "length of d",
                expected: m,
                got: d.len(),
            });
        }
        for i in 0..m {
            for j in (i + 1)..b.cols() {
                if b[(i, j)] != T::zero() {
                    return Err(Error::MaskViolation { row: i, col: j });
                }
            }
        }
        if let Some(index) = first_non_finite(&mu) {
            return Err(Error::NonFinite { what: "mu", index });
        }
        if let Some(index) = first_non_finite(b.as_slice()) {
            return Err(Error::NonFinite { what: "B", index });
        }
        if let Some(index) = first_non_finite(&d) {
            return Err(Error::NonFinite { what: "d", index });
        }
        check_floor(&d)?;
        Ok(Self { mu, b, d })
    }

    /// Starting point: `μ = 0`, `d = 0.1`, `B` entries i.i.d. `N(0, 0.01²)`
    /// with the mask applied.
    pub fn initial<R: Rng + ?Sized>(m: usize, p: usize, rng: &mut R) -> Self {
        let scale = T::lit(0.01);
        let mut b = Matrix::from_fn(m, p, |_, _| T::zero());
        for x in b.as_mut_slice() {
            *x = scale * T::std_normal(rng);
        }
        apply_mask(&mut b);
        Self {
            mu: vec![T::zero(); m],
            b,
            d: vec![T::lit(0.1); m],
        }
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.mu.len()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.b.cols()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn d(&self) -> &[T] {
        &self.d
    }

    pub fn packed_len(&self) -> usize {
        packed_len(self.m(), self.p())
    }

    pub fn pack(&self) -> Vec<T> {
        let (m, p) = (self.m(), self.p());
        let mut out = Vec::with_capacity(packed_len(m, p));
        out.extend_from_slice(&self.mu);
        for j in 0..p {
            for i in 0..m {
                out.push(self.b[(i, j)]);
            }
        }
        out.extend_from_slice(&self.d);
        out
    }

    pub fn unpack(v: &[T], m: usize, p: usize) -> Result<Self> {
        if v.len() != packed_len(m, p) {
            return Err(Error::Dimension {
                what: "packed variational parameters",
                expected: packed_len(m, p),
                got: v.len(),
            });
        }
        let mu = v[..m].to_vec();
        let mut b = Matrix::zeros(m, p);
        for j in 0..p {
            for i in 0..m {
                b[(i, j)] = v[m + j * m + i];
            }
        }
        let d = v[m + m * p..].to_vec();
        Self::new(mu, b, d)
    }

    /// `θ = μ + B ε₁ + d ∘ ε₂`.
    pub fn sample_theta(&self, noise: &ReparamNoise<T>) -> Result<Vec<T>> {
        self.check_noise(noise)?;
        let b_eps = self.b.matvec(&noise.eps1);
        Ok(self
            .mu
            .iter()
            .zip(&b_eps)
            .zip(self.d.iter().zip(&noise.eps2))
            .map(|((&mu, &be), (&d, &e))| mu + be + d * e)
            .collect())
    }

    /// `Σ v` without forming `Σ`.
    pub fn sigma_apply(&self, v: &[T]) -> Vec<T> {
        let btv = self.b.tr_matvec(v);
        let mut out = self.b.matvec(&btv);
        for ((o, &d), &x) in out.iter_mut().zip(&self.d).zip(v) {
            *o += d * d * x;
        }
        out
    }

    /// Precomputes the `p × p` factorization behind every `Σ⁻¹` product.
    pub fn woodbury(&self) -> Result<Woodbury<T>> {
        Woodbury::new(self)
    }

    /// `Σ⁻¹ v` through the Woodbury identity; never forms an `m × m` matrix.
    pub fn sigma_inv_apply(&self, v: &[T]) -> Result<Vec<T>> {
        self.check_len(v.len(), "v")?;
        Ok(self.woodbury()?.apply(v))
    }

    /// Log density of `N(μ, BBᵀ + D²)` at `θ`.
    pub fn log_q0(&self, theta: &[T]) -> Result<T> {
        self.check_len(theta.len(), "theta")?;
        let wb = self.woodbury()?;
        let r: Vec<T> = theta.iter().zip(&self.mu).map(|(&t, &m)| t - m).collect();
        let quad = dot(&r, &wb.apply(&r));
        let half = T::lit(0.5);
        let m = T::from_usize(self.m()).unwrap();
        Ok(-half * (m * T::lit(LN_2PI) + wb.log_det_sigma() + quad))
    }

    /// `∇_θ log q⁰(θ) = −Σ⁻¹(θ − μ)`.
    pub fn score_theta(&self, theta: &[T]) -> Result<Vec<T>> {
        self.check_len(theta.len(), "theta")?;
        let r: Vec<T> = theta.iter().zip(&self.mu).map(|(&t, &m)| t - m).collect();
        Ok(self.woodbury()?.apply(&r).into_iter().map(|x| -x).collect())
    }

    /// Dense `Σ`; for tests and small problems.
    pub fn sigma_dense(&self) -> Matrix<T> {
        let mut s = self.b.matmul(&self.b.transpose());
        for (i, &d) in self.d.iter().enumerate() {
            s[(i, i)] += d * d;
        }
        s
    }

    /// Replaces the parameters from a packed vector after an update step,
    /// re-applying the mask and the `|d|` floor.
    pub(crate) fn set_from_packed_unchecked(&mut self, v: &[T]) {
        let (m, p) = (self.m(), self.p());
        self.mu.copy_from_slice(&v[..m]);
        for j in 0..p {
            for i in 0..m {
                self.b[(i, j)] = if is_masked(i, j) { T::zero() } else { v[m + j * m + i] };
            }
        }
        let floor = T::lit(D_FLOOR);
        for (d, &x) in self.d.iter_mut().zip(&v[m + m * p..]) {
            *d = if x.abs() < floor {
                if x < T::zero() { -floor } else { floor }
            } else {
                x
            };
        }
    }

    pub fn to_record(&self) -> ParamsRecord {
        ParamsRecord {
            m: self.m(),
            p: self.p(),
            mu: self.mu.iter().map(|x| x.as_f64()).collect(),
            b: (0..self.m())
                .map(|i| self.b.row(i).iter().map(|x| x.as_f64()).collect())
                .collect(),
            d: self.d.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_record(rec: &ParamsRecord) -> Result<Self> {
        if rec.b.len() != rec.m {
            return Err(Error::Dimension {
                what: "rows of B in checkpoint",
                expected: rec.m,
                got: rec.b.len(),
            });
        }
        let mut flat = Vec::with_capacity(rec.m * rec.p);
        for row in &rec.b {
            if row.len() != rec.p {
                return Err(Error::Dimension {
                    what: "columns of B in checkpoint",
                    expected: rec.p,
                    got: row.len(),
                });
            }
            flat.extend(row.iter().map(|&x| T::lit(x)));
        }
        let b = Matrix::from_row_major(rec.m, rec.p, flat)?;
        Self::new(
            rec.mu.iter().map(|&x| T::lit(x)).collect(),
            b,
            rec.d.iter().map(|&x| T::lit(x)).collect(),
        )
    }

    fn check_len(&self, got: usize, what: &'static str) -> Result<()> {
        if got != self.m() {
            return Err(Error::Dimension {
                what,
                expected: self.m(),
                got,
            });
        }
        Ok(())
    }

    fn check_noise(&self, noise: &ReparamNoise<T>) -> Result<()> {
        if noise.eps1.len() != self.p() {
            return Err(Error::Dimension {
                what: "eps1",
                expected: self.p(),
                got: noise.eps1.len(),
            });
        }
        self.check_len(noise.eps2.len(), "eps2")
    }
}

fn check_floor<T: Real>(d: &[T]) -> Result<()> {
    for (index, &x) in d.iter().enumerate() {
        if x.abs().as_f64() < D_FLOOR {
            return Err(Error::DiagonalFloor {
                index,
                value: x.as_f64(),
                floor: D_FLOOR,
            });
        }
    }
    Ok(())
}

/// Serialized form: `{"m","p","mu","B" (row-major rows),"d"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub m: usize,
    pub p: usize,
    pub mu: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

/// Cached pieces of `Σ⁻¹ = D⁻² − D⁻²B(I + BᵀD⁻²B)⁻¹BᵀD⁻²`.
#[derive(Clone, Debug)]
pub struct Woodbury<T> {
    d_inv2: Vec<T>,
    /// `D⁻² B`, `m × p`.
    d_inv2_b: Matrix<T>,
    /// Factor of `I + BᵀD⁻²B`.
    inner: Cholesky<T>,
    log_det_sigma: T,
}

impl<T: Real> Woodbury<T> {
    pub fn new(params: &VariationalParams<T>) -> Result<Self> {
        check_floor(&params.d)?;
        let d_inv2: Vec<T> = params.d.iter().map(|&d| T::one() / (d * d)).collect();
        let b = &params.b;
        let mut d_inv2_b = b.clone();
        for i in 0..b.rows() {
            for x in d_inv2_b.row_mut(i) {
                *x *= d_inv2[i];
            }
        }
        let mut inner = b.tr_matmul(&d_inv2_b);
        for j in 0..inner.rows() {
            inner[(j, j)] += T::one();
        }
        let inner = inner.cholesky("I + BᵀD⁻²B")?;
        let two = T::lit(2.0);
        let log_det_sigma =
            inner.log_det() + params.d.iter().map(|&d| two * d.abs().ln()).sum::<T>();
        Ok(Self {
            d_inv2,
            d_inv2_b,
            inner,
            log_det_sigma,
        })
    }

    pub fn apply(&self, v: &[T]) -> Vec<T> {
        let w = self.d_inv2_b.tr_matvec(v);
        let c = self.inner.solve(&w);
        let corr = self.d_inv2_b.matvec(&c);
        v.iter()
            .zip(&self.d_inv2)
            .zip(&corr)
            .map(|((&x, &di), &c)| di * x - c)
            .collect()
    }

    /// `log |Σ|` by the matrix determinant lemma.
    pub fn log_det_sigma(&self) -> T {
        self.log_det_sigma
    }

    pub fn d_inv2(&self) -> &[T] {
        &self.d_inv2
    }

    pub fn d_inv2_b(&self) -> &Matrix<T> {
        &self.d_inv2_b
    }

    /// Factor of `C̃⁻¹ = I + BᵀD⁻²B`.
    pub fn inner(&self) -> &Cholesky<T> {
        &self.inner
    }

    /// Dense `Σ⁻¹`, `O(m²p)`.
    pub fn dense_inverse(&self) -> Matrix<T> {
        let m = self.d_inv2.len();
        // D⁻²B C̃ (D⁻²B)ᵀ, with C̃ applied through the factor.
        let c_t = self.inner.solve_matrix(&self.d_inv2_b.transpose()); // p × m
        let mut s = self.d_inv2_b.matmul(&c_t);
        s.scale(-T::one());
        for i in 0..m {
            s[(i, i)] += self.d_inv2[i];
        }
        // Symmetrize away rounding.
        for i in 0..m {
            for j in (i + 1)..m {
                let avg = T::lit(0.5) * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }
}
