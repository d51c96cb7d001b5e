//! Model contract consumed by the optimizer, and grouped data storage.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// `log p(y | z, θ)` and `log p(θ)` at one draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoglikTerms<T> {
    pub log_lik: T,
    pub log_prior: T,
}

/// A latent-variable model `g(θ, z) = p(y | θ, z) p(z | θ) p(θ)` whose latent
/// conditional `p(z | θ, y)` can be sampled exactly or by a short MCMC run.
pub trait LatentModel<T: Real>: Sync {
    type Latent: Clone + Send + Sync;

    /// `m = dim(θ)`.
    fn dim_theta(&self) -> usize;

    /// Latent state used before the first draw.
    fn initial_latents(&self) -> Self::Latent;

    /// One draw of `z | θ, y`, warm-started from `prev` where applicable.
    fn sample_latents<R: Rng + ?Sized>(&self, theta: &[T], prev: &Self::Latent, rng: &mut R) -> Result<Self::Latent>;

    /// `log g(θ, z)` and its gradient in `θ`.
    fn log_g_and_grad(&self, theta: &[T], z: &Self::Latent) -> Result<(T, Vec<T>)>;

    fn loglik_terms(&self, theta: &[T], z: &Self::Latent) -> Result<LoglikTerms<T>>;
}

/// Observations sorted by group, with `K` nonempty groups labelled `1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset<T> {
    y: Vec<T>,
    x: Matrix<T>,
    group: Vec<usize>,
    ranges: Vec<Range<usize>>,
}

impl<T: Real> GroupedDataset<T> {
    /// Rows are stably reordered by group id.
    pub fn new(y: Vec<T>, x: Matrix<T>, group: Vec<usize>) -> Result<Self> {
        let n = y.len();
        if x.rows() != n {
            return Err(Error::Dimension {
                what: "design matrix rows",
                expected: n,
                got: x.rows(),
            });
        }
        if group.len() != n {
            return Err(Error::Dimension {
                what: "group labels",
                expected: n,
                got: group.len(),
            });
        }
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if let Some(i) = group.iter().position(|&g| g == 0) {
            return Err(Error::Data(format!("row {i}: group ids start at 1")));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {i}: non-finite response")));
        }
        if let Some(i) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {}: non-finite input", i / x.cols().max(1))));
        }
        let k = *group.iter().max().expect("nonempty");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| group[i]);
        let mut counts = vec![0usize; k];
        for &g in &group {
            counts[g - 1] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("group {} has no observations", empty + 1)));
        }
        let mut ranges = Vec::with_capacity(k);
        let mut start = 0;
        for c in counts {
            ranges.push(start..start + c);
            start += c;
        }
        let x_sorted = Matrix::from_fn(n, x.cols(), |i, j| x[(order[i], j)]);
        Ok(Self {
            y: order.iter().map(|&i| y[i]).collect(),
            x: x_sorted,
            group: order.iter().map(|&i| group[i]).collect(),
            ranges,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.x.cols()
    }

    pub fn num_groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn x(&self) -> &Matrix<T> {
        &self.x
    }

    /// 1-based group label of each row.
    pub fn groups(&self) -> &[usize] {
        &self.group
    }

    /// Row range of the group with 0-based index `k`.
    pub fn group_range(&self, k: usize) -> Range<usize> {
        self.ranges[k].clone()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// True when every response is 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.y.iter().all(|&v| v == T::zero() || v == T::one())
    }

    pub fn cast<U: Real>(&self) -> GroupedDataset<U> {
        GroupedDataset {
            y: self.y.iter().map(|&v| U::lit(v.as_f64())).collect(),
            x: self.x.cast(),
            group: self.group.clone(),
            ranges: self.ranges.clone(),
        }
    }
}
