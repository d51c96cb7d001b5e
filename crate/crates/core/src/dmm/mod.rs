//! Deep mixed models: a feed-forward network whose output-layer
//! coefficients are `β + α_k` for group `k`.
//!
//! Every layer `h⁽ˡ⁾` (inputs included) carries a constant offset `1` in its
//! first position. `W_l` maps all of `h⁽ˡ⁻¹⁾` to the `m_l − 1` non-offset
//! units of `h⁽ˡ⁾`; offset units are never parameterized.

mod bernoulli;
mod cholesky;
mod gaussian;

pub use bernoulli::{BernoulliDmm, BernoulliLatent, BernoulliPriors};
pub use cholesky::{cholesky_from_l, cholesky_l_terms, l_from_cholesky, vech_len, CholeskyLTerms};
pub use gaussian::{GaussianDmm, GaussianPriors};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rows of an `n × width` block per parallel task; fixed so reductions do
/// not depend on the thread count.
pub(crate) const GROUP_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Layer widths of the network. `hidden` lists neurons per hidden layer
/// excluding the offset, e.g. `[5, 5]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    n_inputs: usize,
    hidden: Vec<usize>,
    activation: Activation,
}

impl MlpArchitecture {
    /// `n_inputs` counts the offset (`m_0`).
    pub fn new(n_inputs: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        if n_inputs == 0 {
            return Err(Error::Config("network needs at least the offset input".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::Config("hidden layers need at least one neuron".into()));
        }
        Ok(Self {
            n_inputs,
            hidden,
            activation,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    /// `m_l` including the offset; layer 0 is the input.
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.n_inputs
        } else {
            self.hidden[l - 1] + 1
        }
    }

    /// `m_L`.
    pub fn output_dim(&self) -> usize {
        self.width(self.n_layers())
    }

    pub fn n_weights(&self) -> usize {
        (1..=self.n_layers()).map(|l| self.hidden[l - 1] * self.width(l - 1)).sum()
    }

    fn weight_offset(&self, l: usize) -> usize {
        (1..l).map(|j| self.hidden[j - 1] * self.width(j - 1)).sum()
    }

    fn check_input(&self, x_len: usize) -> Result<()> {
        if x_len != self.n_inputs {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.n_inputs,
                got: x_len,
            });
        }
        Ok(())
    }
}

/// Scratch space for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct MlpWorkspace<T> {
    /// `h⁽ˡ⁾` for `l = 0..=L`.
    acts: Vec<Vec<T>>,
    grad_h: Vec<T>,
    delta: Vec<T>,
}

impl<T: Real> MlpWorkspace<T> {
    pub fn new(arch: &MlpArchitecture) -> Self {
        let acts = (0..=arch.n_layers()).map(|l| vec![T::zero(); arch.width(l)]).collect();
        let widest = (0..=arch.n_layers()).map(|l| arch.width(l)).max().unwrap_or(1);
        Self {
            acts,
            grad_h: vec![T::zero(); widest],
            delta: vec![T::zero(); widest],
        }
    }

    /// Output layer of the last forward pass.
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("input layer present")
    }
}

impl MlpArchitecture {
    /// Forward pass into `ws`; `x[0]` is treated as the offset.
    pub fn forward_into<T: Real>(&self, w: &[T], x: &[T], ws: &mut MlpWorkspace<T>) {
        ws.acts[0].copy_from_slice(x);
        ws.acts[0][0] = T::one();
        for l in 1..=self.n_layers() {
            let rows = self.hidden[l - 1];
            let off = self.weight_offset(l);
            let (prev, cur) = ws.acts.split_at_mut(l);
            let h_in = &prev[l - 1];
            let h_out = &mut cur[0];
            h_out[0] = T::one();
            let a = &mut h_out[1..];
            a.iter_mut().for_each(|v| *v = T::zero());
            for (c, &hc) in h_in.iter().enumerate() {
                if hc == T::zero() {
                    continue;
                }
                let col = &w[off + c * rows..off + (c + 1) * rows];
                for (ar, &wr) in a.iter_mut().zip(col) {
                    *ar += wr * hc;
                }
            }
            if self.activation == Activation::Relu {
                for v in a.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
        }
    }

    /// Accumulates `∂/∂w` of a scalar whose gradient with respect to the
    /// output layer `h⁽ᴸ⁾` is `grad_out`, using the activations left in `ws`
    /// by [`forward_into`](Self::forward_into).
    pub fn backward_into<T: Real>(&self, w: &[T], grad_out: &[T], ws: &mut MlpWorkspace<T>, gw: &mut [T]) {
        let nl = self.n_layers();
        ws.grad_h[..grad_out.len()].copy_from_slice(grad_out);
        for l in (1..=nl).rev() {
            let rows = self.hidden[l - 1];
            let off = self.weight_offset(l);
            let h_out = &ws.acts[l];
            // δ over non-offset units; ReLU passes gradient where the unit is active.
            for r in 0..rows {
                let pass = match self.activation {
                    Activation::Relu => h_out[r + 1] > T::zero(),
                    Activation::Identity => true,
                };
                ws.delta[r] = if pass { ws.grad_h[r + 1] } else { T::zero() };
            }
            let h_in = &ws.acts[l - 1];
            let width_in = h_in.len();
            for c in 0..width_in {
                let hc = h_in[c];
                let col = off + c * rows;
                let mut back = T::zero();
                for r in 0..rows {
                    let d = ws.delta[r];
                    gw[col + r] += d * hc;
                    back += w[col + r] * d;
                }
                ws.grad_h[c] = back;
            }
        }
    }
}

/// `h⁽ᴸ⁾` for one input row (`x[0]` must be the offset `1`).
pub fn mlp_forward<T: Real>(arch: &MlpArchitecture, w: &[T], x: &[T]) -> Result<Vec<T>> {
    check_weights(arch, w)?;
    arch.check_input(x.len())?;
    let mut ws = MlpWorkspace::new(arch);
    arch.forward_into(w, x, &mut ws);
    Ok(ws.output().to_vec())
}

/// Gradients in `(w, β)` of `upstream · η` where `η = (β + α_k)ᵀ h⁽ᴸ⁾(x)`.
pub fn backprop_output_grads<T: Real>(
    arch: &MlpArchitecture,
    w: &[T],
    beta: &[T],
    alpha_k: &[T],
    x: &[T],
    upstream: T,
) -> Result<(Vec<T>, Vec<T>)> {
    check_weights(arch, w)?;
    arch.check_input(x.len())?;
    let ml = arch.output_dim();
    for (what, v) in [("beta", beta), ("alpha_k", alpha_k)] {
        if v.len() != ml {
            return Err(Error::Dimension {
                what,
                expected: ml,
                got: v.len(),
            });
        }
    }
    let mut ws = MlpWorkspace::new(arch);
    arch.forward_into(w, x, &mut ws);
    let g_beta: Vec<T> = ws.output().iter().map(|&h| upstream * h).collect();
    let grad_out: Vec<T> = beta.iter().zip(alpha_k).map(|(&b, &a)| upstream * (b + a)).collect();
    let mut gw = vec![T::zero(); w.len()];
    arch.backward_into(w, &grad_out, &mut ws, &mut gw);
    if let Some(index) = crate::scalar::first_non_finite(&gw) {
        return Err(Error::NonFinite {
            what: "weight gradient",
            index,
        });
    }
    Ok((gw, g_beta))
}

/// `H_k`: output layer rows for `range` of the design matrix.
pub(crate) fn group_outputs<T: Real>(
    arch: &MlpArchitecture,
    w: &[T],
    x: &crate::linalg::Matrix<T>,
    range: std::ops::Range<usize>,
    ws: &mut MlpWorkspace<T>,
) -> crate::linalg::Matrix<T> {
    let ml = arch.output_dim();
    let mut h = crate::linalg::Matrix::zeros(range.len(), ml);
    for (r, i) in range.enumerate() {
        arch.forward_into(w, x.row(i), ws);
        h.row_mut(r).copy_from_slice(ws.output());
    }
    h
}

fn check_weights<T>(arch: &MlpArchitecture, w: &[T]) -> Result<()> {
    if w.len() != arch.n_weights() {
        return Err(Error::Dimension {
            what: "network weights",
            expected: arch.n_weights(),
            got: w.len(),
        });
    }
    Ok(())
}

/// Offsets of the blocks of `θ = (w, β, extra, l)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThetaLayout {
    pub n_w: usize,
    pub n_beta: usize,
    pub n_extra: usize,
    pub n_l: usize,
}

impl ThetaLayout {
    pub fn dim(&self) -> usize {
        self.n_w + self.n_beta + self.n_extra + self.n_l
    }

    pub fn w(&self) -> std::ops::Range<usize> {
        0..self.n_w
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        self.n_w..self.n_w + self.n_beta
    }

    pub fn extra(&self) -> std::ops::Range<usize> {
        let s = self.n_w + self.n_beta;
        s..s + self.n_extra
    }

    pub fn l(&self) -> std::ops::Range<usize> {
        let s = self.n_w + self.n_beta + self.n_extra;
        s..s + self.n_l
    }
}

/// Checks the design matrix against the architecture: matching width and a
/// unit offset in the first column.
pub(crate) fn check_design<T: Real>(arch: &MlpArchitecture, x: &crate::linalg::Matrix<T>) -> Result<()> {
    if x.cols() != arch.n_inputs() {
        return Err(Error::Dimension {
            what: "input columns (offset included)",
            expected: arch.n_inputs(),
            got: x.cols(),
        });
    }
    if let Some(i) = (0..x.rows()).find(|&i| x[(i, 0)] != T::one()) {
        return Err(Error::Data(format!("row {i}: first input column must be the offset 1")));
    }
    Ok(())
}
