//! Stochastic gradient ascent on the hybrid ELBO: damped natural gradient
//! with normalized momentum (natural mode) or the raw gradient (ordinary
//! mode), both scaled by ADADELTA.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_gaussian::VariationalParams;
use crate::model::LatentModel;
use crate::natgrad::{DampingSpec, FimContext};
use crate::reparam::estimate_gradient;
use crate::scalar::{first_non_finite, norm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// NG-HVI.
    Natural,
    /// SG-HVI.
    Ordinary,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" | "ng" => Ok(Mode::Natural),
            "ordinary" | "sg" => Ok(Mode::Ordinary),
            other => Err(Error::Config(format!("unknown mode '{other}' (natural|ordinary)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub mode: Mode,
    pub damping: DampingSpec,
    /// Momentum weight `a_m`.
    pub a_m: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    /// Number of factors in `B`.
    pub p: usize,
    pub seed: u64,
    /// Log progress every this many steps; 0 disables.
    pub trace_every: usize,
    /// Draws averaged per gradient estimate.
    pub mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            mode: Mode::Natural,
            damping: DampingSpec::default(),
            a_m: 0.9,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-8,
            p: 3,
            seed: 0,
            trace_every: 0,
            mc_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.a_m) {
            return Err(Error::Config(format!("a_m must lie in [0, 1), got {}", self.a_m)));
        }
        if !(0.0..1.0).contains(&self.adadelta_rho) {
            return Err(Error::Config(format!(
                "adadelta_rho must lie in [0, 1), got {}",
                self.adadelta_rho
            )));
        }
        if !(self.adadelta_eps > 0.0) {
            return Err(Error::Config("adadelta_eps must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        self.damping.validate()
    }

    /// Starting `λ` for a model of dimension `m`, derived from the seed on a
    /// stream separate from the optimization draws.
    pub fn initial_params<T: Real>(&self, m: usize) -> VariationalParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        VariationalParams::initial(m, self.p, &mut rng)
    }
}

/// ADADELTA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta<T> {
    rho: T,
    eps: T,
    eg2: Vec<T>,
    edx2: Vec<T>,
}

impl<T: Real> Adadelta<T> {
    pub fn new(len: usize, rho: f64, eps: f64) -> Self {
        Self {
            rho: T::lit(rho),
            eps: T::lit(eps),
            eg2: vec![T::zero(); len],
            edx2: vec![T::zero(); len],
        }
    }

    pub fn eg2(&self) -> &[T] {
        &self.eg2
    }

    pub fn edx2(&self) -> &[T] {
        &self.edx2
    }

    /// Returns the step `Δ` for `direction` and updates the accumulators.
    pub fn step(&mut self, direction: &[T]) -> Vec<T> {
        assert_eq!(direction.len(), self.eg2.len(), "adadelta length");
        let one_minus = T::one() - self.rho;
        let mut out = Vec::with_capacity(direction.len());
        for ((&g, eg2), edx2) in direction.iter().zip(&mut self.eg2).zip(&mut self.edx2) {
            *eg2 = self.rho * *eg2 + one_minus * g * g;
            let dx = ((*edx2 + self.eps).sqrt() / (*eg2 + self.eps).sqrt()) * g;
            *edx2 = self.rho * *edx2 + one_minus * dx * dx;
            out.push(dx);
        }
        out
    }
}

/// `m̄ ← a m̄ + (1 − a) g̃ / ‖g̃‖`. Returns false, leaving `m̄` untouched,
/// when `g̃` has zero norm.
pub fn momentum_update<T: Real>(m_bar: &mut [T], nat_grad: &[T], a_m: f64) -> bool {
    let n = norm(nat_grad);
    if !(n > T::zero()) {
        return false;
    }
    let a = T::lit(a_m);
    let w = (T::one() - a) / n;
    for (mb, &g) in m_bar.iter_mut().zip(nat_grad) {
        *mb = a * *mb + w * g;
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub elapsed_s: f64,
    pub noisy_elbo: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTrace {
    pub records: Vec<TraceRecord>,
    pub final_elbo_avg100: f64,
}

impl ElboTrace {
    pub fn from_records(records: Vec<TraceRecord>) -> Self {
        let final_elbo_avg100 = trailing_mean(&records, records.len(), 100);
        Self {
            records,
            final_elbo_avg100,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean noisy ELBO over the `window` records ending just before `end`.
    pub fn trailing_mean(&self, end: usize, window: usize) -> f64 {
        trailing_mean(&self.records, end, window)
    }
}

fn trailing_mean(records: &[TraceRecord], end: usize, window: usize) -> f64 {
    let end = end.min(records.len());
    let start = end.saturating_sub(window);
    if end == start {
        return f64::NAN;
    }
    records[start..end].iter().map(|r| r.noisy_elbo).sum::<f64>() / (end - start) as f64
}

#[derive(Clone, Debug)]
pub struct FitResult<T, Z> {
    pub params: VariationalParams<T>,
    pub trace: ElboTrace,
    pub latents: Z,
    /// Largest CG iteration count over all steps (0 in ordinary mode).
    pub max_cg_iterations: usize,
}

/// Runs exactly `cfg.steps` iterations from `init`.
pub fn fit<T: Real, M: LatentModel<T>>(
    model: &M,
    init: VariationalParams<T>,
    cfg: &TrainConfig,
) -> Result<FitResult<T, M::Latent>> {
    cfg.validate()?;
    let m = init.m();
    if model.dim_theta() != m {
        return Err(Error::Dimension {
            what: "initial parameters for model",
            expected: model.dim_theta(),
            got: m,
        });
    }
    let n = init.packed_len();
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adadelta = Adadelta::new(n, cfg.adadelta_rho, cfg.adadelta_eps);
    let mut m_bar = vec![T::zero(); n];
    let mut latents = model.initial_latents();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut max_cg = 0;
    let start = Instant::now();
    let at = |step: usize| move |e: Error| Error::AtStep { step, source: Box::new(e) };

    for step in 0..cfg.steps {
        let mut grad = vec![T::zero(); n];
        let mut elbo = T::zero();
        for _ in 0..cfg.mc_samples {
            let est = estimate_gradient(&params, model, &latents, &mut rng).map_err(at(step))?;
            for (g, x) in grad.iter_mut().zip(est.packed()) {
                *g += x;
            }
            elbo += est.noisy_elbo;
            latents = est.latents;
        }
        if cfg.mc_samples > 1 {
            let inv = T::one() / T::lit(cfg.mc_samples as f64);
            grad.iter_mut().for_each(|g| *g *= inv);
            elbo *= inv;
        }

        let direction = match cfg.mode {
            Mode::Natural => {
                let ctx = FimContext::build(&params).map_err(at(step))?;
                let ng = ctx.natural_gradient(&cfg.damping, &grad).map_err(at(step))?;
                max_cg = max_cg.max(ng.cg_iterations);
                if !momentum_update(&mut m_bar, &ng.packed, cfg.a_m) {
                    log::debug!("step {step}: zero natural gradient, momentum reused");
                }
                m_bar.clone()
            }
            Mode::Ordinary => grad,
        };
        let delta = adadelta.step(&direction);
        let mut packed = params.pack();
        for (x, dx) in packed.iter_mut().zip(&delta) {
            *x += *dx;
        }
        if let Some(index) = first_non_finite(&packed) {
            return Err(at(step)(Error::NonFinite {
                what: "variational parameters",
                index,
            }));
        }
        params.set_from_packed_unchecked(&packed);

        let elapsed_s = start.elapsed().as_secs_f64();
        records.push(TraceRecord {
            step,
            elapsed_s,
            noisy_elbo: elbo.as_f64(),
        });
        if cfg.trace_every > 0 && (step + 1) % cfg.trace_every == 0 {
            log::info!("step {}: noisy ELBO {:.4} ({elapsed_s:.2}s)", step + 1, elbo.as_f64());
        }
    }
    Ok(FitResult {
        params,
        trace: ElboTrace::from_records(records),
        latents,
        max_cg_iterations: max_cg,
    })
}
