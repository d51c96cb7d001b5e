//! Data-generating processes for the simulated examples.
//!
//! Every generator is a pure function of its [`DgpSpec`]. Group `k` draws
//! its random effect and rows from its own substream of the `DgpSpec` seed, so
//! the output does not depend on the order groups are produced in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dmm::{mlp_forward, Activation, MlpArchitecture};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::GroupedDataset;
use crate::special::group_rng;

/// Fixed-effect coefficients of the linear random-effects example.
pub const EX1_BETA: [f64; 6] = [0.8292, -1.3250, 0.9909, 1.6823, -1.7564, 0.0580];
/// Output-layer fixed effects of the `[5, 5]` Gaussian DMM example.
pub const EX2A_BETA: [f64; 6] = [0.8292, -1.3250, 3.9909, 1.6823, -1.7564, 0.5580];
/// Diagonal of `Ω_α⁻¹` for the `[5, 5]` Gaussian DMM example.
pub const EX2A_OMEGA_INV: [f64; 6] = [1.0443, 9.0498, 0.4569, 0.5190, 0.2857, 2.7548];
pub const EX2A_NOISE_VAR: f64 = 20.0;
pub const EX2B_NOISE_VAR: f64 = 2.25;

/// Covariance of the five non-offset inputs (also reused for Example 1).
pub const EX2A_VX: [[f64; 5]; 5] = [
    [1.0, 0.0, -0.5, 0.2, 0.0],
    [0.0, 1.0, 0.0, -0.5, 0.2],
    [-0.5, 0.0, 1.0, 0.0, -0.5],
    [0.2, -0.5, 0.0, 1.0, 0.0],
    [0.0, 0.2, -0.5, 0.0, 1.0],
];

/// Seed of the frozen hidden-layer truth weights and the other structural
/// draws that do not vary with the data seed.
pub const FROZEN_TRUTH_SEED: u64 = 20_240_607;
pub const TRUTH_WEIGHT_SD: f64 = 0.5;
const EX2B_INPUTS: usize = 64;
const EX2B_AR: f64 = 0.5;
const EX1_N: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    Ex1,
    Ex2a,
    Ex2b,
    Ex3,
    /// Probit random-intercept model with three covariates.
    ProbitRe,
}

impl std::str::FromStr for Example {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ex1" => Ok(Self::Ex1),
            "ex2a" => Ok(Self::Ex2a),
            "ex2b" => Ok(Self::Ex2b),
            "ex3" => Ok(Self::Ex3),
            "probit_re" | "probit-re" => Ok(Self::ProbitRe),
            other => Err(Error::Config(format!(
                "unknown example `{other}` (expected ex1, ex2a, ex2b, ex3 or probit_re)"
            ))),
        }
    }
}

impl std::fmt::Display for Example {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ex1 => "ex1",
            Self::Ex2a => "ex2a",
            Self::Ex2b => "ex2b",
            Self::Ex3 => "ex3",
            Self::ProbitRe => "probit_re",
        })
    }
}

/// Settings of one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub example: Example,
    pub k: usize,
    /// Rows per group; `ex1` and `probit_re` ignore these and split their
    /// fixed totals evenly.
    pub train_per_group: usize,
    pub test_per_group: usize,
    pub validation_per_group: usize,
    /// `σ_α² / σ_ε²` for `ex1`.
    pub ratio: f64,
    pub seed: u64,
}

impl DgpSpec {
    /// Group counts and sizes as published for each example.
    pub fn canonical(example: Example, seed: u64) -> Self {
        let (k, train, test, validation) = match example {
            Example::Ex1 => (1000, 5, 0, 0),
            Example::Ex2a => (1000, 6, 2, 0),
            Example::Ex2b => (1000, 30, 10, 0),
            Example::Ex3 => (1000, 14, 3, 3),
            Example::ProbitRe => (100, 20, 0, 0),
        };
        Self {
            example,
            k,
            train_per_group: train,
            test_per_group: test,
            validation_per_group: validation,
            ratio: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::Config(format!("variance ratio must be positive, got {}", self.ratio)));
        }
        match self.example {
            Example::Ex1 | Example::ProbitRe => {
                let n = self.total_rows();
                if n < self.k {
                    return Err(Error::Config(format!("{n} rows cannot fill {} groups", self.k)));
                }
            }
            _ if self.train_per_group == 0 => {
                return Err(Error::Config("training rows per group must be positive".into()))
            }
            _ => {}
        }
        Ok(())
    }

    fn total_rows(&self) -> usize {
        match self.example {
            Example::Ex1 => EX1_N,
            Example::ProbitRe => 2000,
            _ => self.k * self.train_per_group,
        }
    }

    /// Rows of group `k` (0-based) when a fixed total is split across groups,
    /// remainder assigned round-robin from the first group.
    fn even_split(&self, k: usize) -> usize {
        let n = self.total_rows();
        n / self.k + usize::from(k < n % self.k)
    }

    pub fn generate(&self) -> Result<SimulatedData> {
        self.validate()?;
        match self.example {
            Example::Ex1 => gen_example1(self),
            Example::Ex2a => gen_gaussian_dmm(self, &ex2a_truth_setup()),
            Example::Ex2b => gen_gaussian_dmm(self, &ex2b_truth_setup()),
            Example::Ex3 => gen_example3(self),
            Example::ProbitRe => gen_probit_re(self),
        }
    }
}

/// All parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: DgpSpec,
    /// Input columns including the offset.
    pub n_inputs: usize,
    /// Covariance of the non-offset inputs; empty for uniform inputs.
    pub input_cov: Vec<Vec<f64>>,
    /// Network hidden widths; empty for linear models.
    pub hidden: Vec<usize>,
    /// Flattened network weights in model layout.
    pub weights: Vec<f64>,
    /// Fixed effects (output layer for DMMs).
    pub beta: Vec<f64>,
    /// Observation noise variance; `None` for binary outcomes.
    pub noise_var: Option<f64>,
    /// Diagonal of `Ω_α`.
    pub re_var: Vec<f64>,
    /// Realized random effects, one row per group.
    pub alpha: Vec<Vec<f64>>,
}

impl TruthRecord {
    pub fn architecture(&self) -> Result<Option<MlpArchitecture>> {
        if self.hidden.is_empty() {
            return Ok(None);
        }
        MlpArchitecture::new(self.n_inputs, self.hidden.clone(), Activation::Relu).map(Some)
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub train: GroupedDataset<f64>,
    pub test: Option<GroupedDataset<f64>>,
    pub validation: Option<GroupedDataset<f64>>,
    /// Noise-free linear predictor of each training row, in dataset order.
    pub train_mean: Vec<f64>,
    pub truth: TruthRecord,
}

/// `K` groups, `n = 5000` split evenly, `σ_ε² = 1`, `σ_α² = ratio`.
pub fn dgp_example1(k: usize, ratio: f64, seed: u64) -> Result<SimulatedData> {
    DgpSpec {
        k,
        ratio,
        ..DgpSpec::canonical(Example::Ex1, seed)
    }
    .generate()
}

pub fn dgp_example2a(seed: u64) -> Result<SimulatedData> {
    DgpSpec::canonical(Example::Ex2a, seed).generate()
}

pub fn dgp_example2b(seed: u64) -> Result<SimulatedData> {
    DgpSpec::canonical(Example::Ex2b, seed).generate()
}

pub fn dgp_example3(seed: u64) -> Result<SimulatedData> {
    DgpSpec::canonical(Example::Ex3, seed).generate()
}

pub fn dgp_probit_re(seed: u64) -> Result<SimulatedData> {
    DgpSpec::canonical(Example::ProbitRe, seed).generate()
}

/// Lower Cholesky factor of a small covariance given as nested rows.
fn cov_factor(cov: &[Vec<f64>]) -> Result<Matrix<f64>> {
    let n = cov.len();
    let m = Matrix::from_fn(n, n, |i, j| cov[i][j]);
    Ok(m.cholesky("input covariance")?.factor().clone())
}

/// `[1, L z]` with `z ~ N(0, I)`.
fn correlated_row<R: Rng + ?Sized>(factor: &Matrix<f64>, rng: &mut R) -> Vec<f64> {
    let n = factor.rows();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let mut row = Vec::with_capacity(n + 1);
    row.push(1.0);
    row.extend(factor.matvec(&z));
    row
}

struct Rows {
    y: Vec<f64>,
    x: Vec<f64>,
    group: Vec<usize>,
    mean: Vec<f64>,
}

impl Rows {
    fn new() -> Self {
        Self {
            y: Vec::new(),
            x: Vec::new(),
            group: Vec::new(),
            mean: Vec::new(),
        }
    }

    fn push(&mut self, k: usize, x: Vec<f64>, mean: f64, y: f64) {
        self.y.push(y);
        self.x.extend(x);
        self.group.push(k + 1);
        self.mean.push(mean);
    }

    fn into_dataset(self, width: usize) -> Result<(GroupedDataset<f64>, Vec<f64>)> {
        let n = self.y.len();
        let ds = GroupedDataset::new(self.y, Matrix::from_row_major(n, width, self.x)?, self.group)?;
        // Rows were produced group by group, so sorting leaves the order unchanged.
        Ok((ds, self.mean))
    }

    fn into_optional(self, width: usize) -> Result<Option<GroupedDataset<f64>>> {
        if self.y.is_empty() {
            Ok(None)
        } else {
            self.into_dataset(width).map(|(d, _)| Some(d))
        }
    }
}

fn vx_rows() -> Vec<Vec<f64>> {
    EX2A_VX.iter().map(|r| r.to_vec()).collect()
}

fn gen_example1(spec: &DgpSpec) -> Result<SimulatedData> {
    let cov = vx_rows();
    let factor = cov_factor(&cov)?;
    let sd_alpha = spec.ratio.sqrt();
    let mut rows = Rows::new();
    let mut alpha = Vec::with_capacity(spec.k);
    for k in 0..spec.k {
        let mut rng = group_rng(spec.seed, k);
        let a = sd_alpha * rng.sample::<f64, _>(rand_distr::StandardNormal);
        alpha.push(vec![a]);
        for _ in 0..spec.even_split(k) {
            let x = correlated_row(&factor, &mut rng);
            let mean: f64 = x.iter().zip(EX1_BETA).map(|(a, b)| a * b).sum::<f64>() + a;
            let y = mean + rng.sample::<f64, _>(rand_distr::StandardNormal);
            rows.push(k, x, mean, y);
        }
    }
    let (train, train_mean) = rows.into_dataset(6)?;
    Ok(SimulatedData {
        train,
        test: None,
        validation: None,
        train_mean,
        truth: TruthRecord {
            spec: spec.clone(),
            n_inputs: 6,
            input_cov: cov,
            hidden: Vec::new(),
            weights: Vec::new(),
            beta: EX1_BETA.to_vec(),
            noise_var: Some(1.0),
            re_var: vec![spec.ratio],
            alpha,
        },
    })
}

struct DmmTruth {
    arch: MlpArchitecture,
    input_cov: Vec<Vec<f64>>,
    weights: Vec<f64>,
    beta: Vec<f64>,
    re_var: Vec<f64>,
    noise_var: f64,
}

fn frozen_weights(arch: &MlpArchitecture, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, TRUTH_WEIGHT_SD).expect("positive sd");
    (0..arch.n_weights()).map(|_| n.sample(rng)).collect()
}

fn ex2a_truth_setup() -> DmmTruth {
    let arch = MlpArchitecture::new(6, vec![5, 5], Activation::Relu).expect("valid architecture");
    let mut rng = ChaCha8Rng::seed_from_u64(FROZEN_TRUTH_SEED);
    DmmTruth {
        weights: frozen_weights(&arch, &mut rng),
        arch,
        input_cov: vx_rows(),
        beta: EX2A_BETA.to_vec(),
        re_var: EX2A_OMEGA_INV.iter().map(|v| 1.0 / v).collect(),
        noise_var: EX2A_NOISE_VAR,
    }
}

/// `[32, 16]` network on 64 AR(1)-correlated inputs. `Ω_α⁻¹` diagonal and
/// `β` are frozen draws on the ranges of the `[5, 5]` example.
fn ex2b_truth_setup() -> DmmTruth {
    let arch = MlpArchitecture::new(EX2B_INPUTS + 1, vec![32, 16], Activation::Relu).expect("valid architecture");
    let mut rng = ChaCha8Rng::seed_from_u64(FROZEN_TRUTH_SEED.wrapping_add(1));
    let weights = frozen_weights(&arch, &mut rng);
    let ml = arch.output_dim();
    let prec = Uniform::new(0.25, 10.0).expect("valid range");
    let re_var = (0..ml).map(|_| 1.0 / prec.sample(&mut rng)).collect();
    let bn = Normal::new(0.0, 2.0).expect("positive sd");
    let beta = (0..ml).map(|_| bn.sample(&mut rng)).collect();
    let input_cov = (0..EX2B_INPUTS)
        .map(|i| (0..EX2B_INPUTS).map(|j| EX2B_AR.powi((i as i32 - j as i32).abs())).collect())
        .collect();
    DmmTruth {
        arch,
        input_cov,
        weights,
        beta,
        re_var,
        noise_var: EX2B_NOISE_VAR,
    }
}

fn gen_gaussian_dmm(spec: &DgpSpec, t: &DmmTruth) -> Result<SimulatedData> {
    let factor = cov_factor(&t.input_cov)?;
    let width = t.arch.n_inputs();
    let noise_sd = t.noise_var.sqrt();
    let mut sets = [Rows::new(), Rows::new(), Rows::new()];
    let counts = [spec.train_per_group, spec.test_per_group, spec.validation_per_group];
    let mut alpha = Vec::with_capacity(spec.k);
    for k in 0..spec.k {
        let mut rng = group_rng(spec.seed, k);
        let a: Vec<f64> = t
            .re_var
            .iter()
            .map(|v| v.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for (rows, &count) in sets.iter_mut().zip(&counts) {
            for _ in 0..count {
                let x = correlated_row(&factor, &mut rng);
                let h = mlp_forward(&t.arch, &t.weights, &x)?;
                let mean: f64 = h.iter().zip(&t.beta).zip(&a).map(|((h, b), a)| h * (b + a)).sum();
                let y = mean + noise_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                rows.push(k, x, mean, y);
            }
        }
        alpha.push(a);
    }
    let [train, test, validation] = sets;
    let (train, train_mean) = train.into_dataset(width)?;
    Ok(SimulatedData {
        train,
        test: test.into_optional(width)?,
        validation: validation.into_optional(width)?,
        train_mean,
        truth: TruthRecord {
            spec: spec.clone(),
            n_inputs: width,
            input_cov: t.input_cov.clone(),
            hidden: t.arch.hidden().to_vec(),
            weights: t.weights.clone(),
            beta: t.beta.clone(),
            noise_var: Some(t.noise_var),
            re_var: t.re_var.clone(),
            alpha,
        },
    })
}

/// `η = 2 + 3(x₁ − 2x₂)² − 5x₃/(1 + x₄)² − 5x₅ + a_k` on inputs `[1, x₁..x₅]`.
pub fn example3_eta(x: &[f64], a_k: f64) -> f64 {
    2.0 + 3.0 * (x[1] - 2.0 * x[2]).powi(2) - 5.0 * x[3] / (1.0 + x[4]).powi(2) - 5.0 * x[5] + a_k
}

fn gen_example3(spec: &DgpSpec) -> Result<SimulatedData> {
    let u = Uniform::new(-1.0, 1.0).expect("valid range");
    let mut sets = [Rows::new(), Rows::new(), Rows::new()];
    let counts = [spec.train_per_group, spec.test_per_group, spec.validation_per_group];
    let mut alpha = Vec::with_capacity(spec.k);
    for k in 0..spec.k {
        let mut rng = group_rng(spec.seed, k);
        let a: f64 = rng.sample(rand_distr::StandardNormal);
        for (rows, &count) in sets.iter_mut().zip(&counts) {
            for _ in 0..count {
                let mut x = vec![1.0];
                x.extend((0..5).map(|_| u.sample(&mut rng)));
                let eta = example3_eta(&x, a);
                let p = 1.0 / (1.0 + (-eta).exp());
                let y = f64::from(u8::from(rng.random::<f64>() < p));
                rows.push(k, x, eta, y);
            }
        }
        alpha.push(vec![a]);
    }
    let [train, test, validation] = sets;
    let (train, train_mean) = train.into_dataset(6)?;
    Ok(SimulatedData {
        train,
        test: test.into_optional(6)?,
        validation: validation.into_optional(6)?,
        train_mean,
        truth: TruthRecord {
            spec: spec.clone(),
            n_inputs: 6,
            input_cov: Vec::new(),
            hidden: Vec::new(),
            weights: Vec::new(),
            beta: Vec::new(),
            noise_var: None,
            re_var: vec![1.0],
            alpha,
        },
    })
}

/// Probit random-intercept DGP: `x⁰ ~ N(0, LLᵀ + diag(d))`, `β ~ N(0, 10I)`,
/// `α_k ~ N(0, 1)`, `y = 1(βᵀx + α_k + ε > 0)`. `L` (3×3, standard normal
/// entries) and `d ~ U(0.5, 1.5)` are drawn from the `DgpSpec` seed.
fn gen_probit_re(spec: &DgpSpec) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = Matrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let du = Uniform::new(0.5, 1.5).expect("valid range");
    let mut cov = l.matmul(&l.transpose());
    for i in 0..3 {
        cov[(i, i)] += du.sample(&mut rng);
    }
    let cov: Vec<Vec<f64>> = (0..3).map(|i| cov.row(i).to_vec()).collect();
    let factor = cov_factor(&cov)?;
    let bn = Normal::new(0.0, 10f64.sqrt()).expect("positive sd");
    let beta: Vec<f64> = (0..4).map(|_| bn.sample(&mut rng)).collect();
    let base: u64 = rng.random();
    let mut rows = Rows::new();
    let mut alpha = Vec::with_capacity(spec.k);
    for k in 0..spec.k {
        let mut g = group_rng(base, k);
        let a: f64 = g.sample(rand_distr::StandardNormal);
        for _ in 0..spec.even_split(k) {
            let x = correlated_row(&factor, &mut g);
            let mean: f64 = x.iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>() + a;
            let ystar = mean + g.sample::<f64, _>(rand_distr::StandardNormal);
            rows.push(k, x, mean, f64::from(u8::from(ystar > 0.0)));
        }
        alpha.push(vec![a]);
    }
    let (train, train_mean) = rows.into_dataset(4)?;
    Ok(SimulatedData {
        train,
        test: None,
        validation: None,
        train_mean,
        truth: TruthRecord {
            spec: spec.clone(),
            n_inputs: 4,
            input_cov: cov,
            hidden: Vec::new(),
            weights: Vec::new(),
            beta,
            noise_var: Some(1.0),
            re_var: vec![1.0],
            alpha,
        },
    })
}
