//! Posterior predictive evaluation of fitted DMMs, point metrics, and Lek
//! profiles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dmm::{BernoulliDmm, BernoulliLatent, GaussianDmm, MlpArchitecture, MlpWorkspace};
use crate::error::{Error, Result};
use crate::factor_gaussian::{ReparamNoise, VariationalParams};
use crate::linalg::Matrix;
use crate::model::{GroupedDataset, LatentModel};
use crate::scalar::{dot, Real};
use crate::special::{group_rng, norm_cdf, norm_log_pdf};

/// Probabilities entering the cross entropy are clipped to
/// `[PCE_CLIP, 1 − PCE_CLIP]`.
pub const PCE_CLIP: f64 = 1e-12;
pub const DEFAULT_J: usize = 200;
pub const DEFAULT_R: usize = 5;

/// Outer draws processed per parallel batch; fixed so results do not depend
/// on the thread count.
const DRAW_BATCH: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub j: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r2_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r2_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ls_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ls_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pce_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pce_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1_test: Option<f64>,
}

/// One row of the per-point dump. For Gaussian outputs `p_hat` is the
/// averaged predictive density at `y`; for binary outputs it is the averaged
/// success probability and `y_hat = 1(p_hat > 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub i: usize,
    pub group: usize,
    pub y: f64,
    pub y_hat: f64,
    pub p_hat: f64,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub report: MetricsReport,
    pub train_points: Vec<PointPrediction>,
    pub test_points: Vec<PointPrediction>,
}

pub fn r_squared(y: &[f64], y_hat: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> f64 {
    (y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Mean log predictive density.
pub fn log_score(p_hat: &[f64]) -> f64 {
    p_hat.iter().map(|p| p.ln()).sum::<f64>() / p_hat.len() as f64
}

/// Predictive cross entropy with probabilities clipped to
/// `[PCE_CLIP, 1 − PCE_CLIP]`.
pub fn pce(y: &[f64], p_hat: &[f64]) -> f64 {
    let total: f64 = y
        .iter()
        .zip(p_hat)
        .map(|(&y, &p)| {
            let p = p.clamp(PCE_CLIP, 1.0 - PCE_CLIP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -total / y.len() as f64
}

/// F1 score with `y = 1` as the positive class; zero when there are no true
/// positives.
pub fn f1_score(y: &[f64], y_hat: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&a, &b) in y.iter().zip(y_hat) {
        match (a > 0.5, b > 0.5) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fne += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fne) as f64
}

/// Head-specific pieces used by the predictive routines.
pub trait DmmHead<T: Real>: LatentModel<T> {
    fn architecture(&self) -> &MlpArchitecture;
    fn training_data(&self) -> &GroupedDataset<T>;
    /// `(w, β)` slices of `θ`.
    fn weights_and_beta<'a>(&self, theta: &'a [T]) -> Result<(&'a [T], &'a [T])>;
    /// Mean response given the linear predictor.
    fn link(&self, eta: f64) -> f64;
    /// Random effects for every training group: one conditional draw, or the
    /// conditional mean when `mean` is set.
    fn alpha_given_theta(&self, theta: &[T], mean: bool, draw_seed: u64) -> Result<Matrix<T>>;
}

impl<T: Real> DmmHead<T> for GaussianDmm<T> {
    fn architecture(&self) -> &MlpArchitecture {
        self.arch()
    }

    fn training_data(&self) -> &GroupedDataset<T> {
        self.data()
    }

    fn weights_and_beta<'a>(&self, theta: &'a [T]) -> Result<(&'a [T], &'a [T])> {
        let th = self.split(theta)?;
        Ok((th.w, th.beta))
    }

    fn link(&self, eta: f64) -> f64 {
        eta
    }

    fn alpha_given_theta(&self, theta: &[T], mean: bool, draw_seed: u64) -> Result<Matrix<T>> {
        if mean {
            let cond = self.alpha_conditionals(theta, self.data())?;
            let ml = self.arch().output_dim();
            let mut out = Matrix::zeros(cond.len(), ml);
            for (k, (m, _)) in cond.iter().enumerate() {
                out.row_mut(k).copy_from_slice(m);
            }
            Ok(out)
        } else {
            let mut rng = group_rng(draw_seed, 0);
            self.sample_latents(theta, &self.initial_latents(), &mut rng)
        }
    }
}

/// Gibbs configuration used when a Bernoulli head is evaluated.
#[derive(Clone, Debug)]
pub struct BernoulliEval<'a, T> {
    pub model: &'a BernoulliDmm<T>,
    /// Sweeps per outer draw.
    pub sweeps: usize,
    /// Warm start for every outer draw; the model's default when `None`.
    pub init: Option<&'a BernoulliLatent<T>>,
}

impl<T: Real> BernoulliEval<'_, T> {
    fn start(&self) -> BernoulliLatent<T> {
        self.init.cloned().unwrap_or_else(|| self.model.initial_latents())
    }
}

impl<T: Real> LatentModel<T> for BernoulliEval<'_, T> {
    type Latent = BernoulliLatent<T>;

    fn dim_theta(&self) -> usize {
        self.model.dim_theta()
    }

    fn initial_latents(&self) -> BernoulliLatent<T> {
        self.start()
    }

    fn sample_latents<R: rand::Rng + ?Sized>(
        &self,
        theta: &[T],
        prev: &BernoulliLatent<T>,
        rng: &mut R,
    ) -> Result<BernoulliLatent<T>> {
        self.model.gibbs_on(theta, self.model.data(), prev, self.sweeps, rng)
    }

    fn log_g_and_grad(&self, theta: &[T], z: &BernoulliLatent<T>) -> Result<(T, Vec<T>)> {
        self.model.log_g_and_grad(theta, z)
    }

    fn loglik_terms(&self, theta: &[T], z: &BernoulliLatent<T>) -> Result<crate::model::LoglikTerms<T>> {
        self.model.loglik_terms(theta, z)
    }
}

impl<T: Real> DmmHead<T> for BernoulliEval<'_, T> {
    fn architecture(&self) -> &MlpArchitecture {
        self.model.arch()
    }

    fn training_data(&self) -> &GroupedDataset<T> {
        self.model.data()
    }

    fn weights_and_beta<'a>(&self, theta: &'a [T]) -> Result<(&'a [T], &'a [T])> {
        let th = self.model.split(theta)?;
        Ok((th.w, th.beta))
    }

    fn link(&self, eta: f64) -> f64 {
        norm_cdf(eta)
    }

    /// `sweeps` Gibbs sweeps from the warm start; with `mean` set, a further
    /// `sweeps` single-sweep draws are averaged.
    fn alpha_given_theta(&self, theta: &[T], mean: bool, draw_seed: u64) -> Result<Matrix<T>> {
        let data = self.model.data();
        let mut rng = group_rng(draw_seed, 0);
        let mut z = self.model.gibbs_on(theta, data, &self.start(), self.sweeps, &mut rng)?;
        if !mean {
            return Ok(z.alpha);
        }
        let mut acc = Matrix::zeros(z.alpha.rows(), z.alpha.cols());
        for _ in 0..self.sweeps {
            z = self.model.gibbs_on(theta, data, &z, 1, &mut rng)?;
            acc.add_assign(&z.alpha);
        }
        acc.scale(T::one() / T::lit(self.sweeps as f64));
        Ok(acc)
    }
}

fn check_compatible<T: Real, H: DmmHead<T>>(head: &H, params: &VariationalParams<T>, data: &GroupedDataset<T>) -> Result<()> {
    if params.m() != head.dim_theta() {
        return Err(Error::Dimension {
            what: "checkpoint dim(theta)",
            expected: head.dim_theta(),
            got: params.m(),
        });
    }
    if data.n_inputs() != head.architecture().n_inputs() {
        return Err(Error::Dimension {
            what: "evaluation input columns",
            expected: head.architecture().n_inputs(),
            got: data.n_inputs(),
        });
    }
    if data.num_groups() > head.training_data().num_groups() {
        return Err(Error::Data(format!(
            "evaluation data has {} groups but the model was trained on {}",
            data.num_groups(),
            head.training_data().num_groups()
        )));
    }
    Ok(())
}

/// `η_i` for every row of `data`.
fn linear_predictor<T: Real>(
    arch: &MlpArchitecture,
    w: &[T],
    beta: &[T],
    alpha: &Matrix<T>,
    data: &GroupedDataset<T>,
) -> Vec<f64> {
    let mut ws = MlpWorkspace::new(arch);
    let mut coef = vec![T::zero(); beta.len()];
    let mut out = Vec::with_capacity(data.n());
    for k in 0..data.num_groups() {
        for ((c, &b), &a) in coef.iter_mut().zip(beta).zip(alpha.row(k)) {
            *c = b + a;
        }
        for i in data.group_range(k) {
            arch.forward_into(w, data.x().row(i), &mut ws);
            out.push(dot(ws.output(), &coef).as_f64());
        }
    }
    out
}

/// Running per-point sums over outer draws, reduced in draw order.
struct Accumulator {
    sum_mean: Vec<f64>,
    /// Log-sum-exp state of the per-draw log densities.
    lse_max: Vec<f64>,
    lse_sum: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            sum_mean: vec![0.0; n],
            lse_max: vec![f64::NEG_INFINITY; n],
            lse_sum: vec![0.0; n],
        }
    }

    fn add(&mut self, mean: &[f64], log_p: &[f64]) {
        for i in 0..mean.len() {
            self.sum_mean[i] += mean[i];
            let lp = log_p[i];
            if lp > self.lse_max[i] {
                self.lse_sum[i] = self.lse_sum[i] * (self.lse_max[i] - lp).exp() + 1.0;
                self.lse_max[i] = lp;
            } else {
                self.lse_sum[i] += (lp - self.lse_max[i]).exp();
            }
        }
    }

    fn mean(&self, j: usize) -> Vec<f64> {
        self.sum_mean.iter().map(|s| s / j as f64).collect()
    }

    fn p_hat(&self, j: usize) -> Vec<f64> {
        self.lse_max
            .iter()
            .zip(&self.lse_sum)
            .map(|(m, s)| (m + s.ln() - (j as f64).ln()).exp())
            .collect()
    }
}

/// Per-draw contribution for one dataset: `(mean output, log p(y_i))`.
type DrawOutput = (Vec<f64>, Vec<f64>);

fn run_draws<T, H, F>(head: &H, params: &VariationalParams<T>, sets: &[&GroupedDataset<T>], j: usize, seed: u64, score: F) -> Result<Vec<Accumulator>>
where
    T: Real,
    H: DmmHead<T>,
    F: Fn(&[T], f64, f64) -> (f64, f64) + Sync,
{
    if j == 0 {
        return Err(Error::Config("the number of outer draws J must be at least 1".into()));
    }
    let arch = head.architecture();
    let mut acc: Vec<Accumulator> = sets.iter().map(|d| Accumulator::new(d.n())).collect();
    let (m, p) = (params.m(), params.p());
    for start in (0..j).step_by(DRAW_BATCH) {
        let batch: Vec<Result<Vec<DrawOutput>>> = (start..(start + DRAW_BATCH).min(j))
            .into_par_iter()
            .map(|jj| {
                let mut rng = group_rng(seed, jj);
                let theta = params.sample_theta(&ReparamNoise::draw(m, p, &mut rng))?;
                let alpha = head.alpha_given_theta(&theta, false, rand::Rng::random(&mut rng))?;
                let (w, beta) = head.weights_and_beta(&theta)?;
                Ok(sets
                    .iter()
                    .map(|d| {
                        let eta = linear_predictor(arch, w, beta, &alpha, d);
                        eta.iter()
                            .zip(d.y())
                            .map(|(&e, &y)| score(&theta, e, y.as_f64()))
                            .unzip()
                    })
                    .collect())
            })
            .collect();
        for draw in batch {
            for (a, (mean, lp)) in acc.iter_mut().zip(draw?) {
                a.add(&mean, &lp);
            }
        }
    }
    Ok(acc)
}

fn points<T: Real>(data: &GroupedDataset<T>, y_hat: &[f64], p_hat: &[f64]) -> Vec<PointPrediction> {
    (0..data.n())
        .map(|i| PointPrediction {
            i,
            group: data.groups()[i],
            y: data.y()[i].as_f64(),
            y_hat: y_hat[i],
            p_hat: p_hat[i],
        })
        .collect()
}

fn y_f64<T: Real>(data: &GroupedDataset<T>) -> Vec<f64> {
    data.y().iter().map(|v| v.as_f64()).collect()
}

/// Gaussian DMM predictive evaluation on the training data and `test`, with
/// `J` outer draws `θʲ ~ q⁰` and exact conditional `αʲ | θʲ, y_train`.
pub fn predict_gaussian<T: Real>(
    params: &VariationalParams<T>,
    model: &GaussianDmm<T>,
    test: &GroupedDataset<T>,
    j: usize,
    seed: u64,
) -> Result<Prediction> {
    check_compatible(model, params, test)?;
    let eps_idx = model.layout().extra().start;
    let score = |theta: &[T], eta: f64, y: f64| (eta, norm_log_pdf(y, eta, theta[eps_idx].as_f64().exp()));
    let train = model.data();
    let acc = run_draws(model, params, &[train, test], j, seed, score)?;
    let mut report = MetricsReport {
        j,
        ..Default::default()
    };
    let mut dumps = Vec::new();
    for (idx, (data, a)) in [train, test].into_iter().zip(&acc).enumerate() {
        let y = y_f64(data);
        let y_hat = a.mean(j);
        let p_hat = a.p_hat(j);
        let (r2, rm, ls) = (r_squared(&y, &y_hat), rmse(&y, &y_hat), log_score(&p_hat));
        if idx == 0 {
            (report.r2_train, report.rmse_train, report.ls_train) = (Some(r2), Some(rm), Some(ls));
        } else {
            (report.r2_test, report.rmse_test, report.ls_test) = (Some(r2), Some(rm), Some(ls));
        }
        dumps.push(points(data, &y_hat, &p_hat));
    }
    let test_points = dumps.pop().expect("two datasets");
    let train_points = dumps.pop().expect("two datasets");
    Ok(Prediction {
        report,
        train_points,
        test_points,
    })
}

/// Bernoulli DMM predictive evaluation: per outer draw, `R` Gibbs sweeps over
/// `(α, y*_train)` then `pʲ_i = Φ(ηʲ_i)`.
pub fn predict_bernoulli<T: Real>(
    params: &VariationalParams<T>,
    eval: &BernoulliEval<'_, T>,
    test: &GroupedDataset<T>,
    j: usize,
    seed: u64,
) -> Result<Prediction> {
    if eval.sweeps == 0 {
        return Err(Error::Config("the number of Gibbs sweeps R must be at least 1".into()));
    }
    check_compatible(eval, params, test)?;
    if !test.is_binary() {
        return Err(Error::Data("Bernoulli evaluation needs 0/1 responses".into()));
    }
    let score = |_: &[T], eta: f64, _: f64| (norm_cdf(eta), 0.0);
    let train = eval.model.data();
    let acc = run_draws(eval, params, &[train, test], j, seed, score)?;
    let mut report = MetricsReport {
        j,
        r: Some(eval.sweeps),
        ..Default::default()
    };
    let mut dumps = Vec::new();
    for (idx, (data, a)) in [train, test].into_iter().zip(&acc).enumerate() {
        let y = y_f64(data);
        let p_hat = a.mean(j);
        let y_hat: Vec<f64> = p_hat.iter().map(|&p| f64::from(u8::from(p > 0.5))).collect();
        let (c, f) = (pce(&y, &p_hat), f1_score(&y, &y_hat));
        if idx == 0 {
            (report.pce_train, report.f1_train) = (Some(c), Some(f));
        } else {
            (report.pce_test, report.f1_test) = (Some(c), Some(f));
        }
        dumps.push(points(data, &y_hat, &p_hat));
    }
    let test_points = dumps.pop().expect("two datasets");
    let train_points = dumps.pop().expect("two datasets");
    Ok(Prediction {
        report,
        train_points,
        test_points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LekOptions {
    /// Average over `j` draws of `(θ, α)` instead of using posterior means.
    pub full_draws: bool,
    pub j: usize,
    pub seed: u64,
}

impl Default for LekOptions {
    fn default() -> Self {
        Self {
            full_draws: false,
            j: DEFAULT_J,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LekCurve {
    /// 1-based group id.
    pub group: usize,
    pub values: Vec<f64>,
}

/// Expected output of each group in `group_ids` along `grid` for input
/// column `input_index`, other inputs held at `reference_x`.
pub fn lek_profile<T: Real, H: DmmHead<T>>(
    params: &VariationalParams<T>,
    head: &H,
    input_index: usize,
    grid: &[f64],
    reference_x: &[f64],
    group_ids: &[usize],
    opts: &LekOptions,
) -> Result<Vec<LekCurve>> {
    let arch = head.architecture();
    if reference_x.len() != arch.n_inputs() {
        return Err(Error::Dimension {
            what: "reference input",
            expected: arch.n_inputs(),
            got: reference_x.len(),
        });
    }
    if input_index == 0 || input_index >= arch.n_inputs() {
        return Err(Error::Config(format!(
            "input index {input_index} must name a non-offset column in 1..{}",
            arch.n_inputs()
        )));
    }
    let k_total = head.training_data().num_groups();
    if let Some(&g) = group_ids.iter().find(|&&g| g == 0 || g > k_total) {
        return Err(Error::Data(format!("unknown group id {g} (model has groups 1..={k_total})")));
    }
    if params.m() != head.dim_theta() {
        return Err(Error::Dimension {
            what: "checkpoint dim(theta)",
            expected: head.dim_theta(),
            got: params.m(),
        });
    }
    let rows: Vec<Vec<T>> = grid
        .iter()
        .map(|&v| {
            let mut x: Vec<T> = reference_x.iter().map(|&r| T::lit(r)).collect();
            x[0] = T::one();
            x[input_index] = T::lit(v);
            x
        })
        .collect();
    let curve_values = |theta: &[T], alpha: &Matrix<T>| -> Result<Vec<Vec<f64>>> {
        let (w, beta) = head.weights_and_beta(theta)?;
        let mut ws = MlpWorkspace::new(arch);
        let h: Vec<Vec<T>> = rows
            .iter()
            .map(|x| {
                arch.forward_into(w, x, &mut ws);
                ws.output().to_vec()
            })
            .collect();
        Ok(group_ids
            .iter()
            .map(|&g| {
                let coef: Vec<T> = beta.iter().zip(alpha.row(g - 1)).map(|(&b, &a)| b + a).collect();
                h.iter().map(|hx| head.link(dot(hx, &coef).as_f64())).collect()
            })
            .collect())
    };
    let values = if opts.full_draws {
        if opts.j == 0 {
            return Err(Error::Config("the number of outer draws J must be at least 1".into()));
        }
        let (m, p) = (params.m(), params.p());
        let draws: Vec<Result<Vec<Vec<f64>>>> = (0..opts.j)
            .into_par_iter()
            .map(|jj| {
                let mut rng = group_rng(opts.seed, jj);
                let theta = params.sample_theta(&ReparamNoise::draw(m, p, &mut rng))?;
                let alpha = head.alpha_given_theta(&theta, false, rand::Rng::random(&mut rng))?;
                curve_values(&theta, &alpha)
            })
            .collect();
        let mut sum = vec![vec![0.0; grid.len()]; group_ids.len()];
        for d in draws {
            for (s, v) in sum.iter_mut().zip(d?) {
                s.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        sum.into_iter()
            .map(|v| v.into_iter().map(|x| x / opts.j as f64).collect())
            .collect()
    } else {
        let theta = params.mu().to_vec();
        let alpha = head.alpha_given_theta(&theta, true, opts.seed)?;
        curve_values(&theta, &alpha)?
    };
    Ok(group_ids
        .iter()
        .zip(values)
        .map(|(&group, values)| LekCurve { group, values })
        .collect())
}
