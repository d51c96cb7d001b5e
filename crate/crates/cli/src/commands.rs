use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hybrid_vi::dmm::{BernoulliDmm, BernoulliLatent, BernoulliPriors, GaussianDmm};
use hybrid_vi::evaluate::{self, BernoulliEval, LekOptions, MetricsReport, Prediction};
use hybrid_vi::io::{self, OutputStamp};
use hybrid_vi::models::{LinearReModel, ProbitReModel};
use hybrid_vi::simulate::{DgpSpec, Example};
use hybrid_vi::{fit as run_fit, ElboTrace, GroupedDataset, LatentModel, Matrix, Mode, ParamsRecord, TrainConfig, VariationalParams};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, ExperimentConfig, Family, ModelSpec};
use crate::{CompareArgs, ConfigError, EvaluateArgs, FitArgs, LekArgs, SimulateArgs};

/// Latent state kept with a Bernoulli DMM fit to warm-start evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub alpha: Vec<Vec<f64>>,
    pub ystar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(flatten)]
    pub params: ParamsRecord,
    pub model: ModelSpec,
    pub n_inputs: usize,
    pub train_data: PathBuf,
    pub mode: Mode,
    pub steps: usize,
    pub final_elbo_avg100: f64,
    pub max_cg_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<LatentRecord>,
    #[serde(default, skip_serializing)]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing)]
    pub seed: Option<u64>,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn read_dataset(path: &Path) -> Result<GroupedDataset<f64>> {
    if !path.is_file() {
        bail!(config_err(format!("dataset {} does not exist", path.display())));
    }
    Ok(io::read_dataset_csv(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let canon = DgpSpec::canonical(a.example, a.seed);
    let spec = DgpSpec {
        k: a.k.unwrap_or(canon.k),
        ratio: a.ratio.unwrap_or(canon.ratio),
        train_per_group: a.train_per_group.unwrap_or(canon.train_per_group),
        test_per_group: a.test_per_group.unwrap_or(canon.test_per_group),
        validation_per_group: a.validation_per_group.unwrap_or(canon.validation_per_group),
        ..canon
    };
    spec.validate()?;
    let sim = spec.generate()?;
    let stamp = OutputStamp {
        config_hash: config_hash(&spec)?,
        seed: a.seed,
    };
    create_dir(&a.out_dir)?;
    let name = a.example.to_string();
    let out = |suffix: &str| a.out_dir.join(format!("{name}_{suffix}"));
    io::write_dataset_csv(&out("train.csv"), &sim.train, &stamp)?;
    if let Some(t) = &sim.test {
        io::write_dataset_csv(&out("test.csv"), t, &stamp)?;
    }
    if let Some(v) = &sim.validation {
        io::write_dataset_csv(&out("validation.csv"), v, &stamp)?;
    }
    io::write_json(&out("truth.json"), &sim.truth, &stamp)?;
    info!(
        "{name}: {} training rows in {} groups written to {}",
        sim.train.n(),
        sim.train.num_groups(),
        a.out_dir.display()
    );
    Ok(())
}

fn resolve_fit_config(a: &FitArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let (Some(family), Some(train), Some(out_dir)) = (a.family, &a.train, &a.out_dir) else {
                bail!(config_err("without --config, --family, --train and --out-dir are required"));
            };
            ExperimentConfig {
                model: ModelSpec {
                    family,
                    hidden: Vec::new(),
                    activation: Default::default(),
                    sweeps: 5,
                },
                train: train.clone(),
                test: None,
                train_config: TrainConfig::default(),
                eval: Default::default(),
                out_dir: out_dir.clone(),
            }
        }
    };
    if let Some(f) = a.family {
        cfg.model.family = f;
    }
    if let Some(h) = &a.hidden {
        cfg.model.hidden = h.clone();
    }
    if let Some(p) = &a.train {
        cfg.train = p.clone();
    }
    if let Some(p) = &a.test {
        cfg.test = Some(p.clone());
    }
    if let Some(p) = &a.out_dir {
        cfg.out_dir = p.clone();
    }
    let tc = &mut cfg.train_config;
    if let Some(v) = a.mode {
        tc.mode = v;
    }
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.p {
        tc.p = v;
    }
    if let Some(v) = a.delta {
        tc.damping.delta = v;
    }
    if let Some(v) = a.a_m {
        tc.a_m = v;
    }
    if let Some(v) = a.trace_every {
        tc.trace_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A finished fit, independent of the model family.
pub struct Fitted {
    pub params: VariationalParams<f64>,
    pub trace: ElboTrace,
    pub max_cg_iterations: usize,
    pub latents: Option<LatentRecord>,
    pub seconds: f64,
}

fn fit_model<M: LatentModel<f64>>(model: &M, tc: &TrainConfig) -> Result<(Fitted, M::Latent)> {
    let start = Instant::now();
    let init = tc.initial_params(model.dim_theta());
    let r = run_fit(model, init, tc)?;
    Ok((
        Fitted {
            params: r.params,
            trace: r.trace,
            max_cg_iterations: r.max_cg_iterations,
            latents: None,
            seconds: start.elapsed().as_secs_f64(),
        },
        r.latents,
    ))
}

fn latent_record(z: &BernoulliLatent<f64>) -> LatentRecord {
    LatentRecord {
        alpha: (0..z.alpha.rows()).map(|k| z.alpha.row(k).to_vec()).collect(),
        ystar: z.ystar.clone(),
    }
}

fn bernoulli_model(spec: &ModelSpec, data: GroupedDataset<f64>) -> Result<BernoulliDmm<f64>> {
    let arch = spec.architecture(data.n_inputs())?;
    Ok(BernoulliDmm::with_priors(arch, data, BernoulliPriors::default(), spec.sweeps)?)
}

/// Fits `spec` on `data`; the only family-specific part of `fit`/`compare`.
pub fn fit_family(spec: &ModelSpec, data: GroupedDataset<f64>, tc: &TrainConfig) -> Result<Fitted> {
    match spec.family {
        Family::LinearRe => Ok(fit_model(&LinearReModel::new(data), tc)?.0),
        Family::ProbitRe => {
            let model = ProbitReModel::with_priors(data, Default::default(), spec.sweeps)?;
            Ok(fit_model(&model, tc)?.0)
        }
        Family::GaussianDmm => {
            let arch = spec.architecture(data.n_inputs())?;
            Ok(fit_model(&GaussianDmm::new(arch, data)?, tc)?.0)
        }
        Family::BernoulliDmm => {
            let model = bernoulli_model(spec, data)?;
            let (mut f, z) = fit_model(&model, tc)?;
            f.latents = Some(latent_record(&z));
            Ok(f)
        }
    }
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let cfg = resolve_fit_config(a)?;
    let train = read_dataset(&cfg.train)?;
    if let Some(t) = &cfg.test {
        read_dataset(t)?;
    }
    if matches!(cfg.model.family, Family::ProbitRe | Family::BernoulliDmm) && !train.is_binary() {
        bail!(config_err(format!("{}: binary families need 0/1 responses", cfg.train.display())));
    }
    let stamp = cfg.stamp()?;
    let n_inputs = train.n_inputs();
    let tc = cfg.train_config.clone();
    info!("fitting {:?} ({:?}, {} steps, p = {})", cfg.model.family, tc.mode, tc.steps, tc.p);
    let f = fit_family(&cfg.model, train, &tc)?;
    info!("done in {:.1}s, max CG iterations {}", f.seconds, f.max_cg_iterations);

    create_dir(&cfg.out_dir)?;
    let ckpt = Checkpoint {
        params: f.params.to_record(),
        model: cfg.model.clone(),
        n_inputs,
        train_data: cfg.train.clone(),
        mode: tc.mode,
        steps: tc.steps,
        final_elbo_avg100: f.trace.final_elbo_avg100,
        max_cg_iterations: f.max_cg_iterations,
        latents: f.latents,
        config_hash: None,
        seed: None,
    };
    io::write_json(&cfg.out_dir.join("config.json"), &cfg, &stamp)?;
    io::write_trace_csv(&cfg.out_dir.join("trace.csv"), &f.trace.records, &stamp)?;
    io::write_json(&cfg.out_dir.join("checkpoint.json"), &ckpt, &stamp)?;
    println!("final_elbo_avg100 {}", f.trace.final_elbo_avg100);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!(config_err(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(io::read_json(path)?)
}

fn alpha_matrix(rec: &LatentRecord) -> Result<Matrix<f64>> {
    let rows = rec.alpha.len();
    let cols = rec.alpha.first().map_or(0, Vec::len);
    Ok(Matrix::from_row_major(rows, cols, rec.alpha.concat())?)
}

fn checkpoint_train(ck: &Checkpoint, override_path: Option<&PathBuf>) -> Result<GroupedDataset<f64>> {
    let path = override_path.unwrap_or(&ck.train_data);
    let data = read_dataset(path)?;
    if data.n_inputs() != ck.n_inputs {
        bail!(config_err(format!(
            "{} has {} input columns, checkpoint expects {}",
            path.display(),
            data.n_inputs(),
            ck.n_inputs
        )));
    }
    Ok(data)
}

/// Predictive evaluation of a DMM checkpoint.
pub fn predict(
    ck: &Checkpoint,
    train: GroupedDataset<f64>,
    test: &GroupedDataset<f64>,
    j: usize,
    r: usize,
    seed: u64,
) -> Result<Prediction> {
    let params = VariationalParams::<f64>::from_record(&ck.params)?;
    match ck.model.family {
        Family::GaussianDmm => {
            let model = GaussianDmm::new(ck.model.architecture(train.n_inputs())?, train)?;
            Ok(evaluate::predict_gaussian(&params, &model, test, j, seed)?)
        }
        Family::BernoulliDmm => {
            let model = bernoulli_model(&ck.model, train)?;
            let init = match &ck.latents {
                Some(rec) if rec.ystar.len() == model.data().n() => Some(BernoulliLatent {
                    alpha: alpha_matrix(rec)?,
                    ystar: rec.ystar.clone(),
                }),
                _ => None,
            };
            let eval = BernoulliEval {
                model: &model,
                sweeps: r,
                init: init.as_ref(),
            };
            Ok(evaluate::predict_bernoulli(&params, &eval, test, j, seed)?)
        }
        other => bail!(config_err(format!("predictive evaluation is defined for DMM families, not {other:?}"))),
    }
}

#[derive(Serialize)]
struct EvalRun<'a> {
    checkpoint_hash: Option<&'a str>,
    data: &'a Path,
    j: usize,
    r: usize,
    seed: u64,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (j, r) = (a.j.unwrap_or(evaluate::DEFAULT_J), a.r.unwrap_or(evaluate::DEFAULT_R));
    if j == 0 || r == 0 {
        bail!(config_err("--J and --R must be at least 1"));
    }
    let train = checkpoint_train(&ck, a.train.as_ref())?;
    let test = read_dataset(&a.data)?;
    let stamp = OutputStamp {
        config_hash: config_hash(&EvalRun {
            checkpoint_hash: ck.config_hash.as_deref(),
            data: &a.data,
            j,
            r,
            seed: a.seed,
        })?,
        seed: a.seed,
    };
    let pred = predict(&ck, train, &test, j, r, a.seed)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("metrics.json"));
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    io::write_json(&out, &pred.report, &stamp)?;
    if a.dump_points {
        io::write_points_csv(&dir.join("train_points.csv"), &pred.train_points, &stamp)?;
        io::write_points_csv(&dir.join("test_points.csv"), &pred.test_points, &stamp)?;
    }
    println!("{}", serde_json::to_string_pretty(&pred.report)?);
    Ok(())
}

fn example_model(example: Example) -> ModelSpec {
    let (family, hidden) = match example {
        Example::Ex1 => (Family::LinearRe, vec![]),
        Example::ProbitRe => (Family::ProbitRe, vec![]),
        Example::Ex2a => (Family::GaussianDmm, vec![5, 5]),
        Example::Ex2b => (Family::GaussianDmm, vec![32, 16]),
        Example::Ex3 => (Family::BernoulliDmm, vec![5, 5]),
    };
    ModelSpec {
        family,
        hidden,
        activation: Default::default(),
        sweeps: 5,
    }
}

/// Factors used per example when `--p` is not given.
fn example_p(example: Example) -> usize {
    match example {
        Example::Ex3 => 1,
        _ => 3,
    }
}

#[derive(Clone, Debug)]
struct CompareRow {
    seed: u64,
    mode: Mode,
    elbo: f64,
    seconds: f64,
    max_cg: usize,
    metrics: Option<MetricsReport>,
}

fn compare_seed(a: &CompareArgs, seed: u64) -> Result<Vec<CompareRow>> {
    let canon = DgpSpec::canonical(a.example, seed);
    let spec = DgpSpec {
        k: a.k.unwrap_or(canon.k),
        ..canon
    };
    let sim = spec.generate()?;
    let model = example_model(a.example);
    let mut rows = Vec::new();
    for mode in [Mode::Natural, Mode::Ordinary] {
        let tc = TrainConfig {
            steps: a.steps,
            mode,
            p: a.p.unwrap_or_else(|| example_p(a.example)),
            seed,
            ..TrainConfig::default()
        };
        let f = fit_family(&model, sim.train.clone(), &tc)?;
        let metrics = match &sim.test {
            Some(test) if model.family.is_dmm() => {
                let ck = Checkpoint {
                    params: f.params.to_record(),
                    model: model.clone(),
                    n_inputs: sim.train.n_inputs(),
                    train_data: PathBuf::new(),
                    mode,
                    steps: a.steps,
                    final_elbo_avg100: f.trace.final_elbo_avg100,
                    max_cg_iterations: f.max_cg_iterations,
                    latents: f.latents.clone(),
                    config_hash: None,
                    seed: None,
                };
                Some(predict(&ck, sim.train.clone(), test, a.j, evaluate::DEFAULT_R, seed)?.report)
            }
            _ => None,
        };
        info!("seed {seed} {mode:?}: ELBO {:.2} in {:.1}s", f.trace.final_elbo_avg100, f.seconds);
        rows.push(CompareRow {
            seed,
            mode,
            elbo: f.trace.final_elbo_avg100,
            seconds: f.seconds,
            max_cg: f.max_cg_iterations,
            metrics,
        });
    }
    Ok(rows)
}

const METRIC_COLUMNS: [&str; 10] = [
    "r2_train", "r2_test", "rmse_train", "rmse_test", "ls_train", "ls_test", "pce_train", "pce_test", "f1_train",
    "f1_test",
];

fn metric_values(m: &MetricsReport) -> [Option<f64>; 10] {
    [
        m.r2_train,
        m.r2_test,
        m.rmse_train,
        m.rmse_test,
        m.ls_train,
        m.ls_test,
        m.pce_train,
        m.pce_test,
        m.f1_train,
        m.f1_test,
    ]
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Natural => "natural",
        Mode::Ordinary => "ordinary",
    }
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    if a.seeds.is_empty() {
        bail!(config_err("--seeds must list at least one seed"));
    }
    let probe = TrainConfig {
        steps: a.steps,
        p: a.p.unwrap_or_else(|| example_p(a.example)),
        ..TrainConfig::default()
    };
    probe.validate()?;
    if a.j == 0 {
        bail!(config_err("--J must be at least 1"));
    }
    for &s in &a.seeds {
        DgpSpec {
            k: a.k.unwrap_or(DgpSpec::canonical(a.example, s).k),
            ..DgpSpec::canonical(a.example, s)
        }
        .validate()?;
    }

    let per_seed: Vec<Result<Vec<CompareRow>>> = if a.parallel_seeds {
        std::thread::scope(|scope| {
            let handles: Vec<_> = a.seeds.iter().map(|&s| scope.spawn(move || compare_seed(a, s))).collect();
            handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
        })
    } else {
        a.seeds.iter().map(|&s| compare_seed(a, s)).collect()
    };
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }

    #[derive(Serialize)]
    struct CompareRun<'a> {
        example: String,
        seeds: &'a [u64],
        steps: usize,
        k: Option<usize>,
        p: Option<usize>,
        j: usize,
    }
    let stamp = OutputStamp {
        config_hash: config_hash(&CompareRun {
            example: a.example.to_string(),
            seeds: &a.seeds,
            steps: a.steps,
            k: a.k,
            p: a.p,
            j: a.j,
        })?,
        seed: a.seeds[0],
    };

    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut text = format!("{}\nexample,seed,mode,final_elbo_avg100,fit_seconds,max_cg_iterations", stamp.header_line());
    for c in METRIC_COLUMNS {
        write!(text, ",{c}")?;
    }
    text.push('\n');
    for r in &rows {
        write!(
            text,
            "{},{},{},{},{},{}",
            a.example,
            r.seed,
            mode_name(r.mode),
            r.elbo,
            r.seconds,
            r.max_cg
        )?;
        let vals = r.metrics.as_ref().map(metric_values).unwrap_or([None; 10]);
        for v in vals {
            write!(text, ",{}", fmt(v))?;
        }
        text.push('\n');
    }
    let modes: &[Mode] = if a.seeds.len() > 1 { &[Mode::Natural, Mode::Ordinary] } else { &[] };
    for &mode in modes {
        let sel: Vec<&CompareRow> = rows.iter().filter(|r| r.mode == mode).collect();
        let n = sel.len() as f64;
        let mean = |f: &dyn Fn(&CompareRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        write!(
            text,
            "{},mean,{},{},{},{}",
            a.example,
            mode_name(mode),
            mean(&|r| r.elbo),
            mean(&|r| r.seconds),
            sel.iter().map(|r| r.max_cg).max().unwrap_or(0)
        )?;
        for c in 0..METRIC_COLUMNS.len() {
            let vals: Option<Vec<f64>> = sel
                .iter()
                .map(|r| r.metrics.as_ref().and_then(|m| metric_values(m)[c]))
                .collect();
            write!(text, ",{}", fmt(vals.map(|v| v.iter().sum::<f64>() / n)))?;
        }
        text.push('\n');
    }
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join(format!("compare_{}.csv", a.example));
    let tmp = path.with_extension("csv.partial");
    std::fs::write(&tmp, &text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, &path)?;
    print!("{text}");
    Ok(())
}

pub fn lek(a: &LekArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if !ck.model.family.is_dmm() {
        bail!(config_err("Lek profiles need a DMM checkpoint"));
    }
    if a.input < 2 || a.input > ck.n_inputs {
        bail!(config_err(format!(
            "--input {} must name a covariate column x2..x{}",
            a.input, ck.n_inputs
        )));
    }
    if a.reference.len() != ck.n_inputs {
        bail!(config_err(format!(
            "--reference has {} values, checkpoint has {} inputs",
            a.reference.len(),
            ck.n_inputs
        )));
    }
    if a.j == 0 || a.r == 0 {
        bail!(config_err("--J and --R must be at least 1"));
    }
    let train = checkpoint_train(&ck, a.train.as_ref())?;
    let params = VariationalParams::<f64>::from_record(&ck.params)?;
    let opts = LekOptions {
        full_draws: a.full_draws,
        j: a.j,
        seed: a.seed,
    };
    let idx = a.input - 1;
    let grid = &a.grid.0;
    let curves = match ck.model.family {
        Family::GaussianDmm => {
            let model = GaussianDmm::new(ck.model.architecture(train.n_inputs())?, train)?;
            evaluate::lek_profile(&params, &model, idx, grid, &a.reference, &a.groups, &opts)?
        }
        _ => {
            let model = bernoulli_model(&ck.model, train)?;
            let init = match &ck.latents {
                Some(rec) if rec.ystar.len() == model.data().n() => Some(BernoulliLatent {
                    alpha: alpha_matrix(rec)?,
                    ystar: rec.ystar.clone(),
                }),
                _ => None,
            };
            let eval = BernoulliEval {
                model: &model,
                sweeps: a.r,
                init: init.as_ref(),
            };
            evaluate::lek_profile(&params, &eval, idx, grid, &a.reference, &a.groups, &opts)?
        }
    };

    #[derive(Serialize)]
    struct LekRun<'a> {
        checkpoint_hash: Option<&'a str>,
        input: usize,
        grid: &'a [f64],
        reference: &'a [f64],
        groups: &'a [usize],
        opts: &'a LekOptions,
        r: usize,
    }
    let stamp = OutputStamp {
        config_hash: config_hash(&LekRun {
            checkpoint_hash: ck.config_hash.as_deref(),
            input: a.input,
            grid,
            reference: &a.reference,
            groups: &a.groups,
            opts: &opts,
            r: a.r,
        })?,
        seed: a.seed,
    };
    let mut text = format!("{}\ngroup,x,value\n", stamp.header_line());
    for c in &curves {
        for (x, v) in grid.iter().zip(&c.values) {
            writeln!(text, "{},{x},{v}", c.group)?;
        }
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let tmp = a.out.with_extension("partial");
    std::fs::write(&tmp, &text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, &a.out)?;
    Ok(())
}
