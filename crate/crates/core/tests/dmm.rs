use hybrid_vi::dmm::{
    cholesky_from_l, mlp_forward, Activation, BernoulliDmm, BernoulliLatent, GaussianDmm, MlpArchitecture,
};
use hybrid_vi::{GroupedDataset, LatentModel, Matrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> MlpArchitecture {
    MlpArchitecture::new(4, vec![3, 2], Activation::Relu).unwrap()
}

fn dataset(binary: bool, seed: u64) -> GroupedDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 30;
    let mut x = Matrix::zeros(n, 4);
    let mut y = Vec::new();
    let mut g = Vec::new();
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..4 {
            x[(i, j)] = rng.random_range(-1.5..1.5);
        }
        let v = x[(i, 1)] - 0.5 * x[(i, 2)] + rng.random_range(-1.0..1.0);
        y.push(if binary { (v > 0.0) as u8 as f64 } else { v });
        g.push(i % 4 + 1);
    }
    GroupedDataset::new(y, x, g).unwrap()
}

/// Independent forward pass: `h = [1; relu(W_l h)]` with `W_l` stored column-major.
fn oracle_forward(arch: &MlpArchitecture, w: &[f64], x: &[f64]) -> DVector<f64> {
    let mut h = DVector::from_column_slice(x);
    let mut off = 0;
    for &rows in arch.hidden() {
        let cols = h.len();
        let wl = DMatrix::from_column_slice(rows, cols, &w[off..off + rows * cols]);
        off += rows * cols;
        let a = (wl * &h).map(|v| v.max(0.0));
        h = DVector::from_iterator(rows + 1, std::iter::once(1.0).chain(a.iter().copied()));
    }
    h
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn fd_check<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], grad: &[f64], tol: f64) {
    let h = 1e-6;
    for i in 0..theta.len() {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[i] += h;
        tm[i] -= h;
        let fd = (f(&tp) - f(&tm)) / (2.0 * h);
        assert!(
            (fd - grad[i]).abs() <= tol * (1.0 + fd.abs()),
            "coordinate {i}: finite difference {fd} vs analytic {}",
            grad[i]
        );
    }
}

#[test]
fn forward_matches_dense_oracle() {
    let a = arch();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_vec(&mut rng, a.n_weights(), 1.0);
    let data = dataset(false, 1);
    for i in 0..data.n() {
        let got = mlp_forward(&a, &w, data.x().row(i)).unwrap();
        let want = oracle_forward(&a, &w, data.x().row(i));
        for (g, v) in got.iter().zip(want.iter()) {
            assert!((g - v).abs() < 1e-12);
        }
    }
}

#[test]
fn gaussian_gradient_matches_finite_differences() {
    let a = arch();
    let model = GaussianDmm::new(a.clone(), dataset(false, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let theta = random_vec(&mut rng, model.dim_theta(), 0.6);
    let alpha = Matrix::from_fn(4, 3, |_, _| rng.random_range(-0.5..0.5));
    let (_, grad) = model.log_g_and_grad(&theta, &alpha).unwrap();
    fd_check(|t| model.log_g_and_grad(t, &alpha).unwrap().0, &theta, &grad, 1e-5);
}

#[test]
fn gaussian_log_g_matches_oracle() {
    let a = arch();
    let data = dataset(false, 5);
    let model = GaussianDmm::new(a.clone(), data.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let theta = random_vec(&mut rng, model.dim_theta(), 0.6);
    let alpha = Matrix::from_fn(4, 3, |_, _| rng.random_range(-0.5..0.5));
    let lay = model.layout();
    let w = &theta[lay.w()];
    let beta = DVector::from_column_slice(&theta[lay.beta()]);
    let te = theta[lay.extra().start];
    let s2 = te.exp();
    let mut ll = 0.0;
    for k in 0..4 {
        let ak = DVector::from_column_slice(alpha.row(k));
        for i in data.group_range(k) {
            let h = oracle_forward(&a, w, data.x().row(i));
            let r = data.y()[i] - h.dot(&(&beta + &ak));
            ll += -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + r * r / s2);
        }
    }
    let terms = model.loglik_terms(&theta, &alpha).unwrap();
    assert!((terms.log_lik - ll).abs() < 1e-9 * ll.abs().max(1.0));

    // log N(α_k; 0, (LLᵀ)⁻¹) via a dense Cholesky of the precision.
    let lower = cholesky_from_l(&theta[lay.l()]).unwrap();
    let lm = DMatrix::from_fn(3, 3, |i, j| lower[(i, j)]);
    let prec = &lm * lm.transpose();
    let logdet = prec.clone().cholesky().unwrap().l().diagonal().map(|v| v.ln()).sum() * 2.0;
    let mut la = 0.0;
    for k in 0..4 {
        let ak = DVector::from_column_slice(alpha.row(k));
        la += -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() - logdet + (ak.transpose() * &prec * &ak)[0]);
    }
    let (log_g, _) = model.log_g_and_grad(&theta, &alpha).unwrap();
    assert!((log_g - (ll + la + terms.log_prior)).abs() < 1e-8 * log_g.abs().max(1.0));
}

#[test]
fn gaussian_alpha_draws_match_conditional_moments() {
    let a = arch();
    let data = dataset(false, 8);
    let model = GaussianDmm::new(a.clone(), data.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = random_vec(&mut rng, model.dim_theta(), 0.5);
    let lay = model.layout();
    let w = &theta[lay.w()];
    let beta = DVector::from_column_slice(&theta[lay.beta()]);
    let s2 = theta[lay.extra().start].exp();
    let lower = cholesky_from_l(&theta[lay.l()]).unwrap();
    let lm = DMatrix::from_fn(3, 3, |i, j| lower[(i, j)]);

    // Group 0 conditional: P = LLᵀ + HᵀH/σ², mean = P⁻¹Hᵀ(y − Hβ)/σ².
    let rows: Vec<usize> = data.group_range(0).collect();
    let hmat = DMatrix::from_fn(rows.len(), 3, |r, c| oracle_forward(&a, w, data.x().row(rows[r]))[c]);
    let yk = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.y()[i]));
    let prec = &lm * lm.transpose() + hmat.transpose() * &hmat / s2;
    let cov = prec.clone().try_inverse().unwrap();
    let mean = &cov * hmat.transpose() * (yk - &hmat * &beta) / s2;

    let n = 20000;
    let mut sum = DVector::zeros(3);
    let mut sq = DMatrix::zeros(3, 3);
    let prev = model.initial_latents();
    for _ in 0..n {
        let z = model.sample_latents(&theta, &prev, &mut rng).unwrap();
        let v = DVector::from_column_slice(z.row(0));
        sum += &v;
        sq += &v * v.transpose();
    }
    let m_hat = sum / n as f64;
    let c_hat = sq / n as f64 - &m_hat * m_hat.transpose();
    for i in 0..3 {
        let se = (cov[(i, i)] / n as f64).sqrt();
        assert!((m_hat[i] - mean[i]).abs() < 5.0 * se, "mean {i}");
        for j in 0..3 {
            let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
            assert!((c_hat[(i, j)] - cov[(i, j)]).abs() < 0.05 * scale, "cov {i},{j}");
        }
    }
}

#[test]
fn bernoulli_gradient_matches_finite_differences() {
    let a = arch();
    let data = dataset(true, 9);
    let model = BernoulliDmm::new(a, data.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let theta = random_vec(&mut rng, model.dim_theta(), 0.6);
    let z = BernoulliLatent {
        alpha: Matrix::from_fn(4, 3, |_, _| rng.random_range(-0.5..0.5)),
        ystar: data.y().iter().map(|&y| if y > 0.5 { 0.7 } else { -0.4 }).collect(),
    };
    let (_, grad) = model.log_g_and_grad(&theta, &z).unwrap();
    fd_check(|t| model.log_g_and_grad(t, &z).unwrap().0, &theta, &grad, 1e-5);
}

#[test]
fn bernoulli_gibbs_keeps_signs_and_is_reproducible() {
    let a = arch();
    let data = dataset(true, 10);
    let model = BernoulliDmm::new(a, data.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = random_vec(&mut rng, model.dim_theta(), 0.5);
    let z0 = model.initial_latents();
    let z1 = model.sample_latents(&theta, &z0, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let z2 = model.sample_latents(&theta, &z0, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    assert_eq!(z1, z2);
    for (&ys, &y) in z1.ystar.iter().zip(data.y()) {
        assert_eq!(ys > 0.0, y > 0.5);
    }
}

#[test]
fn bernoulli_loglik_is_probit() {
    let a = arch();
    let data = dataset(true, 10);
    let model = BernoulliDmm::new(a.clone(), data.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let theta = random_vec(&mut rng, model.dim_theta(), 0.5);
    let z = model.initial_latents();
    let lay = model.layout();
    let beta = DVector::from_column_slice(&theta[lay.beta()]);
    let normal = statrs::distribution::Normal::standard();
    use statrs::distribution::ContinuousCDF;
    let mut ll = 0.0;
    for i in 0..data.n() {
        let eta = oracle_forward(&a, &theta[lay.w()], data.x().row(i)).dot(&beta);
        let p = normal.cdf(eta);
        ll += if data.y()[i] > 0.5 { p.ln() } else { (1.0 - p).ln() };
    }
    let got = model.loglik_terms(&theta, &z).unwrap().log_lik;
    assert!((got - ll).abs() < 1e-9 * ll.abs());
}

#[test]
fn design_without_offset_is_rejected() {
    let data = dataset(false, 1);
    let mut x = data.x().clone();
    x[(0, 0)] = 0.5;
    let bad = GroupedDataset::new(data.y().to_vec(), x, data.groups().to_vec()).unwrap();
    assert!(GaussianDmm::new(arch(), bad).is_err());
}
