//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion does.
//!
//! Criteria 3-5 fit several hundred posteriors and take a while on one core.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_distr::{Bernoulli, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use capreg::cli::FitReport;
use capreg::evaluate::{coverage_experiment, dfd_accuracy_experiment, Scenario};
use capreg::ingest::{self, effective_sample_size};
use capreg::model::{
    log_posterior, log_posterior_and_grad, whiten, ExpandedState, Hyperparameters, StateDims,
    Subject, TimeSeriesDataset, WhitenedDataset,
};
use capreg::sampler::{fit, HmcConfig};
use capreg::selection::log_dfd;
use capreg::simulate::{simulate_general, simulate_p5, true_tangent_intercept};
use capreg::spd::{
    macg_log_density, orthonormality_error, polar_factor, sample_haar_orthonormal,
    standard_normal_matrix, Matrix, SpdMatrix, Vector,
};
use capreg::stats::{chain_ess, mean};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn random_spd(p: usize, rng: &mut Xoshiro256PlusPlus) -> Matrix {
    let g = standard_normal_matrix(p, p, rng);
    &g * g.transpose() + Matrix::identity(p, p)
}

fn c1_gradient() -> Verdict {
    let start = Instant::now();
    let (data, _) = simulate_p5(10, 5, 2024).unwrap();
    let white = whiten(&data, 0.0).unwrap();
    let hyper = Hyperparameters::default_for(5);
    let dims = StateDims {
        p: 5,
        d: 2,
        n: 10,
        q: 3,
    };
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let state = ExpandedState {
            u: standard_normal_matrix(5, 2, &mut r),
            lambda: standard_normal_matrix(10, 2, &mut r),
            b: standard_normal_matrix(2, 3, &mut r) * 0.5,
            tau: 0.5 * r.sample::<f64, _>(StandardNormal),
        };
        let (_, grad) = log_posterior_and_grad(&state, &white, &hyper).unwrap();
        let g = Vector::from_vec(grad.to_vec());
        let x = state.to_vec();
        let mut fd = Vector::zeros(x.len());
        for i in 0..x.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += h;
            down[i] -= h;
            let fu = log_posterior(
                &ExpandedState::from_slice(dims, &up).unwrap(),
                &white,
                &hyper,
            )
            .unwrap();
            let fl = log_posterior(
                &ExpandedState::from_slice(dims, &down).unwrap(),
                &white,
                &hyper,
            )
            .unwrap();
            fd[i] = (fu - fl) / (2.0 * h);
        }
        worst = worst.max((&fd - &g).norm() / g.norm().max(1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-5 && secs < 10.0,
        format!("max relative error {worst:.2e} over 20 states (limit 1e-5), {secs:.2} s"),
    )
}

fn c2_prior_recovery() -> Verdict {
    let start = Instant::now();
    let data = WhitenedDataset::prior_only(5, 3).unwrap();
    let hyper = Hyperparameters::default_for(5);
    let config = HmcConfig {
        seed: 7,
        ..HmcConfig::default()
    };
    let draws = match fit(&data, 2, &hyper, &config) {
        Ok(d) => d,
        Err(e) => return verdict(false, format!("prior-only fit failed: {e}")),
    };
    let series = |f: &dyn Fn(&capreg::sampler::Draw) -> f64| -> Vec<Vec<f64>> {
        draws
            .chains
            .iter()
            .map(|c| c.iter().map(f).collect())
            .collect()
    };
    let mut worst_z: f64 = 0.0;
    let mut notes = Vec::new();
    for k in 0..2 {
        for j in 0..3 {
            let chains = series(&|d| d.state.b[(k, j)]);
            let all = chains.concat();
            let m = mean(&all);
            let sd = (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).sqrt();
            let ess_mean = chain_ess(&chains);
            let squares: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.iter().map(|v| v * v).collect())
                .collect();
            let ess_sq = chain_ess(&squares);
            let z_mean = m.abs() / (2.5 / ess_mean.sqrt());
            let z_sd = (sd - 2.5).abs() / (2.5 / (2.0 * ess_sq).sqrt());
            worst_z = worst_z.max(z_mean).max(z_sd);
            notes.push(format!("B{}{}={m:+.3}/{sd:.3}", k + 1, j + 1));
        }
    }
    let chains = series(&|d| d.state.tau.exp());
    let all = chains.concat();
    let m = mean(&all);
    let z = (m - 1.0).abs() / (1.0 / chain_ess(&chains).sqrt());
    worst_z = worst_z.max(z);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_z <= 3.0 && secs < 60.0,
        format!(
            "max |z| {worst_z:.2} (limit 3); E[σ²]={m:.3}; mean/sd {}; {secs:.1} s",
            notes.join(" ")
        ),
    )
}

fn default_hmc() -> HmcConfig {
    HmcConfig::default()
}

fn c3_recovery() -> Verdict {
    let hyper = Hyperparameters::default_for(5);
    let seeds: Vec<u64> = (301..=310).collect();
    let mut ip = Vec::new();
    let mut mse = Vec::new();
    let mut failed = 0;
    for n in [50, 200] {
        let report =
            coverage_experiment(&Scenario::new(5, n, 40), &seeds, &hyper, &default_hmc()).unwrap();
        failed += report.failures.len();
        ip.push(report.mean("inner_product_1").unwrap_or(f64::NAN));
        mse.push(report.mean("beta_mse_1").unwrap_or(f64::NAN));
    }
    verdict(
        ip[1] >= 0.90 && ip[1] >= ip[0] && mse[1] < mse[0],
        format!(
            "|<γ̂,γ>|: n=50 {:.4}, n=200 {:.4}; MSE(β¹): n=50 {:.5}, n=200 {:.5}; failed replications {failed}",
            ip[0], ip[1], mse[0], mse[1]
        ),
    )
}

fn c4_coverage() -> Verdict {
    let hyper = Hyperparameters::default_for(5);
    let seeds: Vec<u64> = (401..=450).collect();
    let report =
        coverage_experiment(&Scenario::new(5, 100, 20), &seeds, &hyper, &default_hmc()).unwrap();
    let betas = ["beta_1_1", "beta_2_1", "beta_1_2", "beta_2_2"];
    let values: Vec<f64> = betas
        .iter()
        .map(|b| report.coverage.get(*b).copied().unwrap_or(f64::NAN))
        .collect();
    let pass = values.iter().all(|v| (0.80..=1.0).contains(v)) && report.succeeded() >= 2;
    let others: Vec<String> = report
        .coverage
        .iter()
        .filter(|(k, _)| !betas.contains(&k.as_str()))
        .map(|(k, v)| format!("{k}={v:.2}"))
        .collect();
    verdict(
        pass,
        format!(
            "β coverage (β₁¹, β₂¹, β₁², β₂²) = ({:.2}, {:.2}, {:.2}, {:.2}), band [0.80, 1.00]; {} of 50 replications succeeded; also {}",
            values[0],
            values[1],
            values[2],
            values[3],
            report.succeeded(),
            others.join(" ")
        ),
    )
}

fn c5_selection() -> Verdict {
    let hyper = Hyperparameters::default_for(5);
    let seeds: Vec<u64> = (501..=520).collect();
    let hmc = HmcConfig {
        warmup: 300,
        draws: 300,
        ..HmcConfig::default()
    };
    let report =
        dfd_accuracy_experiment(&Scenario::new(5, 400, 40), &seeds, 3, 1.5, &hyper, &hmc).unwrap();
    let chosen: Vec<usize> = report.replications.iter().map(|r| r.chosen_d).collect();
    verdict(
        report.proportion_correct >= 0.8,
        format!(
            "proportion choosing d=2: {:.2} (limit 0.80); choices {chosen:?}; failed {}{}",
            report.proportion_correct,
            report.failures.len(),
            report
                .failures
                .iter()
                .map(|f| format!(" [seed {}: {}]", f.seed, f.error))
                .collect::<String>()
        ),
    )
}

fn c6_dfd() -> Verdict {
    let mut r = rng(6);
    let mut min_value = f64::INFINITY;
    let mut diagonal_ok = true;
    for _ in 0..1000 {
        let d = r.random_range(1..=5);
        let n = r.random_range(1..=6);
        let hats: Vec<Matrix> = (0..n).map(|_| random_spd(d, &mut r)).collect();
        let counts: Vec<usize> = (0..n).map(|_| r.random_range(2..100)).collect();
        min_value = min_value.min(log_dfd(&hats, &counts).unwrap());
        let diag: Vec<Matrix> = hats
            .iter()
            .map(|h| Matrix::from_diagonal(&h.diagonal()))
            .collect();
        diagonal_ok &= log_dfd(&diag, &counts).unwrap() == 0.0;
    }
    let hat = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let worked = log_dfd(&[hat], &[10]).unwrap();
    let err = (worked - 10.0 * -(0.75f64.ln())).abs();
    verdict(
        min_value >= -1e-10 && diagonal_ok && err <= 1e-12,
        format!("min over 1000 batches {min_value:.3e}; diagonal batches exactly 0: {diagonal_ok}; worked example {worked:.12} (error {err:.1e})"),
    )
}

fn c7_whitening() -> Verdict {
    let mut worst: f64 = 0.0;
    for (p, n, t, seed) in [(5, 50, 10, 71), (5, 400, 40, 72), (20, 50, 10, 73)] {
        let (data, _) = if p == 5 {
            simulate_p5(n, t, seed).unwrap()
        } else {
            simulate_general(p, n, t, seed).unwrap()
        };
        let white = whiten(&data, 0.0).unwrap();
        let mut pooled = Matrix::zeros(p, p);
        for y in white.whitened() {
            pooled += y.transpose() * y / y.nrows() as f64;
        }
        pooled /= white.n() as f64;
        worst = worst.max((pooled - Matrix::identity(p, p)).norm());
    }
    verdict(
        worst <= 1e-8,
        format!("max ‖pooled − I‖_F = {worst:.2e} (limit 1e-8)"),
    )
}

fn c8_polar_macg() -> Verdict {
    let mut r = rng(8);
    let mut recon: f64 = 0.0;
    let mut ortho: f64 = 0.0;
    for _ in 0..1000 {
        let p = r.random_range(2..=8);
        let d = r.random_range(1..=p);
        let u = standard_normal_matrix(p, d, &mut r);
        let polar = polar_factor(&u).unwrap();
        recon = recon.max((polar.gamma.matrix() * &polar.stretch - &u).norm() / u.norm());
        ortho = ortho.max(orthonormality_error(polar.gamma.matrix()));
    }
    let mut scale: f64 = 0.0;
    for _ in 0..200 {
        let p = r.random_range(2..=8);
        let d = r.random_range(1..=p);
        let gamma = sample_haar_orthonormal(p, d, &mut r).unwrap();
        let psi = random_spd(p, &mut r);
        let c = (r.random_range(-2.0..2.0f64)).exp();
        let a = macg_log_density(&gamma, &SpdMatrix::new(psi.clone()).unwrap()).unwrap();
        let b = macg_log_density(&gamma, &SpdMatrix::new(psi * c).unwrap()).unwrap();
        scale = scale.max((a - b).abs());
    }
    let p = 5;
    let draws = 10_000;
    let mut second = Matrix::zeros(p, p);
    for _ in 0..draws {
        let g = sample_haar_orthonormal(p, 1, &mut r).unwrap().into_inner();
        second += &g * g.transpose();
    }
    second /= draws as f64;
    let pf = p as f64;
    let se_diag = (2.0 * (pf - 1.0) / (pf * pf * (pf + 2.0)) / draws as f64).sqrt();
    let se_off = (1.0 / (pf * (pf + 2.0)) / draws as f64).sqrt();
    let mut haar_z: f64 = 0.0;
    for i in 0..p {
        for j in 0..p {
            let (target, se) = if i == j {
                (1.0 / pf, se_diag)
            } else {
                (0.0, se_off)
            };
            haar_z = haar_z.max((second[(i, j)] - target).abs() / se);
        }
    }
    verdict(
        recon <= 1e-10 && ortho <= 1e-10 && scale <= 1e-12 && haar_z <= 3.0,
        format!("reconstruction {recon:.1e}, orthonormality {ortho:.1e}, MACG scale change {scale:.1e}, Haar E[γγᵀ] max |z| {haar_z:.2}"),
    )
}

fn single_series(values: Vec<f64>) -> TimeSeriesDataset {
    let t = values.len();
    TimeSeriesDataset::new(
        1,
        1,
        vec![Subject {
            id: "s".into(),
            signals: Matrix::from_vec(t, 1, values),
            covariates: Vector::from_vec(vec![1.0]),
        }],
    )
    .unwrap()
}

fn c9_ess() -> Verdict {
    let mut r = rng(9);
    let t = 100_000;
    let mut x = 0.0;
    let ar: Vec<f64> = (0..t)
        .map(|_| {
            x = 0.5 * x + r.sample::<f64, _>(StandardNormal);
            x
        })
        .collect();
    let ratio = effective_sample_size(&single_series(ar)).unwrap() as f64 / t as f64;
    let ar_ok = (ratio * 3.0 - 1.0).abs() <= 0.1;
    let wn: Vec<f64> = (0..t).map(|_| r.sample(StandardNormal)).collect();
    let wn_ratio = effective_sample_size(&single_series(wn)).unwrap() as f64 / t as f64;
    let mut short = Vec::new();
    for _ in 0..100 {
        let v: Vec<f64> = (0..500).map(|_| r.sample(StandardNormal)).collect();
        short.push(effective_sample_size(&single_series(v)).unwrap() as f64 / 500.0);
    }
    let short_mean = mean(&short);
    let below = short.iter().filter(|v| **v < 0.8).count();
    verdict(
        ar_ok && wn_ratio >= 0.8 && short_mean >= 0.8,
        format!(
            "AR(1) ESS/T {ratio:.4} (target 1/3 ± 10%); white noise T=1e5 ESS/T {wn_ratio:.4}; \
             100 trials at T=500: mean ESS/T {short_mean:.3}, {below} trials below 0.8"
        ),
    )
}

fn c10_intercept() -> Verdict {
    let (data, truth) = simulate_p5(50, 10, 10).unwrap();
    let white = whiten(&data, 0.0).unwrap();
    let via_module = true_tangent_intercept(&truth, white.sigma_star()).unwrap();
    let chol = Cholesky::new(white.sigma_star().matrix().clone()).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in via_module.iter().enumerate() {
        let g = truth.gamma.column(k).into_owned();
        let direct = truth.b[(k, 0)] + g.dot(&chol.solve(&g)).ln();
        worst = worst.max((v - direct).abs());
    }
    verdict(
        worst <= 1e-12,
        format!(
            "β₀* = ({:.6}, {:.6}); max deviation from direct identity {worst:.1e}",
            via_module[0], via_module[1]
        ),
    )
}

/// Fifteen-region signals with binary sleep and gender covariates and
/// strong serial correlation, fitted through the command-line binary after
/// thinning to the effective sample size.
fn hcp_shaped() -> Verdict {
    let start = Instant::now();
    let (p, n, t, rho) = (15, 100, 1200, 0.8);
    let mut r = rng(15);
    let basis = sample_haar_orthonormal(p, p, &mut r).unwrap().into_inner();
    let bern = Bernoulli::new(0.5).unwrap();
    let subjects: Vec<Subject> = (0..n)
        .map(|i| {
            let x = Vector::from_vec(vec![
                1.0,
                f64::from(u8::from(r.sample(bern))),
                f64::from(u8::from(r.sample(bern))),
            ]);
            let mut logvar = Vector::from_fn(p, |_, _| 0.5 * r.sample::<f64, _>(StandardNormal));
            logvar[0] += 0.8 * x[1] - 0.4 * x[2];
            logvar[1] += -0.5 * x[1] + 0.3 * x[2];
            let mut factor = basis.clone();
            for j in 0..p {
                factor.column_mut(j).scale_mut((0.5 * logvar[j]).exp());
            }
            let innov = standard_normal_matrix(t, p, &mut r) * factor.transpose();
            let mut signals = Matrix::zeros(t, p);
            signals.set_row(0, &innov.row(0));
            let s = (1.0 - rho * rho as f64).sqrt();
            for l in 1..t {
                let row = signals.row(l - 1) * rho + innov.row(l) * s;
                signals.set_row(l, &row);
            }
            Subject {
                id: format!("{:06}", 100_000 + i),
                signals,
                covariates: x,
            }
        })
        .collect();
    let data = TimeSeriesDataset::new(p, 3, subjects).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (sig, cov) = (
        dir.path().join("signals.csv"),
        dir.path().join("covariates.csv"),
    );
    ingest::write(&data, &sig, &cov, true).unwrap();

    let out = dir.path().join("fit");
    let status = Command::new(env!("CARGO_BIN_EXE_capreg"))
        .args([
            "fit",
            "--d",
            "2",
            "--bonferroni",
            "--ess-thin",
            "--seed",
            "3",
            "--jobs",
            "4",
        ])
        .arg("--signals")
        .arg(&sig)
        .arg("--covariates")
        .arg(&cov)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    if !status.status.success() {
        return verdict(
            false,
            format!(
                "fit exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr)
            ),
        );
    }
    let report: FitReport = read_json(&out.join("summary.json"));
    let tails = report.summary.loading_tails;
    let bonf_ok = (tails.0 - 0.025 / 15.0).abs() < 1e-12;
    verdict(
        bonf_ok && elapsed < Duration::from_secs(15 * 60),
        format!(
            "p=15, n={n}, raw T={t} thinned to ESS={}; loading tails ({:.6}, {:.6}); V = ({:.2}, {:.2}); divergences {}; {:.1} s",
            report.effective_sample_size.unwrap_or(0),
            tails.0,
            tails.1,
            report.summary.component_variance[0],
            report.summary.component_variance[1],
            report.divergences,
            elapsed.as_secs_f64()
        ),
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_reader(std::fs::File::open(path).unwrap()).unwrap()
}

fn main() {
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, &str, fn() -> Verdict); 11] = [
        ("1", "gradient matches finite differences", c1_gradient),
        ("2", "prior recovery with n = 0", c2_prior_recovery),
        ("3", "simulation recovery improves with n", c3_recovery),
        ("4", "95% coverage of β at n=100, T=20", c4_coverage),
        ("5", "DfD selects d = 2 at n=400, T=40", c5_selection),
        ("6", "DfD nonnegativity and zero case", c6_dfd),
        ("7", "whitening identity", c7_whitening),
        ("8", "polar, MACG, and Haar properties", c8_polar_macg),
        ("9", "effective sample size", c9_ess),
        ("10", "intercept reparametrization", c10_intercept),
        ("hcp", "HCP-shaped end-to-end fit", hcp_shaped),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "criterion {id:>3} {}: {name} — {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
