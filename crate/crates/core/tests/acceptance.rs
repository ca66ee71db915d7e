//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture` to see
//! the report.

use std::time::{Duration, Instant};

use mdm::diffusion::{self, DiffusionSpec, LearnableParams, Schedule};
use mdm::elbo::{self, Form};
use mdm::kernel::{self, Conditioning, Mode, DEFAULT_ODE_STEPS};
use mdm::matops::{self, Mat, Vector};
use mdm::objective::{self, DatumDraws, Options, Wants};
use mdm::rng;
use mdm::sampler::{self, SamplerOptions};
use mdm::score::{Activation, AnalyticGaussianScore, MlpScore, Parameterization};
use mdm::train::{self, Inference, ModelConfig, TrainConfig, TrainState};
use mdm::data::{self, Dataset};

const GAUSSIAN_LL: f64 = -1.41894;

type Verdict = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn kernel_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let k = 1 + (seed % 3) as usize;
        let spec = diffusion::random_spec(seed, k, 3.0).map_err(err)?;
        for s in [0.1, 0.5, 1.0, 3.0] {
            for mode in [Mode::FullState, Mode::DataOnly] {
                let cond = Conditioning::for_mode(&spec, mode);
                let a = kernel::transition_closed_form(&spec, s, &cond).map_err(err)?;
                let b = kernel::transition_ode(&spec, s, &cond, DEFAULT_ODE_STEPS).map_err(err)?;
                worst = worst
                    .max(matops::rel_frobenius(&a.mean_map, &b.mean_map))
                    .max(matops::rel_frobenius(&a.cov, &b.cov));
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!("max relative Frobenius error {worst:.2e} (≤ 1e-6), {elapsed:.2?} (< 10 s)"),
    ))
}

fn rotation_example() -> Verdict {
    let spec = DiffusionSpec::new(
        Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
        Mat::identity(2, 2),
        Mat::identity(2, 2),
        Schedule::constant(1.0),
    )
    .map_err(err)?;
    let k = kernel::transition(&spec, 0.1, &Conditioning::full_state(2)).map_err(err)?;
    let x = 1.7;
    let out = &k.mean_map * Vector::from_vec(vec![x, 0.0]);
    let (a, b) = (out[0] / x, out[1] / x);
    let ok = (a - 0.9003).abs() <= 1e-3 && (b + 0.090).abs() <= 1e-3;
    Ok((ok, format!("mean of (x, 0) = ({a:.5}x, {b:.5}x), expected (0.9003x, −0.090x) ± 1e-3")))
}

fn ulp_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs())
}

fn instance_fidelity() -> Verdict {
    let mut r = rng::stream(3, 0, 0);
    use rand::Rng;
    let mut mismatches = 0;
    for _ in 0..10 {
        let (beta, gamma, m) = (r.random_range(0.1..10.0), r.random_range(0.1..4.0), r.random_range(0.05..4.0));
        let spec = diffusion::cld(beta, gamma, m).map_err(err)?;
        let a = spec.drift_matrix(0.37).map_err(err)?;
        let expected = [[0.0, beta / m], [-beta, -gamma * beta / m]];
        for i in 0..2 {
            for j in 0..2 {
                if !ulp_close(a[(i, j)], expected[i][j]) {
                    mismatches += 1;
                }
            }
        }

        let (l, g, xi) = (r.random_range(0.2..3.0), r.random_range(0.2..3.0), r.random_range(0.2..3.0));
        let il = 1.0 / l;
        let s = Mat::from_diagonal(&Vector::from_vec(vec![1.0, l, l]));
        let alda_qd = Mat::from_row_slice(3, 3, &[0.0, -il, 0.0, il, 0.0, -g, 0.0, g, xi / l]);
        let malda_qd = Mat::from_row_slice(3, 3, &[0.0, -il, -il, il, il, -g, il, g, il]);
        for (spec, qd) in [(diffusion::alda(l, g, xi), alda_qd), (diffusion::malda(l, g), malda_qd)] {
            let got = spec.map_err(err)?.drift_matrix(0.8).map_err(err)?;
            let want = -(qd * &s);
            mismatches += got.iter().zip(want.iter()).filter(|(a, b)| !ulp_close(**a, **b)).count();
        }
    }
    Ok((mismatches == 0, format!("{mismatches} entries off by more than 4 ulp over 10 draws of each instance")))
}

fn stationarity() -> Verdict {
    let s = 200.0;
    let specs = [
        ("vpsde", diffusion::vpsde(2.0)),
        ("cld", diffusion::cld(4.0, 1.0, 0.25)),
        ("alda", diffusion::alda(1.0, 1.0, 1.0)),
        ("malda", diffusion::malda(1.0, 1.0)),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, spec) in specs {
        let spec = spec.map_err(err)?.with_horizon(s).map_err(err)?;
        let k = kernel::transition(&spec, s, &Conditioning::full_state(spec.k())).map_err(err)?;
        let dev = (&k.cov - spec.stationary_cov()).norm();
        ok &= dev <= 1e-4;
        parts.push(format!("{name} {dev:.1e}"));
    }
    Ok((ok, format!("‖Σ − S⁻¹‖_F at s = {s}: {} (≤ 1e-4)", parts.join(", "))))
}

fn gaussian_batch(n: usize, seed: u64) -> Mat {
    rng::normal_mat(&mut rng::stream(seed, 0, 0), n, 1)
}

fn elbo_oracle() -> Verdict {
    let start = Instant::now();
    let x = gaussian_batch(4096, 21);
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, spec) in [("vpsde", diffusion::vpsde_linear(0.1, 20.0)), ("cld", diffusion::cld(4.0, 1.0, 0.25))] {
        let spec = spec.map_err(err)?;
        let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0)).map_err(err)?;
        let e = elbo::estimate_elbo(&spec, &score, &x, 64, 5, Form::Dsm).map_err(err)?;
        let z = (e.total - GAUSSIAN_LL) / e.stderr;
        ok &= z.abs() < 3.0;
        parts.push(format!("{name} {:.5} ± {:.5} (z = {z:.2})", e.total, e.stderr));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    Ok((ok, format!("{}; {elapsed:.2?} (< 60 s)", parts.join(", "))))
}

fn ism_equals_dsm() -> Verdict {
    let x = gaussian_batch(10_000, 22);
    let mut ok = true;
    let mut parts = Vec::new();
    let specs = [
        ("vpsde", diffusion::vpsde_linear(0.1, 20.0)),
        ("cld", diffusion::cld(4.0, 1.0, 0.25)),
        // the full-state kernel of this process is below the covariance floor until ε ≈ 1.5e-2
        ("alda", diffusion::alda(1.0, 1.0, 1.0).and_then(|s| s.with_eps(2e-2))),
        ("malda", diffusion::malda(1.0, 1.0)),
    ];
    for (name, spec) in specs {
        let spec = spec.map_err(err)?;
        // a deliberately mis-specified model, so the two estimators see a nonzero error term
        let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.5)).map_err(err)?;
        let a = elbo::estimate_elbo(&spec, &score, &x, 1, 9, Form::Dsm).map_err(err)?;
        let b = elbo::estimate_elbo(&spec, &score, &x, 1, 9, Form::Ism).map_err(err)?;
        let z = (a.total - b.total) / a.stderr.hypot(b.stderr);
        ok &= z.abs() < 3.0;
        parts.push(format!("{name} z = {z:.2}"));
    }
    Ok((ok, format!("dsm − ism over 10⁴ draws: {}", parts.join(", "))))
}

/// Five-point central difference.
fn derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

const REL_FLOOR: f64 = 1e-6;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR)
}

fn gradient_fidelity() -> Verdict {
    let template = DiffusionSpec::new(Mat::zeros(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Schedule::linear(0.05, 2.0, 1.0))
        .map_err(err)?;
    let mut phi = LearnableParams::vpsde_equivalent_full(2);
    let v0: Vec<f64> = (0..phi.len()).map(|i| 0.4 * (1.3 * i as f64).sin()).collect();
    let v0: Vec<f64> = v0.iter().enumerate().map(|(i, v)| if i == 4 || i == 7 { v + 1.0 } else { *v }).collect();
    phi.set_from_slice(&v0);
    let x = Mat::from_row_slice(1, 2, &[0.8, -1.1]);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for param in [Parameterization::Score, Parameterization::Noise] {
        let net = MlpScore::new(2, 2, &[16, 16], 8, Activation::Tanh, 4).map_err(err)?;
        // move the output layer away from its small initialization
        let mut theta = net.params();
        let mut r = rng::stream(5, 0, 0);
        for (i, t) in theta.iter_mut().enumerate() {
            *t += 0.3 * rng::normal_mat(&mut r, 1, 1)[(0, 0)] * if i % 3 == 0 { 1.0 } else { 0.5 };
        }
        let spec0 = phi.to_spec(&template).map_err(err)?;
        let draws = vec![DatumDraws::new(&spec0, 2, 77, 0, 1, 0)];
        let opts = Options { param, ..Options::default() };
        let eval = |th: &[f64], ph: &[f64], grads: bool| -> mdm::Result<objective::Evaluation> {
            let mut n = net.clone();
            n.set_params(th)?;
            let mut p = phi.clone();
            p.set_from_slice(ph);
            let spec = p.to_spec(&template)?;
            objective::evaluate(&spec, &n, &x, &draws, &opts, Wants { theta: grads, phi: grads })
        };
        let ev = eval(&theta, &v0, true).map_err(err)?;
        let base = ev.grad_base.clone().ok_or("missing process gradient")?;
        let g_phi = phi.pullback(&base.q, &base.d);
        let f = |th: &[f64], ph: &[f64]| eval(th, ph, false).map(|e| e.terms[0].total).unwrap_or(f64::NAN);
        for i in 0..theta.len() {
            let fd = derivative(
                |h| {
                    let mut t = theta.clone();
                    t[i] += h;
                    f(&t, &v0)
                },
                1e-4,
            );
            worst = worst.max(rel_err(fd, ev.grad_theta[i]));
            count += 1;
        }
        for i in 0..v0.len() {
            let fd = derivative(
                |h| {
                    let mut p = v0.clone();
                    p[i] += h;
                    f(&theta, &p)
                },
                1e-4,
            );
            worst = worst.max(rel_err(fd, g_phi[i]));
            count += 1;
        }
    }
    Ok((
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over {count} parameters, both parameterizations (≤ 1e-4, denominator floor {REL_FLOOR:e})"),
    ))
}

fn truncation_likelihood() -> Verdict {
    let x = gaussian_batch(4096, 23);
    let mut ok = true;
    let mut parts = Vec::new();
    for eps in [1e-3, 1e-2] {
        for (name, spec) in [("vpsde", diffusion::vpsde_linear(0.1, 20.0)), ("cld", diffusion::cld(4.0, 1.0, 0.25))] {
            let spec = spec.and_then(|s| s.with_eps(eps)).map_err(err)?;
            let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0)).map_err(err)?;
            let e = elbo::estimate_elbo(&spec, &score, &x, 64, 6, Form::Dsm).map_err(err)?;
            let z = (e.total - GAUSSIAN_LL) / e.stderr;
            ok &= z.abs() < 3.0;
            parts.push(format!("{name} ε={eps:e}: term {:.4}, z = {z:.2}", e.likelihood_eps));
        }
    }
    Ok((ok, parts.join("; ")))
}

struct TableRun {
    learned: Option<(TrainState, Mat)>,
}

fn table_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr_theta: 2e-3,
        lr_phi: 1e-3,
        learn_inference: true,
        eval_every: 4000,
        eval_n_time: 32,
        model: ModelConfig {
            hidden: vec![64, 64],
            ..ModelConfig::default()
        },
        ..TrainConfig::new(4000, 128, seed)
    }
}

fn desk_table(run: &mut TableRun) -> Verdict {
    let data = Dataset::two_gaussians(5000, 1).load().map_err(err)?;
    let learned_template = DiffusionSpec::new(
        Mat::zeros(2, 2),
        Mat::identity(2, 2),
        Mat::identity(2, 2),
        diffusion::vpsde_linear(0.1, 20.0).map_err(err)?.sched_d().clone(),
    )
    .map_err(err)?;
    let candidates: Vec<(&str, Inference)> = vec![
        ("vpsde", Inference::Fixed(diffusion::vpsde_linear(0.1, 20.0).map_err(err)?)),
        ("cld", Inference::Fixed(diffusion::cld(4.0, 1.0, 0.25).map_err(err)?)),
        (
            "learned-2",
            Inference::Learnable {
                params: LearnableParams::vpsde_equivalent_full(2),
                template: learned_template,
            },
        ),
    ];
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(err)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    for (name, inf) in candidates {
        let mut finals = Vec::new();
        for r in 0..3u64 {
            let cfg = table_config(rng::child_seed(2024, r));
            let (state, report) = pool.install(|| train::fit(&data, inf.clone(), &cfg)).map_err(err)?;
            finals.push((report.last.elbo / 2.0, report.last.stderr / 2.0));
            if name == "learned-2" && r == 0 {
                run.learned = Some((state, report.heldout));
            }
        }
        let n = finals.len() as f64;
        let mean = finals.iter().map(|f| f.0).sum::<f64>() / n;
        let se = finals.iter().map(|f| f.1 * f.1).sum::<f64>().sqrt() / n;
        rows.push((name, mean, se));
    }
    let elapsed = start.elapsed();
    let learned = rows.iter().find(|r| r.0 == "learned-2").unwrap();
    let best = rows
        .iter()
        .filter(|r| r.0 != "learned-2")
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let se = learned.2.max(best.2);
    let ok = learned.1 >= best.1 - 2.0 * se && elapsed < Duration::from_secs(15 * 60);
    let table: Vec<String> = rows.iter().map(|(n, m, s)| format!("{n} {m:.4} ± {s:.4}")).collect();
    Ok((
        ok,
        format!(
            "nats/dim over 3 seeds: {}; learned − best fixed = {:.4} (≥ −2·{se:.4}); {elapsed:.1?} on one thread (< 15 min)",
            table.join(", "),
            learned.1 - best.1
        ),
    ))
}

fn moment_match(samples: &Mat, reference: &Mat) -> (bool, f64) {
    let (ma, ca) = data::moments(samples);
    let (mb, cb) = data::moments(reference);
    let (na, nb) = (samples.nrows() as f64, reference.nrows() as f64);
    let d = samples.ncols();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let z = (ma[i] - mb[i]) / (ca[(i, i)] / na + cb[(i, i)] / nb).sqrt();
        worst = worst.max(z.abs());
        for j in 0..=i {
            let prod_var = |m: &Mat, mean: &[f64], c: &Mat| {
                let n = m.nrows() as f64;
                m.row_iter()
                    .map(|r| ((r[i] - mean[i]) * (r[j] - mean[j]) - c[(i, j)]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            };
            let se = (prod_var(samples, &ma, &ca) / na + prod_var(reference, &mb, &cb) / nb).sqrt();
            worst = worst.max(((ca[(i, j)] - cb[(i, j)]) / se).abs());
        }
    }
    (worst < 3.0, worst)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn sampler_closure(run: &TableRun) -> Verdict {
    let (state, heldout) = run.learned.as_ref().ok_or("no trained model (desk-scale table failed)")?;
    let spec = state.spec().map_err(err)?;
    let field = state.score_field().map_err(err)?;
    let gen = sampler::generate(&spec, field.as_ref(), 2000, 2, &SamplerOptions::new(500), 31).map_err(err)?;
    let (moments_ok, worst) = moment_match(&gen.samples, heldout);

    let cld = diffusion::cld(4.0, 1.0, 0.25).map_err(err)?;
    let score = AnalyticGaussianScore::new(cld.clone(), Vector::from_element(1, 1.0)).map_err(err)?;
    let n = 10_000;
    let opts = SamplerOptions {
        record_paths: true,
        ..SamplerOptions::new(400)
    };
    let out = sampler::generate(&cld, &score, n, 1, &opts, 32).map_err(err)?;
    let paths = out.paths.unwrap();
    let mid = paths[0].states.len() / 2;
    let z_end: Vec<f64> = paths.iter().map(|p| p.states.last().unwrap()[(0, 0)]).collect();
    let v_end: Vec<f64> = paths.iter().map(|p| p.states.last().unwrap()[(0, 1)]).collect();
    let v_mid: Vec<f64> = paths.iter().map(|p| p.states[mid][(0, 1)]).collect();
    let se = 1.0 / (n as f64).sqrt();
    let (r_end, r_mid) = (correlation(&z_end, &v_end), correlation(&z_end, &v_mid));
    let ok = moments_ok && r_end.abs() < 3.0 * se && r_mid.abs() > 3.0 * se;
    Ok((
        ok,
        format!(
            "learned model vs held-out moments max |z| = {worst:.2} (< 3); cld corr(z_end, v_end) = {r_end:.4}, corr(z_end, v_mid) = {r_mid:.4} (stderr {se:.4})"
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut run = TableRun { learned: None };
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, v: Verdict| {
        let (passed, detail) = v.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {n:>2} [{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        results.push((n, passed));
    };
    record(1, "kernel oracle equivalence", kernel_oracle());
    record(2, "worked rotation-dissipation example", rotation_example());
    record(3, "instance fidelity", instance_fidelity());
    record(4, "stationarity", stationarity());
    record(5, "elbo exactness oracle", elbo_oracle());
    record(6, "ism equals dsm", ism_equals_dsm());
    record(7, "gradient fidelity", gradient_fidelity());
    record(8, "truncation likelihood", truncation_likelihood());
    record(9, "desk-scale learned vs fixed", desk_table(&mut run));
    record(10, "sampler closure", sampler_closure(&run));
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
