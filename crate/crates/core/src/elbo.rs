//! Evidence lower bound of a multivariate diffusion model, in denoising
//! (DSM) and implicit (ISM) score-matching forms, with the ε-truncation
//! likelihood that restores a proper bound.

use std::f64::consts::{LN_2, PI};
use std::io::Write;

use serde::Serialize;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::kernel::{GaussianKernel, Mode};
use crate::matops::{self, Mat};
use crate::objective::{self, DatumDraws, Options, Wants};
use crate::score::{Parameterization, ScoreField};
use crate::AugmentedState;

pub use crate::objective::{DivMode, Form, Quadratic};

/// Batch-mean ELBO estimate per datum, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboBreakdown {
    pub l_t: f64,
    pub l_q: f64,
    pub integrand: f64,
    pub likelihood_eps: f64,
    pub total: f64,
    /// Standard error of `total` across the batch.
    pub stderr: f64,
    /// Data dimension `d`.
    pub dim: usize,
    pub batch: usize,
}

impl ElboBreakdown {
    pub fn from_terms(terms: &[objective::DatumTerms], dim: usize) -> Self {
        let n = terms.len() as f64;
        let mean = |f: fn(&objective::DatumTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
        let l_t = mean(|t| t.l_t);
        let l_q = mean(|t| t.l_q);
        let integrand = mean(|t| t.integrand);
        let likelihood_eps = mean(|t| t.likelihood_eps);
        let total = l_t + integrand + l_q + likelihood_eps;
        let raw_mean = mean(|t| t.total);
        let var = if terms.len() > 1 {
            terms.iter().map(|t| (t.total - raw_mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        ElboBreakdown {
            l_t,
            l_q,
            integrand,
            likelihood_eps,
            total,
            stderr: (var / n).sqrt(),
            dim,
            batch: terms.len(),
        }
    }

    pub fn nats_per_dim(&self) -> f64 {
        self.total / self.dim as f64
    }

    pub fn stderr_per_dim(&self) -> f64 {
        self.stderr / self.dim as f64
    }

    /// `−total / (d·ln 2)`. Not comparable to image bits-per-dim, which
    /// additionally dequantizes discrete data.
    pub fn bits_per_dim(&self) -> f64 {
        -self.total / (self.dim as f64 * LN_2)
    }
}

/// One CSV row of an estimate dump.
#[derive(Clone, Debug, Serialize)]
pub struct ElboRecord {
    pub seed: u64,
    pub form: String,
    pub n_time: usize,
    #[serde(rename = "l_T")]
    pub l_t: String,
    pub l_q: String,
    pub integrand: String,
    pub likelihood_eps: String,
    pub total: String,
    pub stderr: String,
}

impl ElboRecord {
    pub fn new(seed: u64, form: Form, n_time: usize, e: &ElboBreakdown) -> Self {
        ElboRecord {
            seed,
            form: form.to_string(),
            n_time,
            l_t: e.l_t.to_string(),
            l_q: e.l_q.to_string(),
            integrand: e.integrand.to_string(),
            likelihood_eps: e.likelihood_eps.to_string(),
            total: e.total.to_string(),
            stderr: e.stderr.to_string(),
        }
    }
}

/// Writes records as CSV with a header; floats are printed round-trippably.
pub fn write_csv(out: impl Write, records: &[ElboRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Settings of [`estimate_elbo_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub n_time: usize,
    pub seed: u64,
    pub form: Form,
    pub div: DivMode,
    pub quadratic: Quadratic,
    pub param: Parameterization,
}

impl Estimate {
    pub fn new(n_time: usize, seed: u64, form: Form) -> Self {
        Estimate {
            n_time,
            seed,
            form,
            div: DivMode::Exact,
            quadratic: Quadratic::Sampled,
            param: Parameterization::Score,
        }
    }

    fn options(&self) -> Options {
        Options {
            form: self.form,
            div: self.div,
            quadratic: self.quadratic,
            param: self.param,
        }
    }

    fn probes(&self) -> usize {
        match (self.form, self.div) {
            (Form::Ism, DivMode::Hutchinson { probes }) => probes,
            _ => 0,
        }
    }
}

/// ELBO of every row of `x` (`B×d`) with stratified time sampling, reported
/// as the batch mean per datum with its standard error.
pub fn estimate_elbo(spec: &DiffusionSpec, score: &dyn ScoreField, x: &Mat, n_time: usize, seed: u64, form: Form) -> Result<ElboBreakdown> {
    estimate_elbo_with(spec, score, x, &Estimate::new(n_time, seed, form))
}

pub fn estimate_elbo_with(spec: &DiffusionSpec, score: &dyn ScoreField, x: &Mat, est: &Estimate) -> Result<ElboBreakdown> {
    if est.n_time == 0 {
        return Err(Error::invalid("n_time must be at least 1"));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::invalid("empty data batch"));
    }
    let draws = DatumDraws::batch(spec, x.ncols(), est.seed, x.nrows(), est.n_time, est.probes());
    let ev = objective::evaluate(spec, score, x, &draws, &est.options(), Wants::default())?;
    Ok(ElboBreakdown::from_terms(&ev.terms, x.ncols()))
}

/// `½‖s_q‖²_{g²} − ½‖s_θ − s_q‖²_{g²} + d·tr A(s)` at one draw; `center` is
/// what `kernel` conditions on.
pub fn dsm_integrand(spec: &DiffusionSpec, kernel: &GaussianKernel, score: &dyn ScoreField, y_s: &AugmentedState, center: &Mat, s: f64) -> Result<f64> {
    let s_q = kernel.score(y_s, center).map_err(|e| e.at_time(s))?;
    let s_theta = score.eval(y_s, s)?;
    let g = spec.diffusion_sq(s)?;
    let a = spec.drift_matrix(s)?;
    let delta = &s_theta - &s_q;
    Ok(0.5 * (&s_q * &g).dot(&s_q) - 0.5 * (&delta * &g).dot(&delta) + y_s.nrows() as f64 * a.trace())
}

/// Expected quadratic score term per data dimension, `tr(L⁻¹ g² L⁻ᵀ)`.
pub fn quadratic_trace(spec: &DiffusionSpec, kernel: &GaussianKernel) -> Result<f64> {
    let g = spec.diffusion_sq(kernel.s)?;
    let l = kernel.chol.matrix();
    let lg = l.solve_lower_triangular(&g).ok_or(Error::Singular { cond: f64::INFINITY })?;
    let x = l.solve_lower_triangular(&lg.transpose()).ok_or(Error::Singular { cond: f64::INFINITY })?;
    Ok(x.trace())
}

/// Result of [`ism_integrand`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsmValue {
    pub value: f64,
    /// Sample variance of the per-probe divergence estimates.
    pub probe_variance: Option<f64>,
}

/// `−½‖s_θ‖²_{g²} − ∇·(g² s_θ) + d·tr A(s)` at one point.
pub fn ism_integrand(spec: &DiffusionSpec, score: &dyn ScoreField, y_s: &AugmentedState, s: f64, div: DivMode, seed: u64) -> Result<IsmValue> {
    let (d, k) = y_s.shape();
    if div == DivMode::Exact && d * k > objective::EXACT_DIV_CAP {
        return Err(Error::invalid(format!(
            "exact divergence refused for d*K = {} > {}",
            d * k,
            objective::EXACT_DIV_CAP
        )));
    }
    let g = spec.diffusion_sq(s)?;
    let a = spec.drift_matrix(s)?;
    let s_theta = score.eval(y_s, s)?;
    let probes: Vec<Mat> = match div {
        DivMode::Exact => Vec::new(),
        DivMode::Hutchinson { probes } => {
            let mut r = crate::rng::stream(seed, 0, 0);
            (0..probes).map(|_| crate::rng::rademacher_mat(&mut r, d, k)).collect()
        }
    };
    let opts = Options {
        div,
        ..Options::default()
    };
    // a placeholder factor; the score parameterization does not use it
    let dummy = crate::kernel::transition(spec, s, &crate::kernel::Conditioning::for_mode(spec, Mode::FullState))?;
    let (divergence, probe_variance) = objective::divergence(score, &opts, &objective::plain_kernel(dummy), y_s, s, &g, &probes)?;
    Ok(IsmValue {
        value: -0.5 * (&s_theta * &g).dot(&s_theta) - divergence + d as f64 * a.trace(),
        probe_variance,
    })
}

/// `log N(y₀; μ_p, Σ_p) − log q(y_ε | y₀)` with the Tweedie posterior
/// `μ_p = M⁻¹(Σ s_θ(y_ε, ε) + y_ε)`, `Σ_p = M⁻¹ Σ M⁻ᵀ`, summed over rows.
pub fn truncation_likelihood(spec: &DiffusionSpec, kernel_eps: &GaussianKernel, score: &dyn ScoreField, y0: &AugmentedState, y_eps: &AugmentedState) -> Result<f64> {
    if kernel_eps.mode != Mode::FullState {
        return Err(Error::invalid("truncation likelihood needs the full-state kernel"));
    }
    let s_theta = score.eval(y_eps, kernel_eps.s)?;
    let m_inv = matops::inverse(&kernel_eps.mean_map)?;
    let cov_p = matops::symmetrize(&(&m_inv * &kernel_eps.cov * m_inv.transpose()));
    let mu_p = (&s_theta * &kernel_eps.cov + y_eps) * m_inv.transpose();
    let k = spec.k() as f64;
    let lp = matops::cholesky(&cov_p)?;
    if lp.jitter > 0.0 {
        return Err(Error::DegenerateCovariance {
            min_eig: matops::min_eigenvalue(&cov_p),
        });
    }
    let l = lp.factor.into_matrix();
    let resid = y0 - mu_p;
    let wv = l
        .solve_lower_triangular(&resid.transpose())
        .ok_or(Error::Singular { cond: f64::INFINITY })?;
    let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let rows = y0.nrows() as f64;
    let log_p = rows * (-0.5 * k * (2.0 * PI).ln() - 0.5 * log_det) - 0.5 * wv.norm_squared();
    let log_q = kernel_eps.log_density(y_eps, y0)?;
    Ok(log_p - log_q)
}

/// Exact log-likelihood of independent Gaussian data `N(μ_i, σ_i²)`.
pub fn gaussian_log_likelihood(x: &Mat, mean: &[f64], var: &[f64]) -> f64 {
    let mut total = 0.0;
    for row in x.row_iter() {
        for (j, v) in row.iter().enumerate() {
            total += -0.5 * (2.0 * PI * var[j]).ln() - 0.5 * (v - mean[j]).powi(2) / var[j];
        }
    }
    total / x.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion;
    use crate::kernel::{self, Conditioning};
    use crate::matops::Vector;
    use crate::score::{AnalyticGaussianScore, LinearScore, ZeroScore};
    use approx::assert_relative_eq;

    #[test]
    fn perfect_score_leaves_quadratic_and_trace() {
        let spec = diffusion::vpsde(2.0).unwrap();
        let kern = kernel::transition(&spec, 0.5, &Conditioning::full_state(1)).unwrap();
        let center = Mat::from_element(1, 1, 0.3);
        let y = kern.sample(&center, &Mat::from_element(1, 1, 0.8)).unwrap();
        let s_q = kern.score(&y, &center).unwrap();
        let oracle = LinearScore {
            precision: Mat::from_element(1, 1, -s_q[(0, 0)] / y[(0, 0)]),
        };
        let v = dsm_integrand(&spec, &kern, &oracle, &y, &center, 0.5).unwrap();
        assert_relative_eq!(v, 0.5 * 2.0 * s_q[(0, 0)].powi(2) - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn analytic_quadratic_trace_scalar() {
        let spec = diffusion::vpsde(2.0).unwrap();
        let kern = kernel::transition(&spec, 2f64.ln(), &Conditioning::full_state(1)).unwrap();
        assert_relative_eq!(quadratic_trace(&spec, &kern).unwrap(), 2.0 / 0.75, epsilon = 1e-12);
    }

    #[test]
    fn ism_examples() {
        let spec = diffusion::vpsde(2.0).unwrap();
        let y = Mat::from_element(1, 1, 0.7);
        let zero = ism_integrand(&spec, &ZeroScore, &y, 0.3, DivMode::Exact, 0).unwrap();
        assert_eq!(zero.value, -1.0);
        let lin = LinearScore {
            precision: Mat::identity(1, 1),
        };
        let v = ism_integrand(&spec, &lin, &y, 0.3, DivMode::Exact, 0).unwrap();
        assert_relative_eq!(v.value, -0.5 * 2.0 * 0.49 + 2.0 - 1.0, epsilon = 1e-14);
        let h = ism_integrand(&spec, &lin, &y, 0.3, DivMode::Hutchinson { probes: 4 }, 0).unwrap();
        assert_relative_eq!(h.value, v.value, epsilon = 1e-14);
        assert_eq!(h.probe_variance, Some(0.0));
    }

    #[test]
    fn exact_divergence_size_cap() {
        let spec = diffusion::cld(4.0, 1.0, 0.25).unwrap();
        let y = Mat::zeros(40, 2);
        assert!(ism_integrand(&spec, &ZeroScore, &y, 0.3, DivMode::Exact, 0).is_err());
    }

    #[test]
    fn truncation_posterior_for_standard_normal() {
        let spec = diffusion::vpsde(2.0).unwrap();
        let eps = 0.01;
        let kern = kernel::transition(&spec, eps, &Conditioning::full_state(1)).unwrap();
        let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0)).unwrap();
        let y_eps = Mat::from_element(1, 1, 0.4);
        let y0 = Mat::from_element(1, 1, 0.35);
        let got = truncation_likelihood(&spec, &kern, &score, &y0, &y_eps).unwrap();
        let a = (-eps).exp();
        let sig = 1.0 - (-2.0 * eps).exp();
        let mu_p = a * 0.4;
        let var_p = sig * (2.0 * eps).exp();
        let log_p = -0.5 * (2.0 * PI * var_p).ln() - 0.5 * (0.35 - mu_p).powi(2) / var_p;
        let log_q = -0.5 * (2.0 * PI * sig).ln() - 0.5 * (0.4 - a * 0.35).powi(2) / sig;
        assert_relative_eq!(got, log_p - log_q, epsilon = 1e-10);
    }

    #[test]
    fn simplified_truncation_matches_tweedie_form() {
        let spec = diffusion::cld(4.0, 1.0, 0.25).unwrap().with_eps(1e-2).unwrap();
        let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(2, 1.5)).unwrap();
        let x = Mat::from_row_slice(3, 2, &[0.2, -1.0, 0.4, 0.1, 2.0, -0.3]);
        let draws = DatumDraws::batch(&spec, 2, 7, 3, 1, 0);
        let ev = objective::evaluate(&spec, &score, &x, &draws, &Options::default(), Wants::default()).unwrap();
        let kern = kernel::transition(&spec, spec.eps(), &Conditioning::full_state(2)).unwrap();
        let lv = spec.aux_init_cov()[(0, 0)].sqrt();
        for (r, dr) in draws.iter().enumerate() {
            let y0 = Mat::from_fn(2, 2, |i, j| if j == 0 { x[(r, i)] } else { lv * dr.xi0[(i, 0)] });
            let y_eps = kern.sample(&y0, &dr.xi_eps).unwrap();
            let direct = truncation_likelihood(&spec, &kern, &score, &y0, &y_eps).unwrap();
            assert_relative_eq!(direct, ev.terms[r].likelihood_eps, epsilon = 1e-7, max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_batch_is_deterministic_closed_form() {
        let spec = diffusion::vpsde(2.0).unwrap();
        let x = Mat::zeros(64, 1);
        let a = estimate_elbo(&spec, &ZeroScore, &x, 4, 1, Form::Dsm).unwrap();
        let b = estimate_elbo(&spec, &ZeroScore, &x, 4, 1, Form::Dsm).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, a.l_t + a.integrand + a.l_q + a.likelihood_eps);
        // zero score: likelihood_eps = tr(∫A) exactly and integrand = (T−ε)·tr A + quadratic
        assert_relative_eq!(a.likelihood_eps, -(1.0 - 0.0) * spec.eps(), epsilon = 1e-15);
    }

    #[test]
    fn csv_has_header_and_round_trips() {
        let spec = diffusion::vpsde(2.0).unwrap();
        let x = Mat::from_element(8, 1, 0.3);
        let e = estimate_elbo(&spec, &ZeroScore, &x, 2, 5, Form::Dsm).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[ElboRecord::new(5, Form::Dsm, 2, &e)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "seed,form,n_time,l_T,l_q,integrand,likelihood_eps,total,stderr");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[7].parse::<f64>().unwrap(), e.total);
    }
}
