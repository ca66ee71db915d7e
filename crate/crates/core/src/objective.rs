//! Batched ELBO evaluation with an optional reverse pass to the score
//! parameters `θ` and the base matrices `(Q̂, D̂)`.
//!
//! Per datum `x` (a `d`-vector) the estimate is
//!
//! ```text
//! l_T + (T − ε)/n · Σ_j integrand(s_j) + l_q + likelihood_eps
//! ```
//!
//! with `y_s` drawn from the data-conditioned kernel, `v₀` drawn from the
//! auxiliary initial law and `y_ε` drawn from the full-state kernel given
//! `y₀ = [x, v₀]`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, BaseGrad, TapedKernel};
use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::kernel::{self, Conditioning, GaussianKernel, Mode, COV_FLOOR};
use crate::matops::{self, Mat};
use crate::rng;
use crate::score::{Parameterization, ScoreField};
use crate::AugmentedState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    Dsm,
    Ism,
}

impl std::str::FromStr for Form {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsm" => Ok(Form::Dsm),
            "ism" => Ok(Form::Ism),
            other => Err(Error::invalid(format!("unknown form `{other}`"))),
        }
    }
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Form::Dsm => "dsm",
            Form::Ism => "ism",
        })
    }
}

/// Divergence estimator for the ISM form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivMode {
    /// `d·K` vector–Jacobian products; refused above [`EXACT_DIV_CAP`].
    Exact,
    /// Rademacher probes.
    Hutchinson { probes: usize },
}

pub const EXACT_DIV_CAP: usize = 64;

/// How the `½‖s_q‖²_{g²}` term of the DSM integrand is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadratic {
    /// From the drawn noise.
    Sampled,
    /// Its expectation `½·d·tr(L⁻¹ g² L⁻ᵀ)`.
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Options {
    pub form: Form,
    pub div: DivMode,
    pub quadratic: Quadratic,
    pub param: Parameterization,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            form: Form::Dsm,
            div: DivMode::Exact,
            quadratic: Quadratic::Sampled,
            param: Parameterization::Score,
        }
    }
}

/// Random inputs of one datum. Fixing these gives a deterministic,
/// differentiable estimate.
#[derive(Clone, Debug)]
pub struct DatumDraws {
    pub xi0: Mat,
    pub times: Vec<f64>,
    pub xi: Vec<Mat>,
    pub probes: Vec<Vec<Mat>>,
    pub xi_t: Mat,
    pub xi_eps: Mat,
}

const TAG_V0: u64 = 0;
const TAG_T: u64 = 1;
const TAG_EPS: u64 = 2;
const TAG_STRATA: u64 = 3;

impl DatumDraws {
    /// Stratified times on `[ε, T]`, one per stratum, and all Gaussian noise
    /// for datum `row` under `seed`.
    pub fn new(spec: &DiffusionSpec, d: usize, seed: u64, row: u64, n_time: usize, probes: usize) -> Self {
        let k = spec.k();
        let (eps, horizon) = (spec.eps(), spec.horizon());
        let xi0 = rng::normal_mat(&mut rng::stream(seed, row, TAG_V0), d, k - 1);
        let xi_t = rng::normal_mat(&mut rng::stream(seed, row, TAG_T), d, k);
        let xi_eps = rng::normal_mat(&mut rng::stream(seed, row, TAG_EPS), d, k);
        let mut times = Vec::with_capacity(n_time);
        let mut xi = Vec::with_capacity(n_time);
        let mut all_probes = Vec::with_capacity(n_time);
        for j in 0..n_time {
            let mut r = rng::stream(seed, row, TAG_STRATA + j as u64);
            let u: f64 = rand::Rng::random(&mut r);
            times.push(eps + (horizon - eps) * (j as f64 + u) / n_time as f64);
            xi.push(rng::normal_mat(&mut r, d, k));
            all_probes.push((0..probes).map(|_| rng::rademacher_mat(&mut r, d, k)).collect());
        }
        DatumDraws {
            xi0,
            times,
            xi,
            probes: all_probes,
            xi_t,
            xi_eps,
        }
    }

    pub fn batch(spec: &DiffusionSpec, d: usize, seed: u64, rows: usize, n_time: usize, probes: usize) -> Vec<Self> {
        (0..rows)
            .into_par_iter()
            .map(|r| Self::new(spec, d, seed, r as u64, n_time, probes))
            .collect()
    }
}

/// Per-datum terms; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DatumTerms {
    pub l_t: f64,
    pub l_q: f64,
    pub integrand: f64,
    pub likelihood_eps: f64,
    pub total: f64,
}

/// Result of [`evaluate`]. Gradients are of the batch mean of `total`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub terms: Vec<DatumTerms>,
    pub grad_theta: Vec<f64>,
    pub grad_base: Option<BaseGrad>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Wants {
    pub theta: bool,
    pub phi: bool,
}

pub(crate) enum Kern {
    Plain(GaussianKernel),
    Taped(TapedKernel),
}

impl Kern {
    fn build(spec: &DiffusionSpec, s: f64, mode: Mode, taped: bool) -> Result<Kern> {
        let cond = Conditioning::for_mode(spec, mode);
        let k = if taped {
            Kern::Taped(adjoint::taped_transition(spec, s, &cond)?)
        } else {
            Kern::Plain(kernel::transition(spec, s, &cond)?)
        };
        Ok(k)
    }

    fn get(&self) -> &GaussianKernel {
        match self {
            Kern::Plain(k) => k,
            Kern::Taped(t) => &t.kernel,
        }
    }

    fn l(&self) -> &Mat {
        self.get().chol.matrix()
    }

    fn backward(&self, spec: &DiffusionSpec, m_bar: &Mat, l_bar: &Mat) -> Result<BaseGrad> {
        match self {
            Kern::Taped(t) => adjoint::kernel_backward(spec, t, m_bar, l_bar).map_err(|e| e.at_time(t.kernel.s)),
            Kern::Plain(_) => unreachable!("backward through an untaped kernel"),
        }
    }
}

/// `b·L⁻ᵀ`.
fn right_solve_lt(l: &Mat, b: &Mat) -> Result<Mat> {
    l.solve_lower_triangular(&b.transpose())
        .map(|x| x.transpose())
        .ok_or(Error::Singular { cond: f64::INFINITY })
}

/// `b·L⁻¹`.
fn right_solve_l(l: &Mat, b: &Mat) -> Result<Mat> {
    l.transpose()
        .solve_upper_triangular(&b.transpose())
        .map(|x| x.transpose())
        .ok_or(Error::Singular { cond: f64::INFINITY })
}

/// `[x, aux_mean]` rows and `[x, v₀]` rows for one datum.
fn initial_states(spec: &DiffusionSpec, x: &[f64], xi0: &Mat, lv: &Mat) -> (Mat, Mat) {
    let (d, k) = (x.len(), spec.k());
    let mut center = Mat::zeros(d, k);
    let mut y0 = Mat::zeros(d, k);
    let mu = spec.aux_init_mean();
    let v0 = if k > 1 { xi0 * lv.transpose() } else { Mat::zeros(d, 0) };
    for i in 0..d {
        center[(i, 0)] = x[i];
        y0[(i, 0)] = x[i];
        for j in 1..k {
            center[(i, j)] = mu[j - 1];
            y0[(i, j)] = mu[j - 1] + v0[(i, j - 1)];
        }
    }
    (center, y0)
}

struct Prepared {
    strata: Vec<Kern>,
    center: Mat,
    y0: Mat,
    y_s: Vec<AugmentedState>,
    y_t: AugmentedState,
    y_eps: AugmentedState,
    l_q: f64,
}

/// Scores from raw network outputs under the parameterization.
fn to_score(param: Parameterization, raw: &Mat, wrap: &Kern) -> Result<Mat> {
    match param {
        Parameterization::Score => Ok(raw.clone()),
        Parameterization::Noise => Ok(-right_solve_l(wrap.l(), raw)?),
    }
}

/// Upstream for the raw output and the contribution to the wrap's `L̄`.
fn to_raw_upstream(param: Parameterization, s_bar: &Mat, score: &Mat, wrap: &Kern) -> Result<(Mat, Option<Mat>)> {
    match param {
        Parameterization::Score => Ok((s_bar.clone(), None)),
        Parameterization::Noise => {
            let e_bar = -right_solve_lt(wrap.l(), s_bar)?;
            let l_bar = score.transpose() * &e_bar;
            Ok((e_bar, Some(l_bar)))
        }
    }
}

fn check_finite(v: f64, term: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteGradient { term })
    }
}

fn mat_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Evaluates the ELBO estimate for every row of `x` (`B×d`) under fixed
/// draws, optionally with gradients of the batch mean.
pub fn evaluate(
    spec: &DiffusionSpec,
    field: &dyn ScoreField,
    x: &Mat,
    draws: &[DatumDraws],
    opts: &Options,
    wants: Wants,
) -> Result<Evaluation> {
    let (b, d, k) = (x.nrows(), x.ncols(), spec.k());
    if draws.len() != b {
        return Err(Error::shape(b, draws.len()));
    }
    if b == 0 {
        return Err(Error::invalid("empty data batch"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("data contains non-finite values"));
    }
    let n_time = draws[0].times.len();
    if n_time == 0 {
        return Err(Error::invalid("n_time must be at least 1"));
    }
    let grads = wants.theta || wants.phi;
    if grads && (opts.form != Form::Dsm || opts.quadratic != Quadratic::Sampled) {
        return Err(Error::invalid("gradients are available for the sampled dsm form only"));
    }
    if let (Form::Ism, DivMode::Exact) = (opts.form, opts.div) {
        if d * k > EXACT_DIV_CAP {
            return Err(Error::invalid(format!(
                "exact divergence refused for d*K = {} > {EXACT_DIV_CAP}; use hutchinson",
                d * k
            )));
        }
    }
    let taped = wants.phi;
    let (eps, horizon) = (spec.eps(), spec.horizon());
    let c = (horizon - eps) / n_time as f64;
    let w = 1.0 / b as f64;
    let df = d as f64;

    let k_t = Kern::build(spec, horizon, Mode::DataOnly, taped).map_err(|e| e.at_time(horizon))?;
    let k_eps = Kern::build(spec, eps, Mode::FullState, taped).map_err(|e| e.at_time(eps))?;
    if k_eps.get().min_eig < COV_FLOOR {
        return Err(Error::DegenerateCovariance {
            min_eig: k_eps.get().min_eig,
        }
        .at_time(eps));
    }
    let k_eps_wrap = match opts.param {
        Parameterization::Noise => Some(Kern::build(spec, eps, Mode::DataOnly, taped).map_err(|e| e.at_time(eps))?),
        Parameterization::Score => None,
    };
    let aint_eps_tr = spec.integrated_drift(eps)?.trace();

    let (lv, lq_const) = if k > 1 {
        let lv = matops::cholesky(spec.aux_init_cov())?.factor.into_matrix();
        let log_det: f64 = lv.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        (lv, 0.5 * ((k - 1) as f64 * (2.0 * PI).ln() + log_det))
    } else {
        (Mat::zeros(0, 0), 0.0)
    };

    // Kernels and samples
    let prepared: Vec<Prepared> = (0..b)
        .into_par_iter()
        .map(|r| -> Result<Prepared> {
            let dr = &draws[r];
            let xr: Vec<f64> = x.row(r).iter().copied().collect();
            let (center, y0) = initial_states(spec, &xr, &dr.xi0, &lv);
            let mut strata = Vec::with_capacity(n_time);
            let mut y_s = Vec::with_capacity(n_time);
            for (j, &s) in dr.times.iter().enumerate() {
                let kern = Kern::build(spec, s, Mode::DataOnly, taped).map_err(|e| e.at_time(s))?;
                if kern.get().min_eig < COV_FLOOR {
                    return Err(Error::DegenerateCovariance {
                        min_eig: kern.get().min_eig,
                    }
                    .at_time(s));
                }
                y_s.push(&center * kern.get().mean_map.transpose() + &dr.xi[j] * kern.l().transpose());
                strata.push(kern);
            }
            let y_t = &center * k_t.get().mean_map.transpose() + &dr.xi_t * k_t.l().transpose();
            let y_eps = &y0 * k_eps.get().mean_map.transpose() + &dr.xi_eps * k_eps.l().transpose();
            let l_q = if k > 1 {
                df * lq_const + 0.5 * dr.xi0.norm_squared()
            } else {
                0.0
            };
            Ok(Prepared {
                strata,
                center,
                y0,
                y_s,
                y_t,
                y_eps,
                l_q,
            })
        })
        .collect::<Result<_>>()?;

    // Network outputs for every (datum, stratum) point and the ε point.
    let per = n_time + 1;
    let mut ys = Vec::with_capacity(b * per);
    let mut ss = Vec::with_capacity(b * per);
    for (p, dr) in prepared.iter().zip(draws) {
        for (y, &s) in p.y_s.iter().zip(&dr.times) {
            ys.push(y.clone());
            ss.push(s);
        }
        ys.push(p.y_eps.clone());
        ss.push(eps);
    }
    let raw = field.eval_batch(&ys, &ss)?;
    fn wrap_at<'a>(p: &'a Prepared, j: usize, eps_wrap: Option<&'a Kern>) -> Option<&'a Kern> {
        p.strata.get(j).or(eps_wrap)
    }
    let scores: Vec<Mat> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (bi, j) = (i / per, i % per);
            match wrap_at(&prepared[bi], j, k_eps_wrap.as_ref()) {
                Some(wk) => to_score(opts.param, r, wk),
                None => Ok(r.clone()),
            }
        })
        .collect::<Result<_>>()?;

    struct Local {
        terms: DatumTerms,
        s_bar: Vec<Mat>,
        m_bar: Vec<Mat>,
        l_bar: Vec<Mat>,
        drift: BaseGrad,
        t_bar: (Mat, Mat),
        eps_bar: (Mat, Mat),
    }

    let s_mat = spec.s_mat();
    let locals: Vec<Local> = (0..b)
        .into_par_iter()
        .map(|r| -> Result<Local> {
            let p = &prepared[r];
            let dr = &draws[r];
            let mut integrand = 0.0;
            let mut local = Local {
                terms: DatumTerms::default(),
                s_bar: Vec::new(),
                m_bar: Vec::new(),
                l_bar: Vec::new(),
                drift: BaseGrad::zeros(k),
                t_bar: (Mat::zeros(k, k), Mat::zeros(k, k)),
                eps_bar: (Mat::zeros(k, k), Mat::zeros(k, k)),
            };
            for (j, &s) in dr.times.iter().enumerate() {
                let kern = &p.strata[j];
                let g = spec.diffusion_sq(s)?;
                let a = spec.drift_matrix(s)?;
                let s_theta = &scores[r * per + j];
                let trace_term = df * a.trace();
                let val = match opts.form {
                    Form::Dsm => {
                        let s_q = kern.get().score_from_noise(&dr.xi[j]).map_err(|e| e.at_time(s))?;
                        let delta = s_theta - &s_q;
                        let quad = match opts.quadratic {
                            Quadratic::Sampled => 0.5 * (&s_q * &g).dot(&s_q),
                            Quadratic::Analytic => {
                                let l = kern.l();
                                let lg = l.solve_lower_triangular(&g).ok_or(Error::Singular { cond: f64::INFINITY })?;
                                0.5 * df * right_solve_lt(l, &lg)?.trace()
                            }
                        };
                        if grads {
                            let cw = c * w;
                            local.s_bar.push(-(&delta * &g) * cw);
                            let sq_bar = (s_theta * &g) * cw;
                            local.l_bar.push(-(s_q.transpose() * right_solve_lt(kern.l(), &sq_bar)?));
                            local.m_bar.push(Mat::zeros(k, k));
                            if wants.phi {
                                let g_bar = (s_q.transpose() * &s_q - delta.transpose() * &delta) * (0.5 * cw);
                                let a_bar = Mat::identity(k, k) * (cw * df);
                                local.drift.add(&adjoint::drift_backward(spec, s, &a_bar, &g_bar));
                            }
                        }
                        quad - 0.5 * (&delta * &g).dot(&delta) + trace_term
                    }
                    Form::Ism => {
                        let div = divergence(field, opts, kern, &p.y_s[j], s, &g, &dr.probes[j])
                            .map_err(|e| e.at_time(s))?
                            .0;
                        -0.5 * (s_theta * &g).dot(s_theta) - div + trace_term
                    }
                };
                integrand += c * val;
            }

            let l_t = spec.stationary_log_density(&p.y_t)?;
            let s_eps = &scores[r * per + n_time];
            let wmat = &dr.xi_eps + s_eps * k_eps.l();
            let trunc = df * aint_eps_tr + 0.5 * dr.xi_eps.norm_squared() - 0.5 * wmat.norm_squared();

            if grads {
                // l_T
                let y_bar = -(&p.y_t * s_mat) * w;
                local.t_bar = (y_bar.transpose() * &p.center, y_bar.transpose() * &dr.xi_t);
                // truncation
                let w_bar = -&wmat * w;
                local.s_bar.push(&w_bar * k_eps.l().transpose());
                local.eps_bar.1 = s_eps.transpose() * &w_bar;
            }

            local.terms = DatumTerms {
                l_t: check_finite(l_t, "l_T")?,
                l_q: check_finite(p.l_q, "l_q")?,
                integrand: check_finite(integrand, "integrand")?,
                likelihood_eps: check_finite(trunc, "likelihood_eps")?,
                total: l_t + integrand + p.l_q + trunc,
            };
            Ok(local)
        })
        .collect::<Result<_>>()?;

    let terms: Vec<DatumTerms> = locals.iter().map(|l| l.terms).collect();
    if !grads {
        return Ok(Evaluation {
            terms,
            grad_theta: Vec::new(),
            grad_base: None,
        });
    }

    // Network backward, integrand points and ε points separately so a
    // non-finite gradient can be attributed.
    let mut locals = locals;
    let mut raw_up = Vec::with_capacity(b * per);
    let mut wrap_l_bar: Vec<Option<Mat>> = Vec::with_capacity(b * per);
    for (r, loc) in locals.iter().enumerate() {
        for j in 0..per {
            let idx = r * per + j;
            let (up, lb) = match wrap_at(&prepared[r], j, k_eps_wrap.as_ref()) {
                Some(wk) => to_raw_upstream(opts.param, &loc.s_bar[j], &scores[idx], wk)?,
                None => (loc.s_bar[j].clone(), None),
            };
            raw_up.push(up);
            wrap_l_bar.push(lb);
        }
    }
    let np = field.param_count();
    let split = |keep_eps: bool| -> (Vec<AugmentedState>, Vec<f64>, Vec<Mat>) {
        let mut a = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..ys.len() {
            if (i % per == n_time) == keep_eps {
                a.0.push(ys[i].clone());
                a.1.push(ss[i]);
                a.2.push(raw_up[i].clone());
            }
        }
        a
    };
    let mut grad_theta = vec![0.0; np];
    let (ya, sa, ua) = split(false);
    let y_bar_int = field.backward_batch(&ya, &sa, &ua, &mut grad_theta)?;
    if grad_theta.iter().any(|v| !v.is_finite()) || !y_bar_int.iter().all(mat_finite) {
        return Err(Error::NonFiniteGradient { term: "integrand" });
    }
    let mut grad_eps = vec![0.0; np];
    let (yb, sb, ub) = split(true);
    let y_bar_eps = field.backward_batch(&yb, &sb, &ub, &mut grad_eps)?;
    if grad_eps.iter().any(|v| !v.is_finite()) || !y_bar_eps.iter().all(mat_finite) {
        return Err(Error::NonFiniteGradient { term: "likelihood_eps" });
    }
    for (g, e) in grad_theta.iter_mut().zip(&grad_eps) {
        *g += e;
    }
    if !wants.theta {
        grad_theta.clear();
    }
    if !wants.phi {
        return Ok(Evaluation {
            terms,
            grad_theta,
            grad_base: None,
        });
    }

    for (r, loc) in locals.iter_mut().enumerate() {
        let p = &prepared[r];
        let dr = &draws[r];
        for j in 0..n_time {
            let yb = &y_bar_int[r * n_time + j];
            loc.m_bar[j] += yb.transpose() * &p.center;
            loc.l_bar[j] += yb.transpose() * &dr.xi[j];
            if let Some(lb) = &wrap_l_bar[r * per + j] {
                loc.l_bar[j] += lb;
            }
        }
        let yb = &y_bar_eps[r];
        loc.eps_bar.0 += yb.transpose() * &p.y0;
        loc.eps_bar.1 += yb.transpose() * &dr.xi_eps;
    }

    // Stratum kernels, per datum in parallel, summed in order.
    let per_datum: Vec<BaseGrad> = locals
        .par_iter()
        .enumerate()
        .map(|(r, loc)| -> Result<BaseGrad> {
            let mut g = loc.drift.clone();
            for j in 0..n_time {
                g.add(&prepared[r].strata[j].backward(spec, &loc.m_bar[j], &loc.l_bar[j])?);
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut integrand_grad = BaseGrad::zeros(k);
    for g in &per_datum {
        integrand_grad.add(g);
    }
    if !integrand_grad.is_finite() {
        return Err(Error::NonFiniteGradient { term: "integrand" });
    }

    let mut t_m = Mat::zeros(k, k);
    let mut t_l = Mat::zeros(k, k);
    let mut e_m = Mat::zeros(k, k);
    let mut e_l = Mat::zeros(k, k);
    let mut w_l = Mat::zeros(k, k);
    for (r, loc) in locals.iter().enumerate() {
        t_m += &loc.t_bar.0;
        t_l += &loc.t_bar.1;
        e_m += &loc.eps_bar.0;
        e_l += &loc.eps_bar.1;
        if let Some(lb) = &wrap_l_bar[r * per + n_time] {
            w_l += lb;
        }
    }
    let lt_grad = k_t.backward(spec, &t_m, &t_l)?;
    if !lt_grad.is_finite() {
        return Err(Error::NonFiniteGradient { term: "l_T" });
    }
    let mut eps_grad = k_eps.backward(spec, &e_m, &e_l)?;
    let aint_bar = Mat::identity(k, k) * df;
    eps_grad.add(&adjoint::integrated_backward(spec, eps, &aint_bar, &Mat::zeros(k, k)));
    if let Some(wk) = &k_eps_wrap {
        eps_grad.add(&wk.backward(spec, &Mat::zeros(k, k), &w_l)?);
    }
    if !eps_grad.is_finite() {
        return Err(Error::NonFiniteGradient { term: "likelihood_eps" });
    }

    let mut total = integrand_grad;
    total.add(&lt_grad);
    total.add(&eps_grad);
    Ok(Evaluation {
        terms,
        grad_theta,
        grad_base: Some(total),
    })
}

/// `∇·(s_θ g²)` at one point, with the per-probe sample variance in
/// Hutchinson mode.
pub(crate) fn divergence(
    field: &dyn ScoreField,
    opts: &Options,
    wrap: &Kern,
    y: &AugmentedState,
    s: f64,
    g: &Mat,
    probes: &[Mat],
) -> Result<(f64, Option<f64>)> {
    let (d, k) = y.shape();
    let ups: Vec<Mat> = match opts.div {
        DivMode::Exact => (0..d * k)
            .map(|idx| {
                let (i, col) = (idx / k, idx % k);
                let mut u = Mat::zeros(d, k);
                u.set_row(i, &g.column(col).transpose());
                u
            })
            .collect(),
        DivMode::Hutchinson { .. } => {
            if probes.is_empty() {
                return Err(Error::invalid("hutchinson divergence needs at least one probe"));
            }
            probes.iter().map(|z| z * g).collect()
        }
    };
    let raw_ups: Vec<Mat> = ups
        .iter()
        .map(|u| match opts.param {
            Parameterization::Score => Ok(u.clone()),
            Parameterization::Noise => Ok(-right_solve_lt(wrap.l(), u)?),
        })
        .collect::<Result<_>>()?;
    let copies = vec![y.clone(); raw_ups.len()];
    let times = vec![s; raw_ups.len()];
    let mut scratch = vec![0.0; field.param_count()];
    let bars = field.backward_batch(&copies, &times, &raw_ups, &mut scratch)?;
    match opts.div {
        DivMode::Exact => Ok((
            bars.iter().enumerate().map(|(idx, yb)| yb[(idx / k, idx % k)]).sum(),
            None,
        )),
        DivMode::Hutchinson { .. } => {
            let ests: Vec<f64> = bars.iter().zip(probes).map(|(yb, z)| yb.dot(z)).collect();
            let n = ests.len() as f64;
            let mean = ests.iter().sum::<f64>() / n;
            let var = if ests.len() > 1 {
                ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok((mean, Some(var)))
        }
    }
}

pub(crate) fn plain_kernel(k: GaussianKernel) -> Kern {
    Kern::Plain(k)
}
