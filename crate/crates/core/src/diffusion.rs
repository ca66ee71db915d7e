//! Linear inference processes with a prescribed Gaussian stationary law.
//!
//! A process is described by a skew-symmetric mixing matrix `Q̂`, a PSD
//! dissipation matrix `D̂`, a stationary precision `S` and two positive scalar
//! schedules. Its drift and squared diffusion are
//!
//! ```text
//! A(s)  = −(b_q(s)·Q̂ + b_d(s)·D̂)·S
//! g²(s) = 2·b_d(s)·D̂
//! ```
//!
//! which leaves `N(0, S⁻¹)` invariant for every admissible `(Q̂, D̂)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{self, Mat, Vector};
use crate::AugmentedState;

/// Positive scalar time profile with a closed-form integral.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// `b(s) = b0`.
    Constant { b0: f64 },
    /// `b(s) = b0 + (b1 − b0)·s/horizon`.
    LinearBeta { b0: f64, b1: f64, horizon: f64 },
}

impl Schedule {
    pub fn constant(b0: f64) -> Self {
        Schedule::Constant { b0 }
    }

    pub fn linear(b0: f64, b1: f64, horizon: f64) -> Self {
        Schedule::LinearBeta { b0, b1, horizon }
    }

    pub fn value(&self, s: f64) -> f64 {
        match *self {
            Schedule::Constant { b0 } => b0,
            Schedule::LinearBeta { b0, b1, horizon } => b0 + (b1 - b0) * s / horizon,
        }
    }

    /// `∫₀ˢ b(ν) dν`.
    pub fn integral(&self, s: f64) -> f64 {
        match *self {
            Schedule::Constant { b0 } => b0 * s,
            Schedule::LinearBeta { b0, b1, horizon } => b0 * s + 0.5 * (b1 - b0) * s * s / horizon,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant { b0 } => b0.is_finite() && b0 > 0.0,
            Schedule::LinearBeta { b0, b1, horizon } => {
                b0.is_finite()
                    && b1.is_finite()
                    && horizon.is_finite()
                    && horizon > 0.0
                    && b0 >= 0.0
                    && b1 > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "schedule {self:?} is not positive on (0, T]"
            )))
        }
    }

    /// True when `self = c·other` for some constant `c > 0`.
    pub fn is_proportional_to(&self, other: &Schedule) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
        match (self, other) {
            (Schedule::Constant { .. }, Schedule::Constant { .. }) => true,
            (
                Schedule::LinearBeta { b0, b1, horizon },
                Schedule::LinearBeta {
                    b0: c0,
                    b1: c1,
                    horizon: h,
                },
            ) => close(*horizon, *h) && close(b0 * c1, b1 * c0),
            (Schedule::Constant { .. }, Schedule::LinearBeta { b0, b1, .. })
            | (Schedule::LinearBeta { b0, b1, .. }, Schedule::Constant { .. }) => close(*b0, *b1),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    kind: String,
    params: Vec<f64>,
}

impl From<&Schedule> for ScheduleDoc {
    fn from(s: &Schedule) -> Self {
        match *s {
            Schedule::Constant { b0 } => ScheduleDoc {
                kind: "constant".into(),
                params: vec![b0],
            },
            Schedule::LinearBeta { b0, b1, horizon } => ScheduleDoc {
                kind: "linear-beta".into(),
                params: vec![b0, b1, horizon],
            },
        }
    }
}

impl TryFrom<ScheduleDoc> for Schedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        let sched = match (doc.kind.as_str(), doc.params.as_slice()) {
            ("constant", [b0]) => Schedule::Constant { b0: *b0 },
            ("linear-beta", [b0, b1, horizon]) => Schedule::LinearBeta {
                b0: *b0,
                b1: *b1,
                horizon: *horizon,
            },
            (kind, params) => {
                return Err(Error::invalid(format!(
                    "unknown schedule `{kind}` with {} params",
                    params.len()
                )))
            }
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl Serialize for Schedule {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ScheduleDoc::from(self).serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let doc = ScheduleDoc::deserialize(de)?;
        Schedule::try_from(doc).map_err(serde::de::Error::custom)
    }
}

/// Full parameterization of a linear inference SDE over `K` coordinates per
/// data feature. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDoc", into = "SpecDoc")]
pub struct DiffusionSpec {
    k: usize,
    q_base: Mat,
    d_base: Mat,
    s_mat: Mat,
    sched_q: Schedule,
    sched_d: Schedule,
    horizon: f64,
    eps: f64,
    aux_init_cov: Mat,
    aux_init_mean: Vector,
    // derived
    stationary_cov: Mat,
    log_det_s: f64,
}

/// Default diffusion horizon.
pub const DEFAULT_HORIZON: f64 = 1.0;
/// Default truncation time.
pub const DEFAULT_EPS: f64 = 1e-3;

const STRUCTURE_TOL: f64 = 1e-12;

impl DiffusionSpec {
    /// Builds a spec with a shared schedule, `T = 1`, `ε = 1e-3` and the
    /// auxiliary initial law set to the stationary auxiliary marginal.
    pub fn new(q_base: Mat, d_base: Mat, s_mat: Mat, schedule: Schedule) -> Result<Self> {
        let spec = Self::assemble(
            q_base,
            d_base,
            s_mat,
            schedule.clone(),
            schedule,
            DEFAULT_HORIZON,
            DEFAULT_EPS,
            None,
        )?;
        spec.warn_if_rank_deficient();
        Ok(spec)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        q_base: Mat,
        d_base: Mat,
        s_mat: Mat,
        sched_q: Schedule,
        sched_d: Schedule,
        horizon: f64,
        eps: f64,
        aux: Option<(Vector, Mat)>,
    ) -> Result<Self> {
        let k = q_base.nrows();
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        for (name, m) in [("q_base", &q_base), ("d_base", &d_base), ("s_mat", &s_mat)] {
            if m.shape() != (k, k) {
                return Err(Error::shape(
                    format!("{name} {k}x{k}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
        }
        let scale_q = q_base.amax().max(1.0);
        if (&q_base + q_base.transpose()).amax() > STRUCTURE_TOL * scale_q {
            return Err(Error::invalid("q_base is not skew-symmetric"));
        }
        let q_base = (&q_base - q_base.transpose()) * 0.5;
        let scale_d = d_base.amax().max(1.0);
        if (&d_base - d_base.transpose()).amax() > STRUCTURE_TOL * scale_d {
            return Err(Error::invalid("d_base is not symmetric"));
        }
        let d_base = matops::symmetrize(&d_base);
        if matops::min_eigenvalue(&d_base) < -STRUCTURE_TOL * scale_d {
            return Err(Error::invalid("d_base is not positive semi-definite"));
        }
        let scale_s = s_mat.amax().max(1.0);
        if (&s_mat - s_mat.transpose()).amax() > STRUCTURE_TOL * scale_s {
            return Err(Error::invalid("s_mat is not symmetric"));
        }
        let s_mat = matops::symmetrize(&s_mat);
        let s_chol = matops::cholesky(&s_mat)
            .ok()
            .filter(|c| c.jitter == 0.0)
            .ok_or_else(|| Error::invalid("s_mat is not positive definite"))?;
        let log_det_s = 2.0 * s_chol.factor.matrix().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let stationary_cov = matops::symmetrize(&matops::inverse(&s_mat)?);

        sched_q.validate()?;
        sched_d.validate()?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !(eps.is_finite() && eps > 0.0 && eps < horizon) {
            return Err(Error::invalid("eps must lie in (0, T)"));
        }

        let (aux_init_mean, aux_init_cov) = match aux {
            Some(a) => a,
            None => (
                Vector::zeros(k - 1),
                stationary_cov.view((1, 1), (k - 1, k - 1)).into_owned(),
            ),
        };
        if aux_init_mean.len() != k - 1 || aux_init_cov.shape() != (k - 1, k - 1) {
            return Err(Error::shape(
                format!("auxiliary init of dimension {}", k - 1),
                format!(
                    "mean {} / cov {}x{}",
                    aux_init_mean.len(),
                    aux_init_cov.nrows(),
                    aux_init_cov.ncols()
                ),
            ));
        }
        if k > 1 {
            let ok = matops::cholesky(&aux_init_cov)
                .map(|c| c.jitter == 0.0)
                .unwrap_or(false);
            if !ok || aux_init_mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("aux_init_cov must be SPD with finite mean"));
            }
        }
        let aux_init_cov = if k > 1 {
            matops::symmetrize(&aux_init_cov)
        } else {
            aux_init_cov
        };

        Ok(DiffusionSpec {
            k,
            q_base,
            d_base,
            s_mat,
            sched_q,
            sched_d,
            horizon,
            eps,
            aux_init_cov,
            aux_init_mean,
            stationary_cov,
            log_det_s,
        })
    }

    fn rebuild(&self, f: impl FnOnce(&mut SpecParts)) -> Result<Self> {
        let mut parts = SpecParts {
            q_base: self.q_base.clone(),
            d_base: self.d_base.clone(),
            s_mat: self.s_mat.clone(),
            sched_q: self.sched_q.clone(),
            sched_d: self.sched_d.clone(),
            horizon: self.horizon,
            eps: self.eps,
            aux: Some((self.aux_init_mean.clone(), self.aux_init_cov.clone())),
        };
        f(&mut parts);
        Self::assemble(
            parts.q_base,
            parts.d_base,
            parts.s_mat,
            parts.sched_q,
            parts.sched_d,
            parts.horizon,
            parts.eps,
            parts.aux,
        )
    }

    /// Uses distinct schedules for `Q` and `D`.
    pub fn with_schedules(self, sched_q: Schedule, sched_d: Schedule) -> Result<Self> {
        self.rebuild(|p| {
            p.sched_q = sched_q;
            p.sched_d = sched_d;
        })
    }

    pub fn with_horizon(self, horizon: f64) -> Result<Self> {
        self.rebuild(|p| p.horizon = horizon)
    }

    pub fn with_eps(self, eps: f64) -> Result<Self> {
        self.rebuild(|p| p.eps = eps)
    }

    /// Sets `q(v₀ | x) = N(mean, cov)`.
    pub fn with_aux_init(self, mean: Vector, cov: Mat) -> Result<Self> {
        self.rebuild(|p| p.aux = Some((mean, cov)))
    }

    /// Same process with different base matrices; no rank warning is emitted.
    pub fn with_bases(&self, q_base: Mat, d_base: Mat) -> Result<Self> {
        self.rebuild(|p| {
            p.q_base = q_base;
            p.d_base = d_base;
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn q_base(&self) -> &Mat {
        &self.q_base
    }
    pub fn d_base(&self) -> &Mat {
        &self.d_base
    }
    /// Stationary precision `S`.
    pub fn s_mat(&self) -> &Mat {
        &self.s_mat
    }
    /// Stationary covariance `S⁻¹`.
    pub fn stationary_cov(&self) -> &Mat {
        &self.stationary_cov
    }
    pub fn sched_q(&self) -> &Schedule {
        &self.sched_q
    }
    pub fn sched_d(&self) -> &Schedule {
        &self.sched_d
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn aux_init_mean(&self) -> &Vector {
        &self.aux_init_mean
    }
    pub fn aux_init_cov(&self) -> &Mat {
        &self.aux_init_cov
    }
    pub fn log_det_s(&self) -> f64 {
        self.log_det_s
    }

    /// Whether `A(s)` and `g²(s)` commute across times, which makes the
    /// exponential of the integrated generator exact.
    pub fn schedules_commute(&self) -> bool {
        self.sched_q == self.sched_d
            || self.sched_q.is_proportional_to(&self.sched_d)
            || self.q_base.iter().all(|&v| v == 0.0)
            || self.d_base.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn check_time(&self, s: f64) -> Result<()> {
        let slack = 1e-12 * self.horizon;
        if s.is_finite() && s >= -slack && s <= self.horizon + slack {
            Ok(())
        } else {
            Err(Error::Domain {
                s,
                horizon: self.horizon,
            })
        }
    }

    /// `A(s) = −(b_q(s)·Q̂ + b_d(s)·D̂)·S`.
    pub fn drift_matrix(&self, s: f64) -> Result<Mat> {
        self.check_time(s)?;
        Ok(self.drift_from_weights(self.sched_q.value(s), self.sched_d.value(s)))
    }

    /// `g²(s) = 2·b_d(s)·D̂`.
    pub fn diffusion_sq(&self, s: f64) -> Result<Mat> {
        self.check_time(s)?;
        Ok(&self.d_base * (2.0 * self.sched_d.value(s)))
    }

    /// `∫₀ˢ A(ν) dν`.
    pub fn integrated_drift(&self, s: f64) -> Result<Mat> {
        self.check_time(s)?;
        Ok(self.drift_from_weights(self.sched_q.integral(s), self.sched_d.integral(s)))
    }

    /// `∫₀ˢ g²(ν) dν`.
    pub fn integrated_diffusion_sq(&self, s: f64) -> Result<Mat> {
        self.check_time(s)?;
        Ok(&self.d_base * (2.0 * self.sched_d.integral(s)))
    }

    fn drift_from_weights(&self, wq: f64, wd: f64) -> Mat {
        -((&self.q_base * wq + &self.d_base * wd) * &self.s_mat)
    }

    /// A factor `G` with `G Gᵀ = g²(s)`.
    pub fn diffusion_factor(&self, s: f64) -> Result<Mat> {
        let g2 = self.diffusion_sq(s)?;
        Ok(matops::cholesky_semidefinite(&g2, 1e-13)?.into_matrix())
    }

    /// Checks that `Q(s) + D(s)` has rank `K` at a few sampled times.
    pub fn is_full_rank(&self) -> bool {
        [0.25, 0.5, 1.0].iter().all(|f| {
            let s = f * self.horizon;
            let m = &self.q_base * self.sched_q.value(s) + &self.d_base * self.sched_d.value(s);
            matops::rank(&m) == self.k
        })
    }

    fn warn_if_rank_deficient(&self) {
        if !self.is_full_rank() {
            log::warn!(
                "Q + D is rank deficient; N(0, S⁻¹) may not be the unique stationary law"
            );
        }
    }

    /// `Σ_rows log N(u_i; 0, S⁻¹)`.
    pub fn stationary_log_density(&self, u: &AugmentedState) -> Result<f64> {
        if u.ncols() != self.k {
            return Err(Error::shape(format!("{} columns", self.k), format!("{} columns", u.ncols())));
        }
        let k = self.k as f64;
        let norm = -0.5 * k * (2.0 * PI).ln() + 0.5 * self.log_det_s;
        let mut total = 0.0;
        for row in u.row_iter() {
            let r = row.transpose();
            total += norm - 0.5 * (r.transpose() * &self.s_mat * &r)[(0, 0)];
        }
        Ok(total)
    }
}

struct SpecParts {
    q_base: Mat,
    d_base: Mat,
    s_mat: Mat,
    sched_q: Schedule,
    sched_d: Schedule,
    horizon: f64,
    eps: f64,
    aux: Option<(Vector, Mat)>,
}

/// JSON document layout of a [`DiffusionSpec`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    k: usize,
    q_base: Vec<Vec<f64>>,
    d_base: Vec<Vec<f64>>,
    s_mat: Vec<Vec<f64>>,
    sched_q: Schedule,
    sched_d: Schedule,
    horizon: f64,
    eps: f64,
    aux_init_cov: Vec<Vec<f64>>,
    aux_init_mean: Vec<f64>,
}

impl From<DiffusionSpec> for SpecDoc {
    fn from(s: DiffusionSpec) -> Self {
        SpecDoc {
            k: s.k,
            q_base: matops::to_rows(&s.q_base),
            d_base: matops::to_rows(&s.d_base),
            s_mat: matops::to_rows(&s.s_mat),
            sched_q: s.sched_q,
            sched_d: s.sched_d,
            horizon: s.horizon,
            eps: s.eps,
            aux_init_cov: matops::to_rows(&s.aux_init_cov),
            aux_init_mean: s.aux_init_mean.iter().copied().collect(),
        }
    }
}

impl TryFrom<SpecDoc> for DiffusionSpec {
    type Error = Error;

    fn try_from(doc: SpecDoc) -> Result<Self> {
        let q = matops::from_rows(&doc.q_base)?;
        if q.nrows() != doc.k {
            return Err(Error::shape(format!("k = {}", doc.k), format!("q_base rows {}", q.nrows())));
        }
        let aux_cov = if doc.k == 1 && doc.aux_init_cov.is_empty() {
            Mat::zeros(0, 0)
        } else {
            matops::from_rows(&doc.aux_init_cov)?
        };
        let spec = Self::assemble(
            q,
            matops::from_rows(&doc.d_base)?,
            matops::from_rows(&doc.s_mat)?,
            doc.sched_q,
            doc.sched_d,
            doc.horizon,
            doc.eps,
            Some((Vector::from_vec(doc.aux_init_mean), aux_cov)),
        )?;
        spec.warn_if_rank_deficient();
        Ok(spec)
    }
}

impl DiffusionSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))
    }
}

/// The named processes shipped with the toolkit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instance {
    Vpsde,
    Cld,
    Alda,
    Malda,
}

impl Instance {
    pub const ALL: [Instance; 4] = [Instance::Vpsde, Instance::Cld, Instance::Alda, Instance::Malda];
}

impl FromStr for Instance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vpsde" => Ok(Instance::Vpsde),
            "cld" => Ok(Instance::Cld),
            "alda" => Ok(Instance::Alda),
            "malda" => Ok(Instance::Malda),
            other => Err(Error::invalid(format!("unknown instance `{other}`"))),
        }
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instance::Vpsde => "vpsde",
            Instance::Cld => "cld",
            Instance::Alda => "alda",
            Instance::Malda => "malda",
        })
    }
}

/// Instance hyperparameters by name (`beta`, `gamma`, `m`, `l`, `xi`, ...).
pub type Hyperparams = BTreeMap<String, f64>;

fn take(h: &Hyperparams, allowed: &[&str], key: &str) -> Result<f64> {
    if let Some(bad) = h.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::invalid(format!("unexpected hyperparameter `{bad}`")));
    }
    let v = *h
        .get(key)
        .ok_or_else(|| Error::invalid(format!("missing hyperparameter `{key}`")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::invalid(format!("hyperparameter `{key}` must be positive")));
    }
    Ok(v)
}

/// Builds one of the named instances from its hyperparameters.
///
/// * `vpsde`: `beta` (constant) or `beta_min`/`beta_max` (linear schedule)
/// * `cld`: `beta`, `gamma`, `m`
/// * `alda`: `l`, `gamma`, `xi`
/// * `malda`: `l`, `gamma`
pub fn named_instance(instance: Instance, h: &Hyperparams) -> Result<DiffusionSpec> {
    match instance {
        Instance::Vpsde => {
            let allowed = ["beta", "beta_min", "beta_max"];
            if h.contains_key("beta") {
                vpsde(take(h, &allowed[..1], "beta")?)
            } else {
                vpsde_linear(take(h, &allowed[1..], "beta_min")?, take(h, &allowed[1..], "beta_max")?)
            }
        }
        Instance::Cld => {
            let allowed = ["beta", "gamma", "m"];
            cld(take(h, &allowed, "beta")?, take(h, &allowed, "gamma")?, take(h, &allowed, "m")?)
        }
        Instance::Alda => {
            let allowed = ["l", "gamma", "xi"];
            alda(take(h, &allowed, "l")?, take(h, &allowed, "gamma")?, take(h, &allowed, "xi")?)
        }
        Instance::Malda => {
            let allowed = ["l", "gamma"];
            malda(take(h, &allowed, "l")?, take(h, &allowed, "gamma")?)
        }
    }
}

/// Scalar variance-preserving process with constant `β`: `D̂ = 1`, `b = β/2`.
pub fn vpsde(beta: f64) -> Result<DiffusionSpec> {
    let one = Mat::identity(1, 1);
    DiffusionSpec::new(Mat::zeros(1, 1), one.clone(), one, Schedule::constant(beta / 2.0))
}

/// Variance-preserving process with `β(s)` linear from `beta_min` to `beta_max` over `[0, 1]`.
pub fn vpsde_linear(beta_min: f64, beta_max: f64) -> Result<DiffusionSpec> {
    let one = Mat::identity(1, 1);
    DiffusionSpec::new(
        Mat::zeros(1, 1),
        one.clone(),
        one,
        Schedule::linear(beta_min / 2.0, beta_max / 2.0, DEFAULT_HORIZON),
    )
}

/// Critically damped Langevin: position `z` and one velocity with mass `m`.
pub fn cld(beta: f64, gamma: f64, m: f64) -> Result<DiffusionSpec> {
    let q = Mat::from_row_slice(2, 2, &[0.0, -beta, beta, 0.0]);
    let d = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, gamma * beta]);
    let s = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0 / m]);
    DiffusionSpec::new(q, d, s, Schedule::constant(1.0))
}

/// Third-order Langevin with dissipation only on the last auxiliary.
pub fn alda(l: f64, gamma: f64, xi: f64) -> Result<DiffusionSpec> {
    let il = 1.0 / l;
    let q = Mat::from_row_slice(3, 3, &[0.0, -il, 0.0, il, 0.0, -gamma, 0.0, gamma, 0.0]);
    let d = Mat::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, xi / l]);
    let s = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, l, 0.0, 0.0, 0.0, l]);
    DiffusionSpec::new(q, d, s, Schedule::constant(1.0))
}

/// Third-order Langevin variant with `z` coupled to both auxiliaries and
/// dissipation on both.
pub fn malda(l: f64, gamma: f64) -> Result<DiffusionSpec> {
    let il = 1.0 / l;
    let q = Mat::from_row_slice(3, 3, &[0.0, -il, -il, il, 0.0, -gamma, il, gamma, 0.0]);
    let d = Mat::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, il, 0.0, 0.0, 0.0, il]);
    let s = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, l, 0.0, 0.0, 0.0, l]);
    DiffusionSpec::new(q, d, s, Schedule::constant(1.0))
}

/// A random full-rank process on `K` coordinates with a shared schedule
/// (alternating constant and linear by `seed`) and the given horizon.
pub fn random_spec(seed: u64, k: usize, horizon: f64) -> Result<DiffusionSpec> {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, 0, 0);
    let mut draw = |scale: f64| crate::rng::normal_mat(&mut rng, k, k) * scale;
    let q = matops::make_skew(&draw(0.5));
    let d = matops::make_psd(&draw(0.5)) + Mat::identity(k, k) * 0.1;
    let s = matops::make_psd(&draw(0.4)) + Mat::identity(k, k) * 0.5;
    let mut rng = crate::rng::stream(seed, 1, 0);
    let b0 = rng.random_range(0.3..1.0);
    let schedule = if seed % 2 == 0 {
        Schedule::constant(b0)
    } else {
        Schedule::linear(b0, b0 + rng.random_range(0.0..1.0), horizon)
    };
    DiffusionSpec::new(q, d, s, schedule)?.with_horizon(horizon)
}

/// Unconstrained dissipation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DTilde {
    /// `D̂ = diag(d̃ ⊙ d̃)`.
    Diagonal(Vec<f64>),
    /// `D̂ = D̃ D̃ᵀ`.
    Full(Vec<Vec<f64>>),
}

/// Learnable inference parameters `(Q̃, D̃)`. Always mapped through
/// [`matops::make_skew`] / [`matops::make_psd`] before use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnableParams {
    pub q_tilde: Vec<Vec<f64>>,
    pub d_tilde: DTilde,
}

impl LearnableParams {
    /// `Q̃ = 0`, `D̃ = I` (diagonal): with a template schedule of `β(s)/2`
    /// every coordinate follows the scalar variance-preserving process.
    pub fn vpsde_equivalent(k: usize) -> Self {
        LearnableParams {
            q_tilde: vec![vec![0.0; k]; k],
            d_tilde: DTilde::Diagonal(vec![1.0; k]),
        }
    }

    /// Same starting point with a full `D̃`.
    pub fn vpsde_equivalent_full(k: usize) -> Self {
        LearnableParams {
            q_tilde: vec![vec![0.0; k]; k],
            d_tilde: DTilde::Full(matops::to_rows(&Mat::identity(k, k))),
        }
    }

    pub fn k(&self) -> usize {
        self.q_tilde.len()
    }

    pub fn q_tilde_mat(&self) -> Mat {
        matops::from_rows(&self.q_tilde).expect("rectangular q_tilde")
    }

    pub fn d_tilde_mat(&self) -> Mat {
        match &self.d_tilde {
            DTilde::Diagonal(d) => Mat::from_diagonal(&Vector::from_column_slice(d)),
            DTilde::Full(rows) => matops::from_rows(rows).expect("rectangular d_tilde"),
        }
    }

    pub fn q_base(&self) -> Mat {
        matops::make_skew(&self.q_tilde_mat())
    }

    pub fn d_base(&self) -> Mat {
        matops::make_psd(&self.d_tilde_mat())
    }

    /// The induced process: the template with its base matrices replaced.
    pub fn to_spec(&self, template: &DiffusionSpec) -> Result<DiffusionSpec> {
        if self.k() != template.k() {
            return Err(Error::shape(format!("K = {}", template.k()), format!("K = {}", self.k())));
        }
        template.with_bases(self.q_base(), self.d_base())
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        let k = self.k();
        k * k
            + match &self.d_tilde {
                DTilde::Diagonal(_) => k,
                DTilde::Full(_) => k * k,
            }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened as `[Q̃ row-major, D̃]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.q_tilde.iter().flatten().copied().collect();
        match &self.d_tilde {
            DTilde::Diagonal(d) => v.extend_from_slice(d),
            DTilde::Full(rows) => v.extend(rows.iter().flatten().copied()),
        }
        v
    }

    /// Inverse of [`Self::to_vec`].
    pub fn set_from_slice(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.len(), "parameter length");
        let k = self.k();
        let mut it = v.iter().copied();
        for row in self.q_tilde.iter_mut() {
            for x in row.iter_mut() {
                *x = it.next().unwrap();
            }
        }
        match &mut self.d_tilde {
            DTilde::Diagonal(d) => d.iter_mut().for_each(|x| *x = it.next().unwrap()),
            DTilde::Full(rows) => rows
                .iter_mut()
                .take(k)
                .flat_map(|r| r.iter_mut())
                .for_each(|x| *x = it.next().unwrap()),
        }
    }

    /// Chain rule from sensitivities of `(Q̂, D̂)` to the flat parameter
    /// vector layout of [`Self::to_vec`].
    pub fn pullback(&self, q_base_bar: &Mat, d_base_bar: &Mat) -> Vec<f64> {
        let q_bar = q_base_bar - q_base_bar.transpose();
        let mut out: Vec<f64> = matops::to_rows(&q_bar).into_iter().flatten().collect();
        let dsym = d_base_bar + d_base_bar.transpose();
        match &self.d_tilde {
            DTilde::Diagonal(d) => {
                out.extend(d.iter().enumerate().map(|(i, di)| 2.0 * di * d_base_bar[(i, i)]))
            }
            DTilde::Full(_) => {
                let g = dsym * self.d_tilde_mat();
                out.extend(matops::to_rows(&g).into_iter().flatten());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(pairs: &[(&str, f64)]) -> Hyperparams {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn vpsde_drift_and_diffusion() {
        let spec = named_instance(Instance::Vpsde, &hp(&[("beta", 2.0)])).unwrap();
        assert_eq!(spec.k(), 1);
        assert_eq!(spec.q_base()[(0, 0)], 0.0);
        assert_eq!(spec.d_base()[(0, 0)], 1.0);
        assert_eq!(spec.s_mat()[(0, 0)], 1.0);
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(spec.drift_matrix(s).unwrap()[(0, 0)], -1.0);
            assert_eq!(spec.diffusion_sq(s).unwrap()[(0, 0)], 2.0);
        }
    }

    #[test]
    fn cld_drift_matches_published_form() {
        let spec = named_instance(Instance::Cld, &hp(&[("beta", 4.0), ("gamma", 1.0), ("m", 4.0)])).unwrap();
        assert_eq!(spec.q_base(), &Mat::from_row_slice(2, 2, &[0.0, -4.0, 4.0, 0.0]));
        assert_eq!(spec.d_base(), &Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 4.0]));
        assert_eq!(spec.s_mat(), &Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]));
        let a = spec.drift_matrix(0.5).unwrap();
        assert_eq!(a, Mat::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -1.0]));
        assert_eq!(spec.stationary_cov(), &Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
    }

    #[test]
    fn alda_diffusion_has_single_entry() {
        let (l, xi) = (2.0, 3.0);
        let spec = alda(l, 0.7, xi).unwrap();
        let g2 = spec.diffusion_sq(0.2).unwrap();
        let mut expected = Mat::zeros(3, 3);
        expected[(2, 2)] = 2.0 * xi / l;
        assert_eq!(g2, expected);
        assert!(spec.is_full_rank());
    }

    #[test]
    fn malda_structure() {
        let spec = named_instance(Instance::Malda, &hp(&[("l", 1.0), ("gamma", 1.0)])).unwrap();
        assert!(spec.q_base().iter().all(|v| *v == 0.0 || v.abs() == 1.0));
        assert_eq!(spec.d_base(), &Mat::from_diagonal(&Vector::from_vec(vec![0.0, 1.0, 1.0])));
        assert_eq!(spec.stationary_cov(), &Mat::identity(3, 3));
    }

    #[test]
    fn null_process_has_zero_drift() {
        let spec = DiffusionSpec::new(Mat::zeros(2, 2), Mat::zeros(2, 2), Mat::identity(2, 2), Schedule::constant(1.0)).unwrap();
        assert_eq!(spec.drift_matrix(0.4).unwrap(), Mat::zeros(2, 2));
        assert!(!spec.is_full_rank());
    }

    #[test]
    fn diffusion_sq_symmetric() {
        for inst in Instance::ALL {
            let spec = default_instance(inst);
            let g2 = spec.diffusion_sq(0.37).unwrap();
            assert_eq!(&g2 - g2.transpose(), Mat::zeros(spec.k(), spec.k()));
        }
    }

    pub(crate) fn default_instance(inst: Instance) -> DiffusionSpec {
        match inst {
            Instance::Vpsde => vpsde(2.0).unwrap(),
            Instance::Cld => cld(4.0, 1.0, 0.25).unwrap(),
            Instance::Alda => alda(1.0, 1.0, 1.0).unwrap(),
            Instance::Malda => malda(1.0, 1.0).unwrap(),
        }
    }

    #[test]
    fn time_domain_is_enforced() {
        let spec = vpsde(2.0).unwrap();
        assert!(matches!(spec.drift_matrix(1.5), Err(Error::Domain { .. })));
        assert!(matches!(spec.diffusion_sq(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn hyperparameter_errors() {
        assert!(named_instance(Instance::Cld, &hp(&[("beta", 4.0), ("gamma", -1.0), ("m", 1.0)])).is_err());
        assert!(named_instance(Instance::Cld, &hp(&[("beta", 4.0), ("gamma", 1.0)])).is_err());
        assert!(named_instance(Instance::Malda, &hp(&[("l", 1.0), ("gamma", 1.0), ("zeta", 1.0)])).is_err());
        assert!("vp-sde".parse::<Instance>().is_err());
    }

    #[test]
    fn k_one_is_always_vpsde() {
        let q = matops::make_skew(&Mat::from_element(1, 1, 0.8));
        let spec = DiffusionSpec::new(q, Mat::from_element(1, 1, 1.0), Mat::identity(1, 1), Schedule::linear(0.05, 10.0, 1.0)).unwrap();
        for s in [0.0, 0.25, 0.9] {
            let beta = 2.0 * spec.sched_d().value(s);
            assert_eq!(spec.drift_matrix(s).unwrap()[(0, 0)], -0.5 * beta);
            assert_eq!(spec.diffusion_sq(s).unwrap()[(0, 0)], beta);
        }
    }

    #[test]
    fn stationary_log_density_values() {
        let spec = vpsde(2.0).unwrap();
        let v = spec.stationary_log_density(&Mat::zeros(1, 1)).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);

        let spec = cld(4.0, 1.0, 4.0).unwrap();
        let one = spec.stationary_log_density(&Mat::zeros(1, 2)).unwrap();
        let expected = -0.5 * (2.0 * PI).ln() - 0.5 * (2.0 * PI * 4.0).ln();
        assert!((one - expected).abs() < 1e-14);
        let row = Mat::from_row_slice(1, 2, &[0.3, -1.1]);
        let two = Mat::from_row_slice(2, 2, &[0.3, -1.1, 0.3, -1.1]);
        let a = spec.stationary_log_density(&row).unwrap();
        let b = spec.stationary_log_density(&two).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(spec.stationary_log_density(&Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let spec = cld(4.0 / 3.0, 0.1, 0.25)
            .unwrap()
            .with_schedules(Schedule::linear(0.1, 9.9, 1.0), Schedule::constant(std::f64::consts::E))
            .unwrap()
            .with_eps(1.234567e-3)
            .unwrap();
        let text = spec.to_json().unwrap();
        let back = DiffusionSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn json_rejects_unknown_keys_with_path() {
        let text = vpsde(2.0).unwrap().to_json().unwrap().replace("\"horizon\"", "\"horizn\"");
        let err = DiffusionSpec::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("horizn"), "{err}");
    }

    #[test]
    fn commutativity_flag() {
        let spec = cld(4.0, 1.0, 0.25).unwrap();
        assert!(spec.schedules_commute());
        let split = spec
            .clone()
            .with_schedules(Schedule::linear(0.1, 2.0, 1.0), Schedule::constant(1.0))
            .unwrap();
        assert!(!split.schedules_commute());
        let prop = spec
            .with_schedules(Schedule::linear(0.1, 2.0, 1.0), Schedule::linear(0.2, 4.0, 1.0))
            .unwrap();
        assert!(prop.schedules_commute());
    }

    #[test]
    fn aux_init_defaults_to_stationary_block() {
        let spec = cld(4.0, 1.0, 0.25).unwrap();
        assert_eq!(spec.aux_init_cov(), &Mat::from_element(1, 1, 0.25));
        assert_eq!(spec.aux_init_mean().len(), 1);
    }

    #[test]
    fn learnable_params_map_to_valid_specs() {
        let template = vpsde_linear(0.1, 20.0).unwrap();
        let template2 = DiffusionSpec::new(
            Mat::zeros(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            template.sched_d().clone(),
        )
        .unwrap();
        let mut p = LearnableParams::vpsde_equivalent(2);
        let spec = p.to_spec(&template2).unwrap();
        assert_eq!(spec.d_base(), &Mat::identity(2, 2));
        assert_eq!(spec.q_base(), &Mat::zeros(2, 2));

        let v: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        p.set_from_slice(&v);
        assert_eq!(p.to_vec(), v);
        let spec = p.to_spec(&template2).unwrap();
        let q = spec.q_base();
        assert_eq!(q + q.transpose(), Mat::zeros(2, 2));
        assert!(matops::min_eigenvalue(spec.d_base()) >= 0.0);
    }

    #[test]
    fn learnable_pullback_matches_finite_differences() {
        for mut p in [LearnableParams::vpsde_equivalent(3), LearnableParams::vpsde_equivalent_full(3)] {
            let v: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 1.3).cos()).collect();
            p.set_from_slice(&v);
            let wq = Mat::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.3);
            let wd = Mat::from_fn(3, 3, |i, j| ((i + 2 * j) as f64).sin());
            let f = |p: &LearnableParams| p.q_base().dot(&wq) + p.d_base().dot(&wd);
            let g = p.pullback(&wq, &wd);
            for i in 0..p.len() {
                let h = 1e-6;
                let mut a = p.clone();
                let mut b = p.clone();
                let mut va = v.clone();
                let mut vb = v.clone();
                va[i] += h;
                vb[i] -= h;
                a.set_from_slice(&va);
                b.set_from_slice(&vb);
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "param {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
