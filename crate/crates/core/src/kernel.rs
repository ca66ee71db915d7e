//! Gaussian transition laws `q(y_s | y₀)` and `q(y_s | x)` of a linear
//! inference process.
//!
//! The closed form exponentiates the integrated generator:
//!
//! ```text
//! M_s        = expm(∫₀ˢ A)
//! [C_s; H_s] = expm([[∫A, ∫g²], [0, −∫Aᵀ]]) · [Σ₀; I]
//! Σ_s        = C_s · H_s⁻¹
//! ```
//!
//! which is exact when the drift matrices commute across time. Once `∫A` is
//! large the fraction loses precision, and the covariance is taken from the
//! invariance of `N(0, S⁻¹)` instead: `Σ_s = S⁻¹ + M_s (Σ₀ − S⁻¹) M_sᵀ`.
//! Other schedules are integrated numerically with RK4.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use serde::Serialize;

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::matops::{self, LowerTriangular, Mat, Vector};
use crate::AugmentedState;

/// Eigenvalue floor below which scores and log-densities are refused.
pub const COV_FLOOR: f64 = 1e-12;

/// RK4 steps used when a spec with non-commuting schedules is routed to the
/// ODE path.
pub const DEFAULT_ODE_STEPS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Condition on the whole initial state `y₀`.
    FullState,
    /// Condition on the data `x` only; the auxiliary initial value is
    /// marginalized under `N(aux_init_mean, aux_init_cov)`.
    DataOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-state" => Ok(Mode::FullState),
            "data-only" => Ok(Mode::DataOnly),
            other => Err(Error::invalid(format!("unknown conditioning mode `{other}`"))),
        }
    }
}

/// What a kernel is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub mode: Mode,
    /// Initial covariance `Σ₀`.
    pub sigma0: Mat,
    /// Initial mean of the auxiliary coordinates (data-only mode).
    pub aux_mean: Vector,
}

impl Conditioning {
    pub fn full_state(k: usize) -> Self {
        Conditioning {
            mode: Mode::FullState,
            sigma0: Mat::zeros(k, k),
            aux_mean: Vector::zeros(k - 1),
        }
    }

    /// `Σ₀ = blockdiag(0, aux_init_cov)`, conditioning vector `[x, aux_init_mean]`.
    pub fn data_only(spec: &DiffusionSpec) -> Self {
        Conditioning {
            mode: Mode::DataOnly,
            sigma0: matops::block_diag(&Mat::zeros(1, 1), spec.aux_init_cov()),
            aux_mean: spec.aux_init_mean().clone(),
        }
    }

    pub fn for_mode(spec: &DiffusionSpec, mode: Mode) -> Self {
        match mode {
            Mode::FullState => Self::full_state(spec.k()),
            Mode::DataOnly => Self::data_only(spec),
        }
    }
}

/// How a kernel was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Route {
    ClosedForm,
    Ode { steps: usize },
}

/// Transition law shared by every data row.
#[derive(Clone, Debug, Serialize)]
pub struct GaussianKernel {
    pub s: f64,
    pub mode: Mode,
    pub route: Route,
    #[serde(serialize_with = "ser_mat")]
    pub mean_map: Mat,
    /// `mean_map · [0, aux_mean]`; zero in full-state mode.
    #[serde(serialize_with = "ser_vec")]
    pub mean_offset: Vector,
    #[serde(serialize_with = "ser_mat")]
    pub cov: Mat,
    #[serde(serialize_with = "ser_chol")]
    pub chol: LowerTriangular,
    #[serde(skip)]
    pub min_eig: f64,
}

fn ser_mat<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    matops::to_rows(m).serialize(s)
}

fn ser_vec<S: serde::Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
    v.as_slice().serialize(s)
}

fn ser_chol<S: serde::Serializer>(l: &LowerTriangular, s: S) -> std::result::Result<S::Ok, S::Error> {
    matops::to_rows(l.matrix()).serialize(s)
}

/// `‖∫A‖₁` above which the covariance switches to the invariance form.
const FRACTION_LIMIT: f64 = 6.0;

/// Intermediates of the matrix fraction.
#[derive(Clone, Debug)]
pub(crate) struct Fraction {
    pub block: Mat,
    pub c: Mat,
    pub h: Mat,
}

/// Intermediate values of the closed-form computation, reused by the
/// reverse-mode pass. `fraction` is `None` on the invariance branch.
#[derive(Clone, Debug)]
pub(crate) struct ClosedFormParts {
    pub aint: Mat,
    pub fraction: Option<Fraction>,
    pub mean_map: Mat,
    pub cov: Mat,
}

pub(crate) fn closed_form_parts(spec: &DiffusionSpec, s: f64, sigma0: &Mat) -> Result<ClosedFormParts> {
    let k = spec.k();
    let aint = spec.integrated_drift(s)?;
    let mean_map = matops::expm(&aint)?;

    if matops::norm1(&aint) > FRACTION_LIMIT {
        let delta = sigma0 - spec.stationary_cov();
        let cov = matops::symmetrize(&(spec.stationary_cov() + &mean_map * delta * mean_map.transpose()));
        return Ok(ClosedFormParts {
            aint,
            fraction: None,
            mean_map,
            cov,
        });
    }

    let gint = spec.integrated_diffusion_sq(s)?;
    let mut block = Mat::zeros(2 * k, 2 * k);
    block.view_mut((0, 0), (k, k)).copy_from(&aint);
    block.view_mut((0, k), (k, k)).copy_from(&gint);
    block.view_mut((k, k), (k, k)).copy_from(&(-aint.transpose()));
    let block_exp = matops::expm(&block)?;

    let e11 = block_exp.view((0, 0), (k, k));
    let e12 = block_exp.view((0, k), (k, k));
    let c = e11 * sigma0 + e12;
    let h = block_exp.view((k, k), (k, k)).into_owned();

    // Σ = C H⁻¹  ⇔  Hᵀ Σᵀ = Cᵀ
    let raw = matops::solve(&h.transpose(), &c.transpose())
        .map_err(|e| Error::KernelDegenerate {
            s,
            reason: format!("H_s not invertible: {e}"),
        })?
        .transpose();
    let cov = matops::symmetrize(&raw);
    Ok(ClosedFormParts {
        aint,
        fraction: Some(Fraction { block, c, h }),
        mean_map,
        cov,
    })
}

/// Factor used for sampling and scores: exact Cholesky, else the
/// semidefinite variant (zero columns for null directions), else jittered.
pub(crate) fn factor_cov(cov: &Mat, s: f64) -> Result<LowerTriangular> {
    if let Ok(c) = matops::cholesky(cov) {
        if c.jitter == 0.0 {
            return Ok(c.factor);
        }
    }
    if let Ok(l) = matops::cholesky_semidefinite(cov, 1e-10) {
        return Ok(l);
    }
    matops::cholesky(cov).map(|c| c.factor).map_err(|e| Error::KernelDegenerate {
        s,
        reason: format!("covariance not factorizable: {e}"),
    })
}

fn assemble(s: f64, cond: &Conditioning, route: Route, mean_map: Mat, cov: Mat) -> Result<GaussianKernel> {
    if mean_map.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::KernelDegenerate {
            s,
            reason: "non-finite mean map or covariance".into(),
        });
    }
    let k = mean_map.nrows();
    let mean_offset = match cond.mode {
        Mode::FullState => Vector::zeros(k),
        Mode::DataOnly => {
            let mut init = Vector::zeros(k);
            init.rows_mut(1, k - 1).copy_from(&cond.aux_mean);
            &mean_map * init
        }
    };
    let chol = factor_cov(&cov, s)?;
    let min_eig = matops::min_eigenvalue(&cov);
    Ok(GaussianKernel {
        s,
        mode: cond.mode,
        route,
        mean_map,
        mean_offset,
        cov,
        chol,
        min_eig,
    })
}

fn check_conditioning(spec: &DiffusionSpec, cond: &Conditioning) -> Result<()> {
    let k = spec.k();
    if cond.sigma0.shape() != (k, k) || cond.aux_mean.len() != k - 1 {
        return Err(Error::shape(format!("conditioning for K = {k}"), format!("sigma0 {}x{}", cond.sigma0.nrows(), cond.sigma0.ncols())));
    }
    if cond.mode == Mode::FullState && cond.sigma0.iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("full-state conditioning requires sigma0 = 0"));
    }
    Ok(())
}

/// Transition law at time `s`. Specs whose schedules do not commute are
/// integrated by RK4 and the returned kernel says so in `route`.
pub fn transition(spec: &DiffusionSpec, s: f64, cond: &Conditioning) -> Result<GaussianKernel> {
    if spec.schedules_commute() {
        transition_closed_form(spec, s, cond)
    } else {
        spec.check_time(s)?;
        transition_ode(spec, s, cond, DEFAULT_ODE_STEPS)
    }
}

/// The matrix-fraction closed form; refuses non-commuting schedules.
pub fn transition_closed_form(spec: &DiffusionSpec, s: f64, cond: &Conditioning) -> Result<GaussianKernel> {
    if !spec.schedules_commute() {
        return Err(Error::NonCommuting);
    }
    check_conditioning(spec, cond)?;
    let parts = closed_form_parts(spec, s, &cond.sigma0)?;
    assemble(s, cond, Route::ClosedForm, parts.mean_map, parts.cov)
}

/// Fixed-step RK4 integration of `M' = A M` and `Σ' = AΣ + ΣAᵀ + g²`.
pub fn transition_ode(spec: &DiffusionSpec, s: f64, cond: &Conditioning, steps: usize) -> Result<GaussianKernel> {
    spec.check_time(s)?;
    check_conditioning(spec, cond)?;
    if steps == 0 {
        return Err(Error::invalid("ODE steps must be positive"));
    }
    let k = spec.k();
    let h = s / steps as f64;
    let mut m = Mat::identity(k, k);
    let mut sig = cond.sigma0.clone();
    let field = |t: f64| -> Result<(Mat, Mat)> {
        let t = t.clamp(0.0, spec.horizon());
        Ok((spec.drift_matrix(t)?, spec.diffusion_sq(t)?))
    };
    let lyap = |a: &Mat, g: &Mat, x: &Mat| a * x + x * a.transpose() + g;
    for i in 0..steps {
        let t = i as f64 * h;
        let (a0, g0) = field(t)?;
        let (am, gm) = field(t + 0.5 * h)?;
        let (a1, g1) = field(t + h)?;

        let km1 = &a0 * &m;
        let km2 = &am * (&m + &km1 * (0.5 * h));
        let km3 = &am * (&m + &km2 * (0.5 * h));
        let km4 = &a1 * (&m + &km3 * h);
        m += (km1 + km2 * 2.0 + km3 * 2.0 + km4) * (h / 6.0);

        let ks1 = lyap(&a0, &g0, &sig);
        let ks2 = lyap(&am, &gm, &(&sig + &ks1 * (0.5 * h)));
        let ks3 = lyap(&am, &gm, &(&sig + &ks2 * (0.5 * h)));
        let ks4 = lyap(&a1, &g1, &(&sig + &ks3 * h));
        sig += (ks1 + ks2 * 2.0 + ks3 * 2.0 + ks4) * (h / 6.0);
    }
    assemble(s, cond, Route::Ode { steps }, m, matops::symmetrize(&sig))
}

impl GaussianKernel {
    pub fn k(&self) -> usize {
        self.mean_map.nrows()
    }

    /// Conditional mean per row. `center` is `y₀` (d×K) in full-state mode
    /// and the data column `x` (d×1) in data-only mode.
    pub fn mean(&self, center: &Mat) -> Result<AugmentedState> {
        let k = self.k();
        match self.mode {
            Mode::FullState => {
                if center.ncols() != k {
                    return Err(Error::shape(format!("d x {k} initial state"), format!("d x {}", center.ncols())));
                }
                Ok(center * self.mean_map.transpose())
            }
            Mode::DataOnly => {
                if center.ncols() != 1 {
                    return Err(Error::shape("d x 1 data column", format!("d x {}", center.ncols())));
                }
                let col0 = self.mean_map.column(0).transpose();
                let mut out = center * col0;
                for mut row in out.row_iter_mut() {
                    row += self.mean_offset.transpose();
                }
                Ok(out)
            }
        }
    }

    /// `y = mean + noise · Lᵀ`, row by row.
    pub fn sample(&self, center: &Mat, noise: &Mat) -> Result<AugmentedState> {
        let mean = self.mean(center)?;
        if noise.shape() != mean.shape() {
            return Err(Error::shape(
                format!("noise {}x{}", mean.nrows(), mean.ncols()),
                format!("{}x{}", noise.nrows(), noise.ncols()),
            ));
        }
        Ok(mean + noise * self.chol.matrix().transpose())
    }

    fn check_floor(&self) -> Result<()> {
        if self.min_eig < COV_FLOOR {
            Err(Error::DegenerateCovariance { min_eig: self.min_eig })
        } else {
            Ok(())
        }
    }

    /// `W = R·L⁻ᵀ`, i.e. `L⁻¹ r` per row.
    pub(crate) fn whiten(&self, residual: &Mat) -> Result<Mat> {
        let l = self.chol.matrix();
        let w = l
            .solve_lower_triangular(&residual.transpose())
            .ok_or_else(|| Error::KernelDegenerate {
                s: self.s,
                reason: "singular Cholesky factor".into(),
            })?;
        Ok(w.transpose())
    }

    /// Rows `ε ↦ −L⁻ᵀ ε`.
    pub fn score_from_noise(&self, noise: &Mat) -> Result<Mat> {
        let l = self.chol.matrix();
        let x = l
            .transpose()
            .solve_upper_triangular(&noise.transpose())
            .ok_or_else(|| Error::KernelDegenerate {
                s: self.s,
                reason: "singular Cholesky factor".into(),
            })?;
        Ok(-x.transpose())
    }

    /// `−Σ⁻¹(y_s − m)` per row.
    pub fn score(&self, y_s: &AugmentedState, center: &Mat) -> Result<Mat> {
        self.check_floor()?;
        let resid = y_s - self.mean(center)?;
        let w = self.whiten(&resid)?;
        self.score_from_noise(&w)
    }

    /// `Σ_rows log N(y_i; m_i, Σ)`.
    pub fn log_density(&self, y_s: &AugmentedState, center: &Mat) -> Result<f64> {
        self.check_floor()?;
        let resid = y_s - self.mean(center)?;
        let w = self.whiten(&resid)?;
        let k = self.k() as f64;
        let log_det: f64 = self.chol.matrix().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let per_row = -0.5 * k * (2.0 * PI).ln() - 0.5 * log_det;
        Ok(per_row * y_s.nrows() as f64 - 0.5 * w.norm_squared())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `score_of_kernel` as a free function.
pub fn score_of_kernel(kernel: &GaussianKernel, y_s: &AugmentedState, center: &Mat) -> Result<Mat> {
    kernel.score(y_s, center)
}

/// Kernels of one spec keyed by (quantized `s`, mode). Readers share a lock;
/// insertion takes the write lock once per missing key.
pub struct KernelCache {
    spec: DiffusionSpec,
    map: RwLock<HashMap<(i64, Mode), Arc<GaussianKernel>>>,
}

const QUANTUM: f64 = 1e-12;

impl KernelCache {
    pub fn new(spec: DiffusionSpec) -> Self {
        KernelCache {
            spec,
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    pub fn get(&self, s: f64, mode: Mode) -> Result<Arc<GaussianKernel>> {
        let key = ((s / QUANTUM).round() as i64, mode);
        if let Some(k) = self.map.read().expect("kernel cache poisoned").get(&key) {
            return Ok(Arc::clone(k));
        }
        let kernel = Arc::new(transition(&self.spec, s, &Conditioning::for_mode(&self.spec, mode))?);
        let mut map = self.map.write().expect("kernel cache poisoned");
        Ok(Arc::clone(map.entry(key).or_insert(kernel)))
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("kernel cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
