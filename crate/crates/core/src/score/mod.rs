//! Score fields `s_θ(y, s)` over augmented states.

mod mlp;

pub use mlp::{Activation, MlpCheckpoint, MlpScore};

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::kernel::{self, Conditioning, GaussianKernel};
use crate::matops::{self, Mat, Vector};
use crate::AugmentedState;

/// A map from `(d×K state, time)` to a `d×K` score, with a vector–Jacobian
/// product for reverse-mode gradients.
pub trait ScoreField: Send + Sync {
    fn eval(&self, y: &AugmentedState, s: f64) -> Result<Mat>;

    /// Input sensitivity `ȳ = (∂f/∂y)ᵀ·upstream`; parameter gradients are
    /// added into `grad` (length [`ScoreField::param_count`]).
    fn vjp(&self, y: &AugmentedState, s: f64, upstream: &Mat, grad: &mut [f64]) -> Result<Mat>;

    fn param_count(&self) -> usize {
        0
    }

    fn eval_batch(&self, ys: &[AugmentedState], ss: &[f64]) -> Result<Vec<Mat>> {
        ys.iter().zip(ss).map(|(y, &s)| self.eval(y, s)).collect()
    }

    fn backward_batch(&self, ys: &[AugmentedState], ss: &[f64], upstream: &[Mat], grad: &mut [f64]) -> Result<Vec<Mat>> {
        ys.iter()
            .zip(ss)
            .zip(upstream)
            .map(|((y, &s), u)| self.vjp(y, s, u, grad))
            .collect()
    }
}

/// How a network output is turned into a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// The output is the score.
    Score,
    /// The output predicts the kernel noise `ε`; the score is `−L⁻ᵀ ε` with
    /// `L` the data-conditioned kernel factor at `s`.
    Noise,
}

/// `s_θ ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroScore;

impl ScoreField for ZeroScore {
    fn eval(&self, y: &AugmentedState, _s: f64) -> Result<Mat> {
        Ok(Mat::zeros(y.nrows(), y.ncols()))
    }

    fn vjp(&self, y: &AugmentedState, _s: f64, _upstream: &Mat, _grad: &mut [f64]) -> Result<Mat> {
        Ok(Mat::zeros(y.nrows(), y.ncols()))
    }
}

/// `s_θ(y) = −y·P` for a fixed symmetric `P`, applied per row.
#[derive(Clone, Debug)]
pub struct LinearScore {
    pub precision: Mat,
}

impl ScoreField for LinearScore {
    fn eval(&self, y: &AugmentedState, _s: f64) -> Result<Mat> {
        if y.ncols() != self.precision.nrows() {
            return Err(Error::shape(self.precision.nrows(), y.ncols()));
        }
        Ok(-(y * &self.precision))
    }

    fn vjp(&self, _y: &AugmentedState, _s: f64, upstream: &Mat, _grad: &mut [f64]) -> Result<Mat> {
        Ok(-(upstream * self.precision.transpose()))
    }
}

/// Exact marginal score for data with independent Gaussian features,
/// `x_i ~ N(μ_i, σ_i²)`, under data-conditioned (hybrid) kernels.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianScore {
    spec: DiffusionSpec,
    mean: Vector,
    var: Vector,
}

impl AnalyticGaussianScore {
    pub fn new(spec: DiffusionSpec, var: Vector) -> Result<Self> {
        let mean = Vector::zeros(var.len());
        Self::with_mean(spec, mean, var)
    }

    pub fn with_mean(spec: DiffusionSpec, mean: Vector, var: Vector) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape(var.len(), mean.len()));
        }
        if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("data variances must be finite and non-negative"));
        }
        Ok(AnalyticGaussianScore { spec, mean, var })
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    /// Marginal mean and precision of each feature's `K`-vector at time `s`.
    pub fn marginal(&self, s: f64) -> Result<(Vec<Vector>, Vec<Mat>)> {
        let kern = kernel::transition(&self.spec, s, &Conditioning::data_only(&self.spec))?;
        self.marginal_from(&kern)
    }

    fn marginal_from(&self, kern: &GaussianKernel) -> Result<(Vec<Vector>, Vec<Mat>)> {
        let m0 = kern.mean_map.column(0).into_owned();
        let outer = &m0 * m0.transpose();
        let mut means = Vec::with_capacity(self.var.len());
        let mut precs = Vec::with_capacity(self.var.len());
        for (mu, v) in self.mean.iter().zip(self.var.iter()) {
            let cov = &kern.cov + &outer * *v;
            if matops::min_eigenvalue(&cov) < kernel::COV_FLOOR {
                return Err(Error::DegenerateCovariance {
                    min_eig: matops::min_eigenvalue(&cov),
                });
            }
            means.push(&m0 * *mu + &kern.mean_offset);
            precs.push(matops::symmetrize(&matops::inverse(&cov)?));
        }
        Ok((means, precs))
    }

    fn check(&self, y: &AugmentedState) -> Result<()> {
        if y.nrows() != self.var.len() || y.ncols() != self.spec.k() {
            return Err(Error::shape(
                format!("{}x{}", self.var.len(), self.spec.k()),
                format!("{}x{}", y.nrows(), y.ncols()),
            ));
        }
        Ok(())
    }
}

impl ScoreField for AnalyticGaussianScore {
    fn eval(&self, y: &AugmentedState, s: f64) -> Result<Mat> {
        self.check(y)?;
        let (means, precs) = self.marginal(s)?;
        let mut out = Mat::zeros(y.nrows(), y.ncols());
        for i in 0..y.nrows() {
            let r = y.row(i).transpose() - &means[i];
            out.set_row(i, &(-(&precs[i] * r)).transpose());
        }
        Ok(out)
    }

    fn vjp(&self, y: &AugmentedState, s: f64, upstream: &Mat, _grad: &mut [f64]) -> Result<Mat> {
        self.check(y)?;
        let (_, precs) = self.marginal(s)?;
        let mut out = Mat::zeros(y.nrows(), y.ncols());
        for i in 0..y.nrows() {
            out.set_row(i, &(-(upstream.row(i) * &precs[i])));
        }
        Ok(out)
    }
}

/// `s_θ = −ε_θ·L⁻¹` row-wise, with `L` the data-conditioned kernel factor of
/// a fixed spec at the evaluation time.
pub struct NoisePrediction<F> {
    pub inner: F,
    spec: DiffusionSpec,
}

impl<F: ScoreField> NoisePrediction<F> {
    pub fn with_spec(inner: F, spec: DiffusionSpec) -> Self {
        NoisePrediction { inner, spec }
    }

    fn kernel(&self, s: f64) -> Result<GaussianKernel> {
        kernel::transition(&self.spec, s, &Conditioning::data_only(&self.spec))
    }
}

/// Wraps an `ε`-predictor with a single fixed kernel: `−L⁻ᵀ ε_model(y, s)`.
pub fn noise_prediction_wrap<F: ScoreField>(eps_model: F, kernel: GaussianKernel) -> FixedNoiseWrap<F> {
    FixedNoiseWrap { inner: eps_model, kernel }
}

pub struct FixedNoiseWrap<F> {
    pub inner: F,
    kernel: GaussianKernel,
}

fn wrap_vjp<F: ScoreField>(inner: &F, kern: &GaussianKernel, y: &AugmentedState, s: f64, upstream: &Mat, grad: &mut [f64]) -> Result<Mat> {
    // s = −E L⁻¹  ⇒  Ē = −S̄ L⁻ᵀ
    let l = kern.chol.matrix();
    let e_bar = l
        .solve_lower_triangular(&upstream.transpose())
        .ok_or_else(|| Error::KernelDegenerate {
            s,
            reason: "singular Cholesky factor".into(),
        })?
        .transpose();
    inner.vjp(y, s, &(-e_bar), grad)
}

impl<F: ScoreField> ScoreField for FixedNoiseWrap<F> {
    fn eval(&self, y: &AugmentedState, s: f64) -> Result<Mat> {
        self.kernel.score_from_noise(&self.inner.eval(y, s)?)
    }

    fn vjp(&self, y: &AugmentedState, s: f64, upstream: &Mat, grad: &mut [f64]) -> Result<Mat> {
        wrap_vjp(&self.inner, &self.kernel, y, s, upstream, grad)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

impl<F: ScoreField> ScoreField for NoisePrediction<F> {
    fn eval(&self, y: &AugmentedState, s: f64) -> Result<Mat> {
        self.kernel(s)?.score_from_noise(&self.inner.eval(y, s)?)
    }

    fn vjp(&self, y: &AugmentedState, s: f64, upstream: &Mat, grad: &mut [f64]) -> Result<Mat> {
        wrap_vjp(&self.inner, &self.kernel(s)?, y, s, upstream, grad)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn eval_batch(&self, ys: &[AugmentedState], ss: &[f64]) -> Result<Vec<Mat>> {
        let raw = self.inner.eval_batch(ys, ss)?;
        raw.iter()
            .zip(ss)
            .map(|(e, &s)| self.kernel(s)?.score_from_noise(e))
            .collect()
    }
}

impl<T: ScoreField + ?Sized> ScoreField for &T {
    fn eval(&self, y: &AugmentedState, s: f64) -> Result<Mat> {
        (**self).eval(y, s)
    }
    fn vjp(&self, y: &AugmentedState, s: f64, upstream: &Mat, grad: &mut [f64]) -> Result<Mat> {
        (**self).vjp(y, s, upstream, grad)
    }
    fn param_count(&self) -> usize {
        (**self).param_count()
    }
    fn eval_batch(&self, ys: &[AugmentedState], ss: &[f64]) -> Result<Vec<Mat>> {
        (**self).eval_batch(ys, ss)
    }
    fn backward_batch(&self, ys: &[AugmentedState], ss: &[f64], upstream: &[Mat], grad: &mut [f64]) -> Result<Vec<Mat>> {
        (**self).backward_batch(ys, ss, upstream, grad)
    }
}
