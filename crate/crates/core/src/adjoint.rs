//! Reverse-mode pullbacks of the transition kernel with respect to the base
//! matrices `(Q̂, D̂)`.

use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::kernel::{self, ClosedFormParts, Conditioning, GaussianKernel, Route};
use crate::matops::{self, Mat};

/// Sensitivities with respect to `(Q̂, D̂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseGrad {
    pub q: Mat,
    pub d: Mat,
}

impl BaseGrad {
    pub fn zeros(k: usize) -> Self {
        BaseGrad {
            q: Mat::zeros(k, k),
            d: Mat::zeros(k, k),
        }
    }

    pub fn add(&mut self, other: &BaseGrad) {
        self.q += &other.q;
        self.d += &other.d;
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.d.iter()).all(|v| v.is_finite())
    }
}

/// A kernel together with the intermediates needed by [`kernel_backward`].
pub struct TapedKernel {
    pub kernel: GaussianKernel,
    parts: ClosedFormParts,
    sigma0: Mat,
}

/// Closed-form transition with its tape. Requires commuting schedules.
pub fn taped_transition(spec: &DiffusionSpec, s: f64, cond: &Conditioning) -> Result<TapedKernel> {
    let kernel = kernel::transition_closed_form(spec, s, cond)?;
    debug_assert_eq!(kernel.route, Route::ClosedForm);
    let parts = kernel::closed_form_parts(spec, s, &cond.sigma0)?;
    Ok(TapedKernel {
        kernel,
        parts,
        sigma0: cond.sigma0.clone(),
    })
}

/// `Σ̄` from `L̄` for `Σ = L Lᵀ`: `sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)`, with `Φ` taking
/// the lower triangle and halving the diagonal.
pub fn cholesky_backward(l: &Mat, l_bar: &Mat) -> Result<Mat> {
    let n = l.nrows();
    let mut p = l.transpose() * matops::tril(l_bar);
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    let singular = || Error::KernelDegenerate {
        s: f64::NAN,
        reason: "singular Cholesky factor in backward pass".into(),
    };
    // X = L⁻ᵀ P, then X L⁻¹ = (L⁻ᵀ Xᵀ)ᵀ
    let lt = l.transpose();
    let x = lt.solve_upper_triangular(&p).ok_or_else(singular)?;
    let y = lt.solve_upper_triangular(&x.transpose()).ok_or_else(singular)?.transpose();
    Ok(matops::symmetrize(&y))
}

/// Pullback of `(mean_map, chol)` to `(∫A, ∫g²)`.
fn integrated_bars(spec: &DiffusionSpec, tk: &TapedKernel, m_bar: &Mat, l_bar: &Mat) -> Result<(Mat, Mat)> {
    let p = &tk.parts;
    let k = p.aint.nrows();
    let sigma_bar = cholesky_backward(tk.kernel.chol.matrix(), l_bar)?;

    let Some(fr) = &p.fraction else {
        // Σ = S⁻¹ + M (Σ₀ − S⁻¹) Mᵀ
        let delta = &tk.sigma0 - spec.stationary_cov();
        let m_total = m_bar + (&sigma_bar * &p.mean_map * delta) * 2.0;
        return Ok((matops::expm_backward(&p.aint, &m_total)?, Mat::zeros(k, k)));
    };

    // Σ = sym(C H⁻¹)
    let h_inv_t = matops::inverse(&fr.h.transpose())?;
    let r = matops::solve(&fr.h.transpose(), &fr.c.transpose())?.transpose();
    let c_bar = &sigma_bar * &h_inv_t;
    let h_bar = -(r.transpose() * &sigma_bar * &h_inv_t);

    let mut e_bar = Mat::zeros(2 * k, 2 * k);
    e_bar.view_mut((0, 0), (k, k)).copy_from(&(&c_bar * tk.sigma0.transpose()));
    e_bar.view_mut((0, k), (k, k)).copy_from(&c_bar);
    e_bar.view_mut((k, k), (k, k)).copy_from(&h_bar);
    let b_bar = matops::expm_backward(&fr.block, &e_bar)?;

    let mut aint_bar = b_bar.view((0, 0), (k, k)) - b_bar.view((k, k), (k, k)).transpose();
    aint_bar += matops::expm_backward(&p.aint, m_bar)?;
    let gint_bar = b_bar.view((0, k), (k, k)).into_owned();
    Ok((aint_bar, gint_bar))
}

/// Pullback of a kernel's `(mean_map, chol)` sensitivities to `(Q̂, D̂)`.
pub fn kernel_backward(spec: &DiffusionSpec, tk: &TapedKernel, m_bar: &Mat, l_bar: &Mat) -> Result<BaseGrad> {
    let (aint_bar, gint_bar) = integrated_bars(spec, tk, m_bar, l_bar)?;
    Ok(integrated_backward(spec, tk.kernel.s, &aint_bar, &gint_bar))
}

/// Pullback of `(∫₀ˢA, ∫₀ˢg²)` to `(Q̂, D̂)`.
pub fn integrated_backward(spec: &DiffusionSpec, s: f64, aint_bar: &Mat, gint_bar: &Mat) -> BaseGrad {
    let bq = spec.sched_q().integral(s);
    let bd = spec.sched_d().integral(s);
    weights_backward(spec, bq, bd, aint_bar, gint_bar)
}

/// Pullback of `(A(s), g²(s))` to `(Q̂, D̂)`.
pub fn drift_backward(spec: &DiffusionSpec, s: f64, a_bar: &Mat, g_bar: &Mat) -> BaseGrad {
    let bq = spec.sched_q().value(s);
    let bd = spec.sched_d().value(s);
    weights_backward(spec, bq, bd, a_bar, g_bar)
}

fn weights_backward(spec: &DiffusionSpec, bq: f64, bd: f64, a_bar: &Mat, g_bar: &Mat) -> BaseGrad {
    // A = −(bq Q̂ + bd D̂) S,  g² = 2 bd D̂
    let as_t = a_bar * spec.s_mat().transpose();
    BaseGrad {
        q: &as_t * (-bq),
        d: &as_t * (-bd) + g_bar * (2.0 * bd),
    }
}
