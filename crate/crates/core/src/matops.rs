//! Dense small-matrix kernels.
//!
//! Every matrix in this crate is at most `2K x 2K` (or `4K x 4K` for Fréchet
//! derivatives) with `K <= 8`, so everything is stored dense and computed
//! without any structure exploitation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense row/column matrix used throughout the crate.
pub type Mat = DMatrix<f64>;
/// Dense column vector.
pub type Vector = DVector<f64>;

/// Lower-triangular factor with a zero strict upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular(Mat);

impl LowerTriangular {
    /// Wraps `m`, zeroing anything above the diagonal.
    pub fn from_lower(m: &Mat) -> Self {
        LowerTriangular(tril(m))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Mat {
        &self.0 * self.0.transpose()
    }
}

/// Result of [`cholesky`]: the factor and the diagonal jitter that was needed.
#[derive(Clone, Debug)]
pub struct Cholesky {
    pub factor: LowerTriangular,
    pub jitter: f64,
}

// [13/13] Padé coefficients for exp and the matching scaling threshold.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

fn check_square(m: &Mat, what: &str) -> Result<()> {
    if m.nrows() == m.ncols() && m.nrows() > 0 {
        Ok(())
    } else {
        Err(Error::shape(
            format!("non-empty square {what}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ))
    }
}

/// Maximum absolute column sum.
pub fn norm1(m: &Mat) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute error when `b` is zero.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Matrix exponential by scaling and squaring with a fixed [13/13] Padé
/// approximant.
pub fn expm(m: &Mat) -> Result<Mat> {
    check_square(m, "matrix")?;
    check_finite(m, "expm input")?;
    let n = m.nrows();
    let nrm = norm1(m);
    let squarings = if nrm > THETA13 {
        (nrm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = m / 2f64.powi(squarings);
    let b = &PADE13;
    let ident = Mat::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::invalid("Padé denominator is singular"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Matrix exponential together with its Fréchet derivative `L(x, e)`,
/// read off the upper-right block of `exp([[x, e], [0, x]])`.
pub fn expm_frechet(x: &Mat, e: &Mat) -> Result<(Mat, Mat)> {
    check_square(x, "matrix")?;
    let n = x.nrows();
    if e.shape() != x.shape() {
        return Err(Error::shape(
            format!("{n}x{n}"),
            format!("{}x{}", e.nrows(), e.ncols()),
        ));
    }
    let mut big = Mat::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(x);
    big.view_mut((0, n), (n, n)).copy_from(e);
    big.view_mut((n, n), (n, n)).copy_from(x);
    let eb = expm(&big)?;
    Ok((
        eb.view((0, 0), (n, n)).into_owned(),
        eb.view((0, n), (n, n)).into_owned(),
    ))
}

/// Pullback of `x ↦ exp(x)`: given the output sensitivity `gbar`, returns the
/// input sensitivity `L(xᵀ, gbar)`.
pub fn expm_backward(x: &Mat, gbar: &Mat) -> Result<Mat> {
    Ok(expm_frechet(&x.transpose(), gbar)?.1)
}

fn symmetry_tolerance(m: &Mat) -> f64 {
    1e-9 * m.amax().max(1.0)
}

fn factor_plain(m: &Mat) -> std::result::Result<Mat, usize> {
    let n = m.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Cholesky factorization `m = L Lᵀ`.
///
/// On a pivot failure the diagonal is loaded with `1e-10·trace/dim` and the
/// factorization retried, escalating the jitter 10x per retry, up to three
/// retries.
pub fn cholesky(m: &Mat) -> Result<Cholesky> {
    check_square(m, "matrix")?;
    check_finite(m, "cholesky input")?;
    let n = m.nrows();
    let tol = symmetry_tolerance(m);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::invalid(format!(
                    "cholesky input not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut pivot = match factor_plain(m) {
        Ok(l) => {
            return Ok(Cholesky {
                factor: LowerTriangular(l),
                jitter: 0.0,
            })
        }
        Err(p) => p,
    };
    let base = 1e-10 * m.trace() / n as f64;
    if base > 0.0 {
        let mut jitter = base;
        for _ in 0..3 {
            let mut jittered = m.clone();
            for i in 0..n {
                jittered[(i, i)] += jitter;
            }
            match factor_plain(&jittered) {
                Ok(l) => {
                    return Ok(Cholesky {
                        factor: LowerTriangular(l),
                        jitter,
                    })
                }
                Err(p) => pivot = p,
            }
            jitter *= 10.0;
        }
    }
    Err(Error::Factorization { pivot })
}

/// Cholesky-style factor of a positive semi-definite matrix: pivots within
/// `rel_tol·max|diag|` of zero produce a zero column instead of failing.
pub fn cholesky_semidefinite(m: &Mat, rel_tol: f64) -> Result<LowerTriangular> {
    check_square(m, "matrix")?;
    check_finite(m, "cholesky input")?;
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = rel_tol * scale.max(f64::MIN_POSITIVE);
    let off_tol = (tol * scale).sqrt() * 4.0 + tol;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > tol {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / ljj;
            }
        } else if d >= -tol {
            for i in (j + 1)..n {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                if v.abs() > off_tol {
                    return Err(Error::Factorization { pivot: j });
                }
            }
        } else {
            return Err(Error::Factorization { pivot: j });
        }
    }
    Ok(LowerTriangular(l))
}

/// Solves `a · x = b` by partial-pivoting LU, refusing matrices whose 1-norm
/// condition number exceeds `1/machine-epsilon`.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    check_square(a, "matrix")?;
    check_finite(a, "solve lhs")?;
    check_finite(b, "solve rhs")?;
    if b.nrows() != a.nrows() {
        return Err(Error::shape(
            format!("{} rows", a.nrows()),
            format!("{} rows", b.nrows()),
        ));
    }
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::Singular {
        cond: f64::INFINITY,
    })?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > 1.0 / f64::EPSILON {
        return Err(Error::Singular { cond });
    }
    lu.solve(b).ok_or(Error::Singular { cond })
}

/// Inverse via [`solve`].
pub fn inverse(a: &Mat) -> Result<Mat> {
    solve(a, &Mat::identity(a.nrows(), a.nrows()))
}

/// `q̃ − q̃ᵀ`.
pub fn make_skew(q_tilde: &Mat) -> Mat {
    q_tilde - q_tilde.transpose()
}

/// `d̃ d̃ᵀ`, with the result symmetrized entry-wise so it is exactly symmetric.
pub fn make_psd(d_tilde: &Mat) -> Mat {
    symmetrize(&(d_tilde * d_tilde.transpose()))
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Lower triangle including the diagonal.
pub fn tril(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank of a square matrix by singular values.
pub fn rank(m: &Mat) -> usize {
    let sv = m.clone().singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    let tol = top * (m.nrows().max(1) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|&&v| v > tol).count()
}

/// Block-diagonal assembly.
pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = Mat::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (m, m)).copy_from(b);
    out
}

/// Builds a matrix from row slices.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::invalid("ragged matrix rows"));
    }
    Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Matrix as nested row vectors.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
