//! Toy datasets and CSV loading. Data matrices are `n×d`, one row per datum.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::Mat;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Dataset {
    /// Independent `N(mean_j, std_j²)` coordinates.
    Gaussian {
        n: usize,
        dim: usize,
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default)]
        std: Option<Vec<f64>>,
        #[serde(default)]
        seed: u64,
    },
    /// Equal-weight isotropic components.
    GaussianMixture {
        n: usize,
        #[serde(default = "default_centers")]
        centers: Vec<Vec<f64>>,
        #[serde(default = "default_mixture_std")]
        std: f64,
        #[serde(default)]
        seed: u64,
    },
    TwoMoons {
        n: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Uniform on the dark squares of a 4×4 board over `[-2, 2]²`.
    Checkerboard {
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    File { path: PathBuf },
}

fn default_centers() -> Vec<Vec<f64>> {
    vec![vec![-1.5, -1.5], vec![1.5, 1.5]]
}
fn default_mixture_std() -> f64 {
    0.5
}
fn default_moons_noise() -> f64 {
    0.1
}

impl Dataset {
    /// Two well-separated 2-D Gaussians.
    pub fn two_gaussians(n: usize, seed: u64) -> Self {
        Dataset::GaussianMixture {
            n,
            centers: default_centers(),
            std: default_mixture_std(),
            seed,
        }
    }

    pub fn standard_gaussian(n: usize, dim: usize, seed: u64) -> Self {
        Dataset::Gaussian {
            n,
            dim,
            mean: None,
            std: None,
            seed,
        }
    }

    pub fn load(&self) -> Result<Mat> {
        let data = match self {
            Dataset::Gaussian { n, dim, mean, std, seed } => gaussian(*n, *dim, mean.as_deref(), std.as_deref(), *seed)?,
            Dataset::GaussianMixture { n, centers, std, seed } => mixture(*n, centers, *std, *seed)?,
            Dataset::TwoMoons { n, noise, seed } => two_moons(*n, *noise, *seed),
            Dataset::Checkerboard { n, seed } => checkerboard(*n, *seed),
            Dataset::File { path } => read_csv(path)?,
        };
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        Ok(data)
    }

    /// Exact per-coordinate `(mean, variance)` when the data are independent
    /// Gaussian coordinates.
    pub fn gaussian_moments(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Dataset::Gaussian { dim, mean, std, .. } => {
                let m = mean.clone().unwrap_or_else(|| vec![0.0; *dim]);
                let v = std
                    .clone()
                    .unwrap_or_else(|| vec![1.0; *dim])
                    .iter()
                    .map(|s| s * s)
                    .collect();
                Some((m, v))
            }
            _ => None,
        }
    }
}

fn sample_rows(n: usize, d: usize, seed: u64, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<f64>) -> Mat {
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let row = f(&mut rng::stream(seed, i as u64, 0));
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

fn gaussian(n: usize, dim: usize, mean: Option<&[f64]>, std: Option<&[f64]>, seed: u64) -> Result<Mat> {
    if dim == 0 {
        return Err(Error::invalid("gaussian dataset needs dim >= 1"));
    }
    for v in [mean, std].into_iter().flatten() {
        if v.len() != dim {
            return Err(Error::shape(dim, v.len()));
        }
    }
    if std.is_some_and(|s| s.iter().any(|v| !(*v > 0.0))) {
        return Err(Error::invalid("std must be positive"));
    }
    Ok(sample_rows(n, dim, seed, |r| {
        (0..dim)
            .map(|j| {
                let z: f64 = r.sample(StandardNormal);
                mean.map_or(0.0, |m| m[j]) + std.map_or(1.0, |s| s[j]) * z
            })
            .collect()
    }))
}

fn mixture(n: usize, centers: &[Vec<f64>], std: f64, seed: u64) -> Result<Mat> {
    let dim = centers.first().map_or(0, Vec::len);
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::invalid("mixture centers must be non-empty and of equal length"));
    }
    if !(std > 0.0) {
        return Err(Error::invalid("std must be positive"));
    }
    Ok(sample_rows(n, dim, seed, |r| {
        let c = &centers[r.random_range(0..centers.len())];
        c.iter()
            .map(|m| {
                let z: f64 = r.sample(StandardNormal);
                m + std * z
            })
            .collect()
    }))
}

fn two_moons(n: usize, noise: f64, seed: u64) -> Mat {
    sample_rows(n, 2, seed, |r| {
        let t: f64 = r.random::<f64>() * PI;
        let (x, y) = if r.random::<bool>() {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
        vec![x + noise * a, y + noise * b]
    })
}

fn checkerboard(n: usize, seed: u64) -> Mat {
    sample_rows(n, 2, seed, |r| {
        let cell = r.random_range(0..8usize);
        let (row, col) = (cell / 2, 2 * (cell % 2) + (cell / 2) % 2);
        let x = col as f64 + r.random::<f64>() - 2.0;
        let y = row as f64 + r.random::<f64>() - 2.0;
        vec![x, y]
    })
}

/// Headerless or headed numeric CSV; a header row is detected by a
/// non-numeric first field.
pub fn read_csv(path: &Path) -> Result<Mat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::invalid(format!("{}: line {}: {e}", path.display(), i + 1))),
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{}: ragged rows", path.display())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{}: non-finite values", path.display())));
    }
    Ok(Mat::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Column means and the sample covariance.
pub fn moments(data: &Mat) -> (Vec<f64>, Mat) {
    let n = data.nrows() as f64;
    let mean: Vec<f64> = data.column_iter().map(|c| c.sum() / n).collect();
    let mut centered = data.clone();
    for (j, m) in mean.iter().enumerate() {
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn generators_have_expected_shapes_and_support() {
        let cb = Dataset::Checkerboard { n: 500, seed: 1 }.load().unwrap();
        for r in cb.row_iter() {
            let (i, j) = ((r[0] + 2.0).floor() as i64, (r[1] + 2.0).floor() as i64);
            assert_eq!((i + j) % 2, 0, "{r}");
        }
        let moons = Dataset::TwoMoons { n: 100, noise: 0.0, seed: 1 }.load().unwrap();
        assert_eq!(moons.shape(), (100, 2));
        let mix = Dataset::two_gaussians(4000, 2).load().unwrap();
        let (m, c) = moments(&mix);
        assert!(m.iter().all(|v| v.abs() < 0.1));
        assert!((c[(0, 0)] - (0.25 + 2.25)).abs() < 0.15);
    }

    #[test]
    fn generation_is_seeded() {
        let a = Dataset::standard_gaussian(10, 3, 7).load().unwrap();
        let b = Dataset::standard_gaussian(10, 3, 7).load().unwrap();
        let c = Dataset::standard_gaussian(10, 3, 8).load().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "x0,x1\n1.5,2\n-3,4e-1").unwrap();
        let m = read_csv(&p).unwrap();
        assert_eq!(m, Mat::from_row_slice(2, 2, &[1.5, 2.0, -3.0, 0.4]));
        let e = dir.path().join("e.csv");
        std::fs::File::create(&e).unwrap();
        assert!(Dataset::File { path: e }.load().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: Dataset = serde_json::from_str(r#"{"kind":"two-moons","n":5}"#).unwrap();
        assert_eq!(ok, Dataset::TwoMoons { n: 5, noise: 0.1, seed: 0 });
        assert!(serde_json::from_str::<Dataset>(r#"{"kind":"two-moons","n":5,"x":1}"#).is_err());
    }
}
