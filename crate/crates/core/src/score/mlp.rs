use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Parameterization, ScoreField};
use crate::error::{Error, Result};
use crate::matops::{Mat, Vector};
use crate::AugmentedState;

const FORMAT: &str = "mdm-mlp-v1";
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn deriv(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

/// Fully connected network on `[vec(y), embed(s)]` with `d·K` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpScore {
    d: usize,
    k: usize,
    hidden: Vec<usize>,
    time_embed: usize,
    activation: Activation,
    layers: Vec<(Mat, Vector)>,
}

/// JSON checkpoint: shape header plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format: String,
    pub d: usize,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub params: Vec<f64>,
}

struct Tape {
    pre: Vec<Mat>,
    post: Vec<Mat>,
}

impl MlpScore {
    /// Random initialization, `N(0, 1/fan_in)` weights and zero biases, with
    /// the output layer scaled down by 100.
    pub fn new(d: usize, k: usize, hidden: &[usize], time_embed: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(d, k, hidden, time_embed, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = net.layers.len();
        for (idx, (w, _)) in net.layers.iter_mut().enumerate() {
            let scale = (1.0 / w.ncols() as f64).sqrt() * if idx + 1 == n_layers { 0.01 } else { 1.0 };
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * scale;
            }
        }
        Ok(net)
    }

    /// 3×64 tanh network with a 16-wide time embedding.
    pub fn default_for(d: usize, k: usize, seed: u64) -> Self {
        Self::new(d, k, &[64, 64, 64], 16, Activation::Tanh, seed).expect("valid default shape")
    }

    pub fn zeros(d: usize, k: usize, hidden: &[usize], time_embed: usize, activation: Activation) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::invalid("network needs d, K >= 1"));
        }
        if time_embed % 2 != 0 {
            return Err(Error::invalid("time embedding width must be even"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let mut widths = vec![d * k + time_embed];
        widths.extend_from_slice(hidden);
        widths.push(d * k);
        let layers = widths
            .windows(2)
            .map(|w| (Mat::zeros(w[1], w[0]), Vector::zeros(w[1])))
            .collect();
        Ok(MlpScore {
            d,
            k,
            hidden: hidden.to_vec(),
            time_embed,
            activation,
            layers,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in &self.layers {
            for i in 0..w.nrows() {
                out.extend(w.row(i).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        let mut it = p.iter().copied();
        for (w, b) in &mut self.layers {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = it.next().unwrap();
                }
            }
            for v in b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn embed_into(&self, s: f64, out: &mut [f64]) {
        let half = self.time_embed / 2;
        for j in 0..half {
            let freq = if half > 1 {
                (64f64.ln() * j as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            };
            out[j] = (freq * s).sin();
            out[half + j] = (freq * s).cos();
        }
    }

    fn check(&self, y: &AugmentedState) -> Result<()> {
        if y.shape() != (self.d, self.k) {
            return Err(Error::shape(
                format!("{}x{}", self.d, self.k),
                format!("{}x{}", y.nrows(), y.ncols()),
            ));
        }
        Ok(())
    }

    fn inputs(&self, ys: &[AugmentedState], ss: &[f64]) -> Result<Mat> {
        let dk = self.d * self.k;
        let mut x = Mat::zeros(dk + self.time_embed, ys.len());
        for (c, (y, &s)) in ys.iter().zip(ss).enumerate() {
            self.check(y)?;
            let mut col = x.column_mut(c);
            for i in 0..self.d {
                for j in 0..self.k {
                    col[i * self.k + j] = y[(i, j)];
                }
            }
            self.embed_into(s, &mut col.as_mut_slice()[dk..]);
        }
        Ok(x)
    }

    fn forward(&self, x: Mat) -> (Mat, Tape) {
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut post = vec![x];
        for (idx, (w, b)) in self.layers.iter().enumerate() {
            let mut z = w * post.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if idx + 1 == n {
                return (z, Tape { pre, post });
            }
            let h = z.map(|v| self.activation.apply(v));
            pre.push(z);
            post.push(h);
        }
        unreachable!("network has at least one layer")
    }

    /// Returns the input sensitivity and adds parameter gradients into `grad`.
    fn backward(&self, tape: &Tape, out_bar: Mat, grad: &mut [f64]) -> Mat {
        let n = self.layers.len();
        let offsets = self.layer_offsets();
        let mut delta = out_bar;
        for idx in (0..n).rev() {
            let (w, _) = &self.layers[idx];
            let input = &tape.post[idx];
            let w_bar = &delta * input.transpose();
            let off = offsets[idx];
            let (rows, cols) = w.shape();
            for i in 0..rows {
                for j in 0..cols {
                    grad[off + i * cols + j] += w_bar[(i, j)];
                }
            }
            for i in 0..rows {
                grad[off + rows * cols + i] += delta.row(i).sum();
            }
            let mut h_bar = w.transpose() * &delta;
            if idx > 0 {
                let z = &tape.pre[idx - 1];
                let h = &tape.post[idx];
                for ((hb, zv), hv) in h_bar.iter_mut().zip(z.iter()).zip(h.iter()) {
                    *hb *= self.activation.deriv(*zv, *hv);
                }
            }
            delta = h_bar;
        }
        delta
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for (w, b) in &self.layers {
            offs.push(acc);
            acc += w.len() + b.len();
        }
        offs
    }

    fn unpack(&self, out: &Mat) -> Vec<Mat> {
        out.column_iter()
            .map(|c| Mat::from_fn(self.d, self.k, |i, j| c[i * self.k + j]))
            .collect()
    }

    fn pack(&self, ups: &[Mat]) -> Mat {
        let mut out = Mat::zeros(self.d * self.k, ups.len());
        for (c, u) in ups.iter().enumerate() {
            for i in 0..self.d {
                for j in 0..self.k {
                    out[(i * self.k + j, c)] = u[(i, j)];
                }
            }
        }
        out
    }

    pub fn checkpoint(&self, parameterization: Parameterization) -> MlpCheckpoint {
        MlpCheckpoint {
            format: FORMAT.into(),
            d: self.d,
            k: self.k,
            hidden: self.hidden.clone(),
            time_embed: self.time_embed,
            activation: self.activation,
            parameterization,
            params: self.params(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        if ck.format != FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let mut net = Self::zeros(ck.d, ck.k, &ck.hidden, ck.time_embed, ck.activation)?;
        net.set_params(&ck.params)?;
        Ok(net)
    }

    pub fn save_json(&self, parameterization: Parameterization) -> Result<String> {
        Ok(serde_json::to_string(&self.checkpoint(parameterization))?)
    }

    pub fn load_json(text: &str) -> Result<(Self, Parameterization)> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ck: MlpCheckpoint = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        Ok((Self::from_checkpoint(&ck)?, ck.parameterization))
    }
}

impl ScoreField for MlpScore {
    fn eval(&self, y: &AugmentedState, s: f64) -> Result<Mat> {
        Ok(self.eval_batch(std::slice::from_ref(y), &[s])?.pop().unwrap())
    }

    fn vjp(&self, y: &AugmentedState, s: f64, upstream: &Mat, grad: &mut [f64]) -> Result<Mat> {
        Ok(self
            .backward_batch(std::slice::from_ref(y), &[s], std::slice::from_ref(upstream), grad)?
            .pop()
            .unwrap())
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    fn eval_batch(&self, ys: &[AugmentedState], ss: &[f64]) -> Result<Vec<Mat>> {
        let parts: Vec<Result<Vec<Mat>>> = ys
            .par_chunks(CHUNK)
            .zip(ss.par_chunks(CHUNK))
            .map(|(yc, sc)| {
                let (out, _) = self.forward(self.inputs(yc, sc)?);
                Ok(self.unpack(&out))
            })
            .collect();
        let mut all = Vec::with_capacity(ys.len());
        for p in parts {
            all.extend(p?);
        }
        Ok(all)
    }

    fn backward_batch(&self, ys: &[AugmentedState], ss: &[f64], upstream: &[Mat], grad: &mut [f64]) -> Result<Vec<Mat>> {
        let np = self.param_count();
        let dk = self.d * self.k;
        let parts: Vec<Result<(Vec<Mat>, Vec<f64>)>> = ys
            .par_chunks(CHUNK)
            .zip(ss.par_chunks(CHUNK))
            .zip(upstream.par_chunks(CHUNK))
            .map(|((yc, sc), uc)| {
                let (_, tape) = self.forward(self.inputs(yc, sc)?);
                let mut g = vec![0.0; np];
                let x_bar = self.backward(&tape, self.pack(uc), &mut g);
                let y_bar = self.unpack(&x_bar.rows(0, dk).into_owned());
                Ok((y_bar, g))
            })
            .collect();
        let mut all = Vec::with_capacity(ys.len());
        for p in parts {
            let (yb, g) = p?;
            all.extend(yb);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(all)
    }
}
