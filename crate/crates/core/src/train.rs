//! Joint stochastic ascent of the ELBO in the score network and, optionally,
//! the inference parameters `(Q̃, D̃)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSpec, LearnableParams};
use crate::elbo::{self, Estimate, Form};
use crate::error::{Error, Result};
use crate::matops::Mat;
use crate::objective::{self, DatumDraws, Options, Wants};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::score::{Activation, MlpScore, NoisePrediction, Parameterization, ScoreField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_embed")]
    pub time_embed: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_param")]
    pub parameterization: Parameterization,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}
fn default_time_embed() -> usize {
    16
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_param() -> Parameterization {
    Parameterization::Noise
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            time_embed: default_time_embed(),
            activation: default_activation(),
            parameterization: default_param(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr_theta: f64,
    #[serde(default = "default_lr")]
    pub lr_phi: f64,
    #[serde(default)]
    pub learn_inference: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Time draws per datum in each training step.
    #[serde(default = "default_train_n_time")]
    pub n_time: usize,
    /// Time draws per datum in held-out evaluations.
    #[serde(default = "default_eval_n_time")]
    pub eval_n_time: usize,
    /// Linear ramp of the `φ` learning rate over this many steps.
    #[serde(default = "default_warmup")]
    pub warmup_phi: usize,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_eval_every() -> usize {
    100
}
fn default_train_n_time() -> usize {
    1
}
fn default_eval_n_time() -> usize {
    16
}
fn default_warmup() -> usize {
    10
}

impl TrainConfig {
    pub fn new(steps: usize, batch: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch,
            lr_theta: default_lr(),
            lr_phi: default_lr(),
            learn_inference: false,
            seed,
            eval_every: default_eval_every().min(steps.max(1)),
            optimizer: OptimizerConfig::default(),
            n_time: default_train_n_time(),
            eval_n_time: default_eval_n_time(),
            warmup_phi: default_warmup(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v >= 0.0;
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if !lr_ok(self.lr_theta) || !lr_ok(self.lr_phi) {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        if self.eval_every == 0 || (self.steps > 0 && self.eval_every > self.steps) {
            return Err(Error::invalid(format!("eval_every must lie in [1, steps], got {}", self.eval_every)));
        }
        if self.n_time == 0 || self.eval_n_time == 0 {
            return Err(Error::invalid("n_time and eval_n_time must be positive"));
        }
        Ok(())
    }
}

/// The inference process being trained against.
#[derive(Clone, Debug, PartialEq)]
pub enum Inference {
    Fixed(DiffusionSpec),
    /// `(Q̂, D̂)` from the parameters; everything else from the template.
    Learnable {
        params: LearnableParams,
        template: DiffusionSpec,
    },
}

impl Inference {
    pub fn spec(&self) -> Result<DiffusionSpec> {
        match self {
            Inference::Fixed(s) => Ok(s.clone()),
            Inference::Learnable { params, template } => params.to_spec(template),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Inference::Fixed(s) => s.k(),
            Inference::Learnable { template, .. } => template.k(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub elbo: f64,
    pub stderr: f64,
    #[serde(rename = "grad-norm-theta")]
    pub grad_norm_theta: f64,
    #[serde(rename = "grad-norm-phi")]
    pub grad_norm_phi: f64,
}

/// Held-out ELBO per datum (nats, summed over coordinates).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub elbo: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub score: MlpScore,
    pub parameterization: Parameterization,
    pub inference: Inference,
    pub opt_theta: Optimizer,
    pub opt_phi: Option<Optimizer>,
    pub step: usize,
    pub history: Vec<LogRecord>,
}

impl TrainState {
    pub fn new(d: usize, inference: Inference, config: &TrainConfig) -> Result<Self> {
        let m = &config.model;
        let score = MlpScore::new(d, inference.k(), &m.hidden, m.time_embed, m.activation, rng::child_seed(config.seed, u64::MAX))?;
        let opt_theta = Optimizer::new(config.optimizer, score.params().len());
        let opt_phi = match &inference {
            Inference::Learnable { params, .. } => Some(Optimizer::new(config.optimizer, params.len())),
            Inference::Fixed(_) => None,
        };
        inference.spec()?;
        Ok(TrainState {
            score,
            parameterization: m.parameterization,
            inference,
            opt_theta,
            opt_phi,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn spec(&self) -> Result<DiffusionSpec> {
        self.inference.spec()
    }

    /// The trained model as a score field of the current process.
    pub fn score_field(&self) -> Result<Box<dyn ScoreField + '_>> {
        Ok(match self.parameterization {
            Parameterization::Score => Box::new(&self.score),
            Parameterization::Noise => Box::new(NoisePrediction::with_spec(&self.score, self.spec()?)),
        })
    }

    fn options(&self) -> Options {
        Options {
            param: self.parameterization,
            ..Options::default()
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One ascent step on the minibatch `batch` (`B×d`), with draws seeded by
/// `step_seed`.
pub fn train_step(state: &mut TrainState, batch: &Mat, config: &TrainConfig, step_seed: u64) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::invalid("empty minibatch"));
    }
    if batch.ncols() != state.score.d() {
        return Err(Error::shape(format!("{} data columns", state.score.d()), batch.ncols()));
    }
    let spec = state.spec()?;
    let learn = config.learn_inference && matches!(state.inference, Inference::Learnable { .. });
    let draws = DatumDraws::batch(&spec, batch.ncols(), step_seed, batch.nrows(), config.n_time, 0);
    let ev = objective::evaluate(
        &spec,
        &state.score,
        batch,
        &draws,
        &state.options(),
        Wants { theta: true, phi: learn },
    )?;
    let summary = elbo::ElboBreakdown::from_terms(&ev.terms, batch.ncols());

    // ascend: minimize −ELBO
    let g_theta: Vec<f64> = ev.grad_theta.iter().map(|g| -g).collect();
    let mut params = state.score.params();
    state.opt_theta.step(&mut params, &g_theta, config.lr_theta);
    state.score.set_params(&params)?;

    let mut grad_norm_phi = 0.0;
    if learn {
        let base = ev.grad_base.as_ref().ok_or(Error::NonFiniteGradient { term: "l_T" })?;
        if let (Inference::Learnable { params: phi, .. }, Some(opt)) = (&mut state.inference, state.opt_phi.as_mut()) {
            let g_phi: Vec<f64> = phi.pullback(&base.q, &base.d).iter().map(|g| -g).collect();
            grad_norm_phi = l2(&g_phi);
            let ramp = ((state.step + 1) as f64 / config.warmup_phi.max(1) as f64).min(1.0);
            let mut v = phi.to_vec();
            opt.step(&mut v, &g_phi, config.lr_phi * ramp);
            phi.set_from_slice(&v);
        }
        state.spec()?;
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { term: "integrand" });
    }
    state.step += 1;
    state.history.push(LogRecord {
        step: state.step,
        elbo: summary.total,
        stderr: summary.stderr,
        grad_norm_theta: l2(&g_theta),
        grad_norm_phi,
    });
    Ok(())
}

/// Held-out ELBO with the evaluation seed fixed across calls.
pub fn evaluate_state(state: &TrainState, data: &Mat, config: &TrainConfig) -> Result<EvalRecord> {
    let spec = state.spec()?;
    let est = Estimate {
        param: state.parameterization,
        ..Estimate::new(config.eval_n_time, rng::child_seed(config.seed, u64::MAX - 1), Form::Dsm)
    };
    let e = elbo::estimate_elbo_with(&spec, &state.score, data, &est)?;
    Ok(EvalRecord {
        step: state.step,
        elbo: e.total,
        stderr: e.stderr,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub evals: Vec<EvalRecord>,
    pub best: EvalRecord,
    pub last: EvalRecord,
    /// Rows of the held-out split.
    pub heldout: Mat,
}

/// Deterministic 90/10 split by seeded permutation: `(train, heldout)`.
pub fn split(data: &Mat, seed: u64) -> (Mat, Mat) {
    let n = data.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, u64::MAX - 2, 0));
    let n_held = if n >= 2 { (n / 10).max(1) } else { 0 };
    let take = |ids: &[usize]| Mat::from_fn(ids.len(), data.ncols(), |i, j| data[(ids[i], j)]);
    (take(&idx[n_held..]), take(&idx[..n_held]))
}

/// Runs `config.steps` steps with minibatches drawn with replacement from
/// the training split, evaluating on the held-out split at step 0, every
/// `eval_every` steps and at the end.
pub fn fit(data: &Mat, inference: Inference, config: &TrainConfig) -> Result<(TrainState, TrainReport)> {
    config.validate()?;
    let (train, heldout) = split(data, config.seed);
    if train.nrows() < config.batch || heldout.nrows() == 0 {
        return Err(Error::invalid(format!(
            "dataset of {} rows is too small for batch {}",
            data.nrows(),
            config.batch
        )));
    }
    let mut state = TrainState::new(data.ncols(), inference, config)?;
    let mut evals = vec![evaluate_state(&state, &heldout, config)?];
    for step in 0..config.steps {
        let step_seed = rng::child_seed(config.seed, step as u64);
        let mut pick = rng::stream(step_seed, u64::MAX, 0);
        let rows: Vec<usize> = (0..config.batch).map(|_| pick.random_range(0..train.nrows())).collect();
        let batch = Mat::from_fn(rows.len(), train.ncols(), |i, j| train[(rows[i], j)]);
        train_step(&mut state, &batch, config, step_seed)?;
        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            evals.push(evaluate_state(&state, &heldout, config)?);
            let e = evals.last().unwrap();
            log::info!("step {} held-out elbo {:.5} ± {:.5}", e.step, e.elbo, e.stderr);
        }
    }
    let last = *evals.last().unwrap();
    let best = *evals
        .iter()
        .max_by(|a, b| a.elbo.total_cmp(&b.elbo))
        .unwrap();
    Ok((
        state,
        TrainReport {
            evals,
            best,
            last,
            heldout,
        },
    ))
}

pub fn write_log_csv(out: impl Write, log: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "elbo", "stderr", "grad-norm-theta", "grad-norm-phi"])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            format!("{:?}", r.elbo),
            format!("{:?}", r.stderr),
            format!("{:?}", r.grad_norm_theta),
            format!("{:?}", r.grad_norm_phi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{self, Schedule};

    fn gaussian_data(n: usize, d: usize, seed: u64) -> Mat {
        rng::normal_mat(&mut rng::stream(seed, 0, 0), n, d)
    }

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                hidden: vec![16],
                time_embed: 4,
                ..ModelConfig::default()
            },
            eval_n_time: 2,
            ..TrainConfig::new(steps, 8, 5)
        }
    }

    fn learned_template() -> DiffusionSpec {
        DiffusionSpec::new(Mat::zeros(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Schedule::constant(1.0)).unwrap()
    }

    #[test]
    fn zero_steps_gives_one_evaluation() {
        let data = gaussian_data(50, 1, 0);
        let (state, report) = fit(&data, Inference::Fixed(diffusion::vpsde(2.0).unwrap()), &small_config(0)).unwrap();
        assert_eq!(report.evals.len(), 1);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn frozen_inference_is_bit_identical() {
        let data = gaussian_data(50, 2, 1);
        let inf = Inference::Learnable {
            params: LearnableParams::vpsde_equivalent(2),
            template: learned_template(),
        };
        let (state, _) = fit(&data, inf.clone(), &small_config(3)).unwrap();
        assert_eq!(state.inference, inf);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = gaussian_data(50, 2, 1);
        let inf = Inference::Learnable {
            params: LearnableParams::vpsde_equivalent(2),
            template: learned_template(),
        };
        let cfg = TrainConfig {
            lr_theta: 0.0,
            lr_phi: 0.0,
            learn_inference: true,
            ..small_config(1)
        };
        let mut state = TrainState::new(2, inf.clone(), &cfg).unwrap();
        let before = state.score.params();
        train_step(&mut state, &data.rows(0, 8).into_owned(), &cfg, 9).unwrap();
        assert_eq!(state.score.params(), before);
        assert_eq!(state.inference, inf);
        assert_eq!(state.history.len(), 1);
    }

    #[test]
    fn learned_inference_moves_and_stays_valid() {
        let data = gaussian_data(60, 2, 2);
        let inf = Inference::Learnable {
            params: LearnableParams::vpsde_equivalent_full(2),
            template: learned_template(),
        };
        let cfg = TrainConfig {
            learn_inference: true,
            lr_phi: 1e-2,
            ..small_config(5)
        };
        let (state, _) = fit(&data, inf.clone(), &cfg).unwrap();
        assert_ne!(state.inference, inf);
        let spec = state.spec().unwrap();
        assert_eq!(spec.q_base(), &(-spec.q_base().transpose()));
        assert!(crate::matops::min_eigenvalue(spec.d_base()) >= -1e-15);
        assert!(state.history.iter().all(|r| r.grad_norm_phi.is_finite()));
    }

    #[test]
    fn runs_are_reproducible() {
        let data = gaussian_data(40, 1, 3);
        let spec = diffusion::cld(4.0, 1.0, 0.25).unwrap();
        let a = fit(&data, Inference::Fixed(spec.clone()), &small_config(3)).unwrap();
        let b = fit(&data, Inference::Fixed(spec), &small_config(3)).unwrap();
        assert_eq!(a.0.score.params(), b.0.score.params());
        assert_eq!(a.1.evals, b.1.evals);
    }

    #[test]
    fn rejects_small_datasets_and_bad_configs() {
        let data = gaussian_data(5, 1, 0);
        let spec = diffusion::vpsde(2.0).unwrap();
        assert!(fit(&data, Inference::Fixed(spec.clone()), &small_config(1)).is_err());
        let bad = TrainConfig {
            lr_theta: f64::NAN,
            ..small_config(1)
        };
        assert!(bad.validate().is_err());
        let cfg: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"steps":1,"batch":2,"bogus":1}"#);
        assert!(cfg.is_err());
    }

    #[test]
    fn split_is_ninety_ten() {
        let data = gaussian_data(100, 1, 0);
        let (a, b) = split(&data, 4);
        assert_eq!((a.nrows(), b.nrows()), (90, 10));
        let (a2, _) = split(&data, 4);
        assert_eq!(a, a2);
    }
}
