//! The `mdm` command line: kernel inspection, ELBO evaluation, training,
//! sampling, spec comparison and a self-test.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{self, DiffusionSpec, Hyperparams, Instance, LearnableParams, Schedule};
use crate::elbo::{self, ElboRecord, Estimate, Form};
use crate::error::{Error, Result};
use crate::kernel::{self, Conditioning, Mode, DEFAULT_ODE_STEPS};
use crate::matops::{self, Mat, Vector};
use crate::rng;
use crate::sampler::{self, SamplerOptions};
use crate::score::{AnalyticGaussianScore, MlpScore, NoisePrediction, Parameterization, ScoreField};
use crate::train::{self, Inference, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;
pub const EXIT_SELFTEST: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "mdm", version, about = "Multivariate diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the transition kernel of a process at time `s` as JSON.
    Kernel {
        /// Process JSON file.
        #[arg(long, conflicts_with = "instance")]
        spec: Option<PathBuf>,
        /// Named process instead of a file.
        #[arg(long)]
        instance: Option<Instance>,
        /// Instance hyperparameters, `name=value`.
        #[arg(long = "hyper", value_parser = parse_hyper)]
        hyper: Vec<(String, f64)>,
        #[arg(long)]
        s: f64,
        #[arg(long, default_value = "full-state")]
        mode: Mode,
        /// Also integrate the moment ODEs and report the discrepancy.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the ELBO of a dataset under a score model.
    Elbo {
        #[arg(long)]
        config: PathBuf,
        /// Network checkpoint; defaults to the analytic score for Gaussian data.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Process JSON overriding the config's spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        form: Option<Form>,
        #[arg(long)]
        n_time: Option<usize>,
        /// Single estimation seed overriding the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a score model (and optionally the process).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        /// Directory for the log, evaluations, checkpoint and final spec.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Draw samples by integrating the reverse-time SDE.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        /// Apply the posterior-mean map at the truncation time.
        #[arg(long)]
        denoise: bool,
        /// Write every trajectory to this CSV.
        #[arg(long)]
        paths: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every listed spec with the same data, seeds and budget.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Independent training runs per spec.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle-equivalence and estimator-agreement checks.
    Selftest,
}

fn parse_hyper(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|e| format!("{k}: {e}"))?;
    Ok((k.to_string(), v))
}

impl clap::builder::ValueParserFactory for Instance {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Instance>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Mode {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Mode>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Form {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Form>().map_err(|e| e.to_string()))
    }
}

/// Where a process comes from in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpecChoice {
    Named {
        instance: String,
        #[serde(default)]
        hyper: Hyperparams,
        #[serde(default)]
        horizon: Option<f64>,
        #[serde(default)]
        eps: Option<f64>,
        #[serde(default)]
        label: Option<String>,
    },
    /// Learnable `(Q̃, D̃)` started at the variance-preserving embedding.
    Learned {
        k: usize,
        #[serde(default)]
        hyper: Hyperparams,
        #[serde(default)]
        diagonal: bool,
        #[serde(default)]
        horizon: Option<f64>,
        #[serde(default)]
        eps: Option<f64>,
        #[serde(default)]
        label: Option<String>,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        label: Option<String>,
    },
    Inline {
        spec: DiffusionSpec,
        #[serde(default)]
        label: Option<String>,
    },
}

fn default_hyper(instance: Instance) -> Hyperparams {
    let pairs: &[(&str, f64)] = match instance {
        Instance::Vpsde => &[("beta_min", 0.1), ("beta_max", 20.0)],
        Instance::Cld => &[("beta", 4.0), ("gamma", 1.0), ("m", 0.25)],
        Instance::Alda => &[("l", 1.0), ("gamma", 1.0), ("xi", 1.0)],
        Instance::Malda => &[("l", 1.0), ("gamma", 1.0)],
    };
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn vp_schedule(hyper: &Hyperparams) -> Result<Schedule> {
    let h = if hyper.is_empty() {
        default_hyper(Instance::Vpsde)
    } else {
        hyper.clone()
    };
    let one = diffusion::named_instance(Instance::Vpsde, &h)?;
    Ok(one.sched_d().clone())
}

fn finish(spec: DiffusionSpec, horizon: Option<f64>, eps: Option<f64>) -> Result<DiffusionSpec> {
    let spec = match horizon {
        Some(t) => spec.with_horizon(t)?,
        None => spec,
    };
    match eps {
        Some(e) => spec.with_eps(e),
        None => Ok(spec),
    }
}

impl SpecChoice {
    pub fn label(&self) -> String {
        match self {
            SpecChoice::Named { instance, label, .. } => label.clone().unwrap_or_else(|| instance.clone()),
            SpecChoice::Learned { k, label, .. } => label.clone().unwrap_or_else(|| format!("learned-{k}")),
            SpecChoice::File { path, label } => label.clone().unwrap_or_else(|| path.display().to_string()),
            SpecChoice::Inline { label, .. } => label.clone().unwrap_or_else(|| "inline".into()),
        }
    }

    pub fn resolve(&self) -> Result<Inference> {
        match self {
            SpecChoice::Named { instance, hyper, horizon, eps, .. } => {
                let inst: Instance = instance.parse()?;
                let h = if hyper.is_empty() { default_hyper(inst) } else { hyper.clone() };
                Ok(Inference::Fixed(finish(diffusion::named_instance(inst, &h)?, *horizon, *eps)?))
            }
            SpecChoice::Learned { k, hyper, diagonal, horizon, eps, .. } => {
                if *k == 0 {
                    return Err(Error::invalid("learned spec needs k >= 1"));
                }
                let id = Mat::identity(*k, *k);
                let template = finish(DiffusionSpec::new(Mat::zeros(*k, *k), id.clone(), id, vp_schedule(hyper)?)?, *horizon, *eps)?;
                let params = if *diagonal {
                    LearnableParams::vpsde_equivalent(*k)
                } else {
                    LearnableParams::vpsde_equivalent_full(*k)
                };
                Ok(Inference::Learnable { params, template })
            }
            SpecChoice::File { path, .. } => Ok(Inference::Fixed(load_spec(path)?)),
            SpecChoice::Inline { spec, .. } => Ok(Inference::Fixed(spec.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_n_time")]
    pub n_time: usize,
    /// Rows evaluated; all rows when absent.
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub form: Option<Form>,
}

fn default_n_time() -> usize {
    64
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_time: default_n_time(),
            batch: None,
            seeds: default_seeds(),
            form: None,
        }
    }
}

/// A complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    #[serde(default)]
    pub spec: Option<SpecChoice>,
    /// Processes for `compare`.
    #[serde(default)]
    pub specs: Vec<SpecChoice>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn single_spec(&self) -> Result<&SpecChoice> {
        self.spec
            .as_ref()
            .or_else(|| self.specs.first())
            .ok_or_else(|| Error::Config("spec: missing".into()))
    }

    fn train_config(&self) -> Result<TrainConfig> {
        self.train.clone().ok_or_else(|| Error::Config("train: missing".into()))
    }
}

pub fn load_spec(path: &Path) -> Result<DiffusionSpec> {
    DiffusionSpec::from_json(&fs::read_to_string(path)?)
}

/// Exit code for an error raised while loading or validating inputs.
fn input_code(e: &Error) -> i32 {
    match e.root() {
        Error::Factorization { .. }
        | Error::Singular { .. }
        | Error::KernelDegenerate { .. }
        | Error::DegenerateCovariance { .. }
        | Error::NonCommuting => EXIT_DEGENERATE,
        _ => EXIT_INVALID,
    }
}

/// Exit code for an error raised during a numerical run.
fn run_code(e: &Error) -> i32 {
    match e.root() {
        Error::InvalidInput(_)
        | Error::DimensionMismatch { .. }
        | Error::Config(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_INVALID,
        _ => EXIT_ESTIMATION,
    }
}

struct Failure {
    code: i32,
    err: Error,
}

trait Stage<T> {
    fn code(self, f: fn(&Error) -> i32) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn code(self, f: fn(&Error) -> i32) -> std::result::Result<T, Failure> {
        self.map_err(|err| Failure { code: f(&err), err })
    }
}

type Outcome = std::result::Result<(), Failure>;

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn configure_threads() {
    if let Some(n) = std::env::var("MDM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    run(cli.command)
}

pub fn run(command: Command) -> i32 {
    configure_threads();
    let result = match command {
        Command::Kernel { spec, instance, hyper, s, mode, oracle, out } => {
            cmd_kernel(spec.as_deref(), instance, hyper, s, mode, oracle, out.as_deref())
        }
        Command::Elbo { config, checkpoint, spec, form, n_time, seed, out } => {
            cmd_elbo(&config, checkpoint.as_deref(), spec.as_deref(), form, n_time, seed, out.as_deref())
        }
        Command::Train { config, seed, steps, out_dir } => cmd_train(&config, seed, steps, &out_dir),
        Command::Sample { config, checkpoint, spec, n, steps, seed, denoise, paths, out } => cmd_sample(
            &config,
            checkpoint.as_deref(),
            spec.as_deref(),
            n,
            &SamplerOptions {
                steps,
                record_paths: paths.is_some(),
                denoise,
            },
            seed,
            paths.as_deref(),
            out.as_deref(),
        ),
        Command::Compare { config, seed, repeats, out } => cmd_compare(&config, seed, repeats, out.as_deref()),
        Command::Selftest => {
            let report = selftest();
            for line in &report {
                println!("{line}");
            }
            return if report.iter().all(|l| l.passed) { EXIT_OK } else { EXIT_SELFTEST };
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.err);
            f.code
        }
    }
}

#[derive(Serialize)]
struct KernelReport<'a> {
    kernel: &'a kernel::GaussianKernel,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<kernel::GaussianKernel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_discrepancy: Option<f64>,
}

fn cmd_kernel(
    spec_path: Option<&Path>,
    instance: Option<Instance>,
    hyper: Vec<(String, f64)>,
    s: f64,
    mode: Mode,
    oracle: bool,
    out: Option<&Path>,
) -> Outcome {
    let spec = match (spec_path, instance) {
        (Some(p), _) => load_spec(p),
        (None, Some(inst)) => {
            let h: Hyperparams = if hyper.is_empty() { default_hyper(inst) } else { hyper.into_iter().collect() };
            diffusion::named_instance(inst, &h)
        }
        (None, None) => Err(Error::invalid("one of --spec or --instance is required")),
    }
    .code(|_| EXIT_INVALID)?;
    let cond = Conditioning::for_mode(&spec, mode);
    let kern = kernel::transition(&spec, s, &cond).code(input_code)?;
    let ode = if oracle {
        Some(kernel::transition_ode(&spec, s, &cond, DEFAULT_ODE_STEPS).code(input_code)?)
    } else {
        None
    };
    let max_abs_discrepancy = ode.as_ref().map(|o| {
        (&o.mean_map - &kern.mean_map)
            .amax()
            .max((&o.cov - &kern.cov).amax())
            .max((&o.mean_offset - &kern.mean_offset).amax())
    });
    let report = KernelReport {
        kernel: &kern,
        oracle: ode,
        max_abs_discrepancy,
    };
    let mut w = output(out).code(|_| EXIT_INVALID)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from).code(|_| EXIT_INVALID)?;
    writeln!(w, "{text}").map_err(Error::from).code(|_| EXIT_INVALID)?;
    Ok(())
}

/// A score model owned by the CLI.
enum Model {
    Analytic(AnalyticGaussianScore),
    Net(MlpScore, Parameterization),
}

impl Model {
    fn load(cfg: &ExperimentConfig, spec: &DiffusionSpec, checkpoint: Option<&Path>) -> Result<Model> {
        match checkpoint {
            Some(p) => {
                let (net, param) = MlpScore::load_json(&fs::read_to_string(p)?)?;
                if net.k() != spec.k() {
                    return Err(Error::shape(format!("checkpoint for K = {}", spec.k()), format!("K = {}", net.k())));
                }
                Ok(Model::Net(net, param))
            }
            None => {
                let (mean, var) = cfg
                    .dataset
                    .gaussian_moments()
                    .ok_or_else(|| Error::invalid("a checkpoint is required unless the dataset is gaussian"))?;
                Ok(Model::Analytic(AnalyticGaussianScore::with_mean(spec.clone(), Vector::from_vec(mean), Vector::from_vec(var))?))
            }
        }
    }

    fn d(&self) -> Option<usize> {
        match self {
            Model::Analytic(_) => None,
            Model::Net(n, _) => Some(n.d()),
        }
    }

    /// The model as a score of `spec`.
    fn field<'a>(&'a self, spec: &DiffusionSpec) -> Box<dyn ScoreField + 'a> {
        match self {
            Model::Analytic(a) => Box::new(a),
            Model::Net(n, Parameterization::Score) => Box::new(n),
            Model::Net(n, Parameterization::Noise) => Box::new(NoisePrediction::with_spec(n, spec.clone())),
        }
    }
}

fn resolve_fixed(cfg: &ExperimentConfig, spec_override: Option<&Path>) -> Result<DiffusionSpec> {
    match spec_override {
        Some(p) => load_spec(p),
        None => cfg.single_spec()?.resolve()?.spec(),
    }
}

fn cmd_elbo(
    config: &Path,
    checkpoint: Option<&Path>,
    spec_override: Option<&Path>,
    form: Option<Form>,
    n_time: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Outcome {
    let cfg = ExperimentConfig::load(config).code(|_| EXIT_INVALID)?;
    let spec = resolve_fixed(&cfg, spec_override).code(input_code)?;
    let mut data = cfg.dataset.load().code(|_| EXIT_INVALID)?;
    if let Some(b) = cfg.eval.batch {
        if b == 0 || b > data.nrows() {
            return Err(Failure {
                code: EXIT_INVALID,
                err: Error::invalid(format!("eval batch {b} outside [1, {}]", data.nrows())),
            });
        }
        data = data.rows(0, b).into_owned();
    }
    let model = Model::load(&cfg, &spec, checkpoint).code(|_| EXIT_INVALID)?;
    if model.d().is_some_and(|d| d != data.ncols()) {
        return Err(Failure {
            code: EXIT_INVALID,
            err: Error::shape(format!("{} data columns", data.ncols()), format!("checkpoint d = {}", model.d().unwrap())),
        });
    }
    let form = form.or(cfg.eval.form).unwrap_or(Form::Dsm);
    let n_time = n_time.unwrap_or(cfg.eval.n_time);
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.eval.seeds.clone());
    // the estimator wraps noise predictions itself
    let (field, param): (Box<dyn ScoreField + '_>, Parameterization) = match &model {
        Model::Net(n, p) => (Box::new(n), *p),
        Model::Analytic(_) => (model.field(&spec), Parameterization::Score),
    };
    let mut records = Vec::new();
    for &s in &seeds {
        let est = Estimate {
            param,
            ..Estimate::new(n_time, s, form)
        };
        let e = elbo::estimate_elbo_with(&spec, field.as_ref(), &data, &est).code(run_code)?;
        eprintln!(
            "seed {s}: elbo {:.6} ± {:.6} nats/dim ({:.6} bits/dim)",
            e.nats_per_dim(),
            e.stderr_per_dim(),
            e.bits_per_dim()
        );
        records.push(ElboRecord::new(s, form, n_time, &e));
    }
    let w = output(out).code(|_| EXIT_INVALID)?;
    elbo::write_csv(w, &records).code(|_| EXIT_INVALID)?;
    Ok(())
}

fn cmd_train(config: &Path, seed: u64, steps: Option<usize>, out_dir: &Path) -> Outcome {
    let cfg = ExperimentConfig::load(config).code(|_| EXIT_INVALID)?;
    let mut tc = cfg.train_config().code(|_| EXIT_INVALID)?;
    tc.seed = seed;
    if let Some(s) = steps {
        tc.steps = s;
        tc.eval_every = tc.eval_every.min(s.max(1));
    }
    let inference = cfg.single_spec().and_then(SpecChoice::resolve).code(input_code)?;
    let data = cfg.dataset.load().code(|_| EXIT_INVALID)?;
    let (state, report) = train::fit(&data, inference, &tc).code(run_code)?;

    let write = || -> Result<()> {
        fs::create_dir_all(out_dir)?;
        train::write_log_csv(fs::File::create(out_dir.join("train_log.csv"))?, &state.history)?;
        let mut w = csv::Writer::from_path(out_dir.join("evals.csv"))?;
        w.write_record(["step", "elbo", "stderr"])?;
        for e in &report.evals {
            w.write_record([e.step.to_string(), format!("{:?}", e.elbo), format!("{:?}", e.stderr)])?;
        }
        w.flush()?;
        fs::write(out_dir.join("model.json"), state.score.save_json(state.parameterization)?)?;
        fs::write(out_dir.join("spec.json"), state.spec()?.to_json()?)?;
        Ok(())
    };
    write().code(|_| EXIT_INVALID)?;
    let d = data.ncols() as f64;
    println!(
        "final held-out elbo {:.6} ± {:.6} nats/dim; best {:.6} at step {}",
        report.last.elbo / d,
        report.last.stderr / d,
        report.best.elbo / d,
        report.best.step
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    config: &Path,
    checkpoint: Option<&Path>,
    spec_override: Option<&Path>,
    n: usize,
    opts: &SamplerOptions,
    seed: u64,
    paths: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    let cfg = ExperimentConfig::load(config).code(|_| EXIT_INVALID)?;
    let spec = resolve_fixed(&cfg, spec_override).code(input_code)?;
    let model = Model::load(&cfg, &spec, checkpoint).code(|_| EXIT_INVALID)?;
    let d = match (model.d(), &cfg.dataset) {
        (Some(d), _) => d,
        (None, Dataset::Gaussian { dim, .. }) => *dim,
        (None, _) => unreachable!("analytic model requires gaussian data"),
    };
    let field = model.field(&spec);
    let gen = sampler::generate(&spec, field.as_ref(), n, d, opts, seed).code(run_code)?;
    sampler::write_samples_csv(output(out).code(|_| EXIT_INVALID)?, &gen.samples).code(|_| EXIT_INVALID)?;
    if let (Some(p), Some(traj)) = (paths, gen.paths.as_ref()) {
        let f = fs::File::create(p).map_err(Error::from).code(|_| EXIT_INVALID)?;
        sampler::write_paths_csv(io::BufWriter::new(f), traj).code(|_| EXIT_INVALID)?;
    }
    Ok(())
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub spec: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub params: usize,
    /// Mean final held-out ELBO over repeats, nats per dimension.
    pub elbo: f64,
    pub stderr: f64,
    pub status: String,
}

/// Trains every spec under identical seeds and budget; rows sorted by ELBO
/// (failures last).
pub fn compare(cfg: &ExperimentConfig, seed: u64, repeats: usize) -> Result<Vec<CompareRow>> {
    if cfg.specs.len() < 2 {
        return Err(Error::invalid("compare needs at least two specs"));
    }
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let base = cfg.train_config()?;
    let data = cfg.dataset.load()?;
    let d = data.ncols() as f64;
    let mut rows = Vec::new();
    for choice in &cfg.specs {
        let label = choice.label();
        let run = || -> Result<CompareRow> {
            let inference = choice.resolve()?;
            let k = inference.k();
            let (mut finals, mut errs, mut params) = (Vec::new(), Vec::new(), 0);
            for r in 0..repeats {
                let tc = TrainConfig {
                    seed: rng::child_seed(seed, r as u64),
                    ..base.clone()
                };
                let (state, report) = train::fit(&data, inference.clone(), &tc)?;
                params = state.score.params().len()
                    + match &state.inference {
                        Inference::Learnable { params, .. } if tc.learn_inference => params.len(),
                        _ => 0,
                    };
                finals.push(report.last.elbo / d);
                errs.push(report.last.stderr / d);
            }
            let n = finals.len() as f64;
            Ok(CompareRow {
                spec: label.clone(),
                k,
                params,
                elbo: finals.iter().sum::<f64>() / n,
                stderr: errs.iter().map(|e| e * e).sum::<f64>().sqrt() / n,
                status: "ok".into(),
            })
        };
        rows.push(run().unwrap_or_else(|e| {
            log::warn!("{label}: {e}");
            CompareRow {
                spec: label.clone(),
                k: 0,
                params: 0,
                elbo: f64::NAN,
                stderr: f64::NAN,
                status: format!("error: {e}"),
            }
        }));
    }
    rows.sort_by(|a, b| match (a.elbo.is_nan(), b.elbo.is_nan()) {
        (false, false) => b.elbo.total_cmp(&a.elbo),
        (x, y) => x.cmp(&y),
    });
    Ok(rows)
}

pub fn write_compare_csv(out: impl Write, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["spec", "K", "params", "elbo", "stderr", "status"])?;
    for r in rows {
        w.write_record([
            r.spec.clone(),
            r.k.to_string(),
            r.params.to_string(),
            format!("{:?}", r.elbo),
            format!("{:?}", r.stderr),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_compare(config: &Path, seed: u64, repeats: usize, out: Option<&Path>) -> Outcome {
    let cfg = ExperimentConfig::load(config).code(|_| EXIT_INVALID)?;
    let rows = compare(&cfg, seed, repeats).code(|_| EXIT_INVALID)?;
    write_compare_csv(output(out).code(|_| EXIT_INVALID)?, &rows).code(|_| EXIT_INVALID)?;
    Ok(())
}

/// Outcome of one self-test check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Quick versions of the kernel, stationarity and estimator checks.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(check(
        "closed form vs moment ODE",
        (|| {
            let mut worst: f64 = 0.0;
            for seed in 0..12u64 {
                let spec = diffusion::random_spec(seed, 1 + (seed % 3) as usize, 3.0)?;
                for s in [0.1, 0.5, 1.0, 3.0] {
                    let cond = Conditioning::full_state(spec.k());
                    let a = kernel::transition_closed_form(&spec, s, &cond)?;
                    let b = kernel::transition_ode(&spec, s, &cond, DEFAULT_ODE_STEPS)?;
                    worst = worst
                        .max(matops::rel_frobenius(&a.mean_map, &b.mean_map))
                        .max(matops::rel_frobenius(&a.cov, &b.cov));
                }
            }
            Ok((worst <= 1e-6, format!("max relative error {worst:.3e}")))
        })(),
    ));
    out.push(check(
        "stationary covariance",
        (|| {
            let mut worst: f64 = 0.0;
            for inst in Instance::ALL {
                let spec = diffusion::named_instance(inst, &stationary_hyper(inst))?.with_horizon(400.0)?;
                let k = kernel::transition(&spec, 400.0, &Conditioning::full_state(spec.k()))?;
                worst = worst.max((&k.cov - spec.stationary_cov()).norm());
            }
            Ok((worst <= 1e-4, format!("max |Σ − S⁻¹|_F {worst:.3e}")))
        })(),
    ));
    out.push(check(
        "gaussian elbo oracle",
        (|| {
            let x = rng::normal_mat(&mut rng::stream(11, 0, 0), 1024, 1);
            let exact = elbo::gaussian_log_likelihood(&x, &[0.0], &[1.0]);
            let mut worst: f64 = 0.0;
            for spec in [diffusion::vpsde(2.0)?, diffusion::cld(4.0, 1.0, 0.25)?] {
                let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0))?;
                let e = elbo::estimate_elbo(&spec, &score, &x, 16, 3, Form::Dsm)?;
                worst = worst.max(((e.total - exact) / e.stderr).abs());
            }
            Ok((worst < 3.0, format!("max |z| {worst:.2}")))
        })(),
    ));
    out.push(check(
        "ism matches dsm",
        (|| {
            let x = rng::normal_mat(&mut rng::stream(12, 0, 0), 512, 1);
            let mut worst: f64 = 0.0;
            for spec in [diffusion::vpsde(2.0)?, diffusion::malda(1.0, 1.0)?] {
                let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0))?;
                let a = elbo::estimate_elbo(&spec, &score, &x, 16, 4, Form::Dsm)?;
                let b = elbo::estimate_elbo(&spec, &score, &x, 16, 4, Form::Ism)?;
                worst = worst.max((a.total - b.total).abs() / a.stderr.hypot(b.stderr));
            }
            Ok((worst < 3.0, format!("max |z| {worst:.2}")))
        })(),
    ));
    out
}

fn stationary_hyper(inst: Instance) -> Hyperparams {
    match inst {
        Instance::Vpsde => [("beta".to_string(), 2.0)].into_iter().collect(),
        other => default_hyper(other),
    }
}
