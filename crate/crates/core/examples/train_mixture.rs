//! Trains a score network jointly with a learnable two-coordinate process on
//! a two-Gaussian mixture, then samples from it.
//!
//! `cargo run --release --example train_mixture -- 1500`

use mdm::data::{self, Dataset};
use mdm::diffusion::{self, DiffusionSpec, LearnableParams};
use mdm::matops::Mat;
use mdm::sampler::{self, SamplerOptions};
use mdm::train::{self, Inference, ModelConfig, TrainConfig};

fn main() -> mdm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let data = Dataset::two_gaussians(5000, 1).load()?;
    let template = DiffusionSpec::new(
        Mat::zeros(2, 2),
        Mat::identity(2, 2),
        Mat::identity(2, 2),
        diffusion::vpsde_linear(0.1, 20.0)?.sched_d().clone(),
    )?;
    let inference = Inference::Learnable {
        params: LearnableParams::vpsde_equivalent_full(2),
        template,
    };
    let config = TrainConfig {
        learn_inference: true,
        lr_theta: 2e-3,
        eval_every: (steps / 5).max(1),
        model: ModelConfig {
            hidden: vec![64, 64],
            ..ModelConfig::default()
        },
        ..TrainConfig::new(steps, 128, 7)
    };
    let (state, report) = train::fit(&data, inference, &config)?;
    for e in &report.evals {
        println!("step {:>5}: held-out elbo {:.4} ± {:.4} nats/dim", e.step, e.elbo / 2.0, e.stderr / 2.0);
    }
    let spec = state.spec()?;
    println!("learned Q̂:\n{}learned D̂:\n{}", spec.q_base(), spec.d_base());

    let field = state.score_field()?;
    let gen = sampler::generate(&spec, field.as_ref(), 2000, 2, &SamplerOptions::new(500), 3)?;
    let (m, c) = data::moments(&gen.samples);
    let (hm, hc) = data::moments(&report.heldout);
    println!("sample mean {m:?} vs held-out {hm:?}");
    println!("sample cov {c}held-out cov {hc}");
    Ok(())
}
