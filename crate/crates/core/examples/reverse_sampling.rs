//! Reverse-time sampling of standard normal data through critically damped
//! Langevin dynamics with the exact score, showing that the velocity is
//! independent of the position at the end of the trajectory but not halfway.

use mdm::diffusion;
use mdm::matops::Vector;
use mdm::sampler::{self, SamplerOptions};
use mdm::score::AnalyticGaussianScore;

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    c / (va * vb).sqrt()
}

fn main() -> mdm::Result<()> {
    let spec = diffusion::cld(4.0, 1.0, 0.25)?;
    let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0))?;
    let opts = SamplerOptions {
        record_paths: true,
        ..SamplerOptions::new(400)
    };
    let out = sampler::generate(&spec, &score, 5000, 1, &opts, 0)?;
    let z: Vec<f64> = out.samples.column(0).iter().copied().collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
    println!("samples: mean {mean:.4}, variance {var:.4} (target 0, 1)");

    let paths = out.paths.as_deref().unwrap_or_default();
    let last = paths[0].states.len() - 1;
    let z_end: Vec<f64> = paths.iter().map(|p| p.states[last][(0, 0)]).collect();
    for step in [last / 4, last / 2, 3 * last / 4, last] {
        let v: Vec<f64> = paths.iter().map(|p| p.states[step][(0, 1)]).collect();
        println!("t = {:.3}: corr(z_end, v_t) = {:+.4}", paths[0].grid[step], correlation(&z_end, &v));
    }
    Ok(())
}
