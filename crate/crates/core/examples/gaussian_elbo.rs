//! ELBO of standard normal data under the exact score, for every named
//! process, with both estimators. The exact log-likelihood is −1.41894.

use mdm::diffusion;
use mdm::elbo::{self, Form};
use mdm::matops::Vector;
use mdm::rng;
use mdm::score::AnalyticGaussianScore;

fn main() -> mdm::Result<()> {
    let x = rng::normal_mat(&mut rng::stream(0, 0, 0), 2048, 1);
    let exact = elbo::gaussian_log_likelihood(&x, &[0.0], &[1.0]);
    println!("sample log-likelihood {exact:.5}");
    let specs = [
        ("vpsde", diffusion::vpsde_linear(0.1, 20.0)?),
        ("cld", diffusion::cld(4.0, 1.0, 0.25)?),
        ("alda", diffusion::alda(1.0, 1.0, 1.0)?.with_eps(2e-2)?),
        ("malda", diffusion::malda(1.0, 1.0)?),
    ];
    for (name, spec) in specs {
        let score = AnalyticGaussianScore::new(spec.clone(), Vector::from_element(1, 1.0))?;
        for form in [Form::Dsm, Form::Ism] {
            let e = elbo::estimate_elbo(&spec, &score, &x, 64, 1, form)?;
            println!(
                "{name:<6} {form}: total {:.5} ± {:.5}  (l_T {:.4}, l_q {:.4}, integrand {:.4}, eps term {:.4})",
                e.total, e.stderr, e.l_t, e.l_q, e.integrand, e.likelihood_eps
            );
        }
    }
    Ok(())
}
