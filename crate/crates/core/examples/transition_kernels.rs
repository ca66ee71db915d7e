//! Closed-form transition kernels against the RK4 moment integration, for
//! every named process and a few times.

use mdm::diffusion::{self, Instance};
use mdm::kernel::{self, Conditioning, Mode, DEFAULT_ODE_STEPS};
use mdm::matops;

fn main() -> mdm::Result<()> {
    let specs = [
        (Instance::Vpsde, diffusion::vpsde_linear(0.1, 20.0)?),
        (Instance::Cld, diffusion::cld(4.0, 1.0, 0.25)?),
        (Instance::Alda, diffusion::alda(1.0, 1.0, 1.0)?),
        (Instance::Malda, diffusion::malda(1.0, 1.0)?),
    ];
    for (name, spec) in &specs {
        println!("{name}: K = {}, full rank = {}", spec.k(), spec.is_full_rank());
        for s in [0.01, 0.1, 0.5, 1.0] {
            for mode in [Mode::FullState, Mode::DataOnly] {
                let cond = Conditioning::for_mode(spec, mode);
                let closed = kernel::transition(spec, s, &cond)?;
                let ode = kernel::transition_ode(spec, s, &cond, DEFAULT_ODE_STEPS)?;
                println!(
                    "  s = {s:<5} {mode:?}: min eig {:.3e}, rel err mean {:.1e}, cov {:.1e}",
                    closed.min_eig,
                    matops::rel_frobenius(&closed.mean_map, &ode.mean_map),
                    matops::rel_frobenius(&closed.cov, &ode.cov),
                );
            }
        }
    }

    let cld = &specs[1].1;
    let k = kernel::transition(cld, 0.5, &Conditioning::data_only(cld))?;
    println!("\ncld data-conditioned kernel at s = 0.5:\n{}", k.to_json()?);
    Ok(())
}
