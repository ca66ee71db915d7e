//! Building processes by hand and by name, inspecting drift and diffusion,
//! and round-tripping them through JSON.

use mdm::diffusion::{self, DiffusionSpec, Hyperparams, Instance, Schedule};
use mdm::matops::{self, Mat};

fn main() -> mdm::Result<()> {
    let hyper: Hyperparams = [("beta", 4.0), ("gamma", 1.0), ("m", 0.25)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let cld = diffusion::named_instance(Instance::Cld, &hyper)?;
    println!("cld drift at s = 0.5:\n{}", cld.drift_matrix(0.5)?);
    println!("cld g²:\n{}", cld.diffusion_sq(0.5)?);

    // a rotation with isotropic dissipation
    let q = matops::make_skew(&Mat::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]));
    let spec = DiffusionSpec::new(q, Mat::identity(2, 2), Mat::identity(2, 2), Schedule::linear(0.5, 2.0, 1.0))?
        .with_eps(1e-2)?;
    let text = spec.to_json()?;
    println!("{text}");
    let back = DiffusionSpec::from_json(&text)?;
    assert_eq!(back, spec);

    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    doc["d_base"][0][0] = (-1.0).into();
    match DiffusionSpec::from_json(&doc.to_string()) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
