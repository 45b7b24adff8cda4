//! Verifies every analytic gradient against central finite differences:
//! pooling with respect to activations and exponents, both losses, the
//! normalization Jacobian, and the fully composed training step. This is the
//! same harness behind `gemret gradcheck`.
//!
//! Run with `cargo run --example gradient_check`.

use gemret::cli::cmd_gradcheck;
use gemret::numerics::{
    finite_diff_grad, max_rel_err, rng_from_parts, ActivationTensor, DescriptorVector,
};
use gemret::pooling::{gem_backward_p, gem_pool, PoolingConfig};
use gemret::Result;
use rand::Rng;

fn main() -> Result<()> {
    println!("{}", cmd_gradcheck(7, false)?);

    // The same machinery by hand for one case: the shared-exponent gradient
    // of one pooled map against a central difference through the forward.
    let mut rng = rng_from_parts(&[7, 0x64656d6f]);
    let values: Vec<f64> = (0..48).map(|_| rng.random_range(0.05..1.0)).collect();
    let x = ActivationTensor::new(4, 4, 3, values);
    let p = 2.7;

    let cfg = PoolingConfig::gem_shared(p)?;
    let f = gem_pool(&x, &cfg)?;
    let upstream = DescriptorVector::raw(vec![1.0; f.dim()]);
    // With a shared exponent the per-map contributions land in one slot.
    let analytic = gem_backward_p(&x, &cfg, &f, &upstream)?[0];

    let numeric = finite_diff_grad(
        |ps| {
            let pooled = gem_pool(&x, &PoolingConfig::gem_shared(ps[0]).unwrap()).unwrap();
            pooled.values.iter().sum()
        },
        &[p],
        1e-5,
    );
    println!(
        "hand-rolled shared-exponent check: analytic {:+.6}, numeric {:+.6}, rel err {:.3e}",
        analytic,
        numeric[0],
        max_rel_err(&[analytic], &numeric)
    );
    Ok(())
}
