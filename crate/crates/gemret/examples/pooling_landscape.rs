//! Sweeps the pooling exponent on a random activation tensor to show the
//! generalized mean as a dial between the two classical poolings: p=1 is the
//! plain average, large p approaches the per-map maximum, and every value in
//! between respects the power-mean ordering.
//!
//! Run with `cargo run --example pooling_landscape`.

use gemret::numerics::{rng_from_parts, ActivationTensor};
use gemret::pooling::{gem_pool, mac_pool, spoc_pool, PoolingConfig};
use gemret::Result;
use rand::Rng;

fn random_tensor(seed: u64) -> ActivationTensor {
    let mut rng = rng_from_parts(&[seed, 0x706f6f6c]);
    let (w, h, maps) = (6, 5, 4);
    let values = (0..w * h * maps).map(|_| rng.random_range(0.0..1.0)).collect();
    ActivationTensor::new(w, h, maps, values)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> Result<()> {
    let x = random_tensor(3);
    let avg = spoc_pool(&x);
    let max = mac_pool(&x);

    println!("pooled value of map 0 as the exponent grows:");
    println!("{:>10}  {:>10}", "p", "f[0]");
    for &p in &[1.0, 1.5, 2.0, 3.0, 5.0, 10.0, 50.0, 1e4] {
        let f = gem_pool(&x, &PoolingConfig::gem_shared(p)?)?;
        println!("{p:>10.1}  {:>10.6}", f.values[0]);
    }
    println!("{:>10}  {:>10.6}", "average", avg.values[0]);
    println!("{:>10}  {:>10.6}", "max", max.values[0]);

    let at_one = gem_pool(&x, &PoolingConfig::gem_shared(1.0)?)?;
    let near_max = gem_pool(&x, &PoolingConfig::gem_shared(1e4)?)?;
    println!();
    println!("p=1 vs average:   max abs diff {:.2e}", max_abs_diff(&at_one.values, &avg.values));
    println!("p=1e4 vs max:     max abs diff {:.2e}", max_abs_diff(&near_max.values, &max.values));

    // Power-mean ordering: for each map, pooled values never decrease along
    // a rising exponent grid, and everything sits between average and max.
    let grid = [1.0, 2.0, 3.0, 5.0, 10.0, 100.0];
    let mut violations = 0usize;
    for seed in 0..200 {
        let t = random_tensor(seed);
        let lo = spoc_pool(&t);
        let hi = mac_pool(&t);
        let mut prev = lo.values.clone();
        for &p in &grid {
            let f = gem_pool(&t, &PoolingConfig::gem_shared(p)?)?;
            for k in 0..f.dim() {
                if f.values[k] + 1e-12 < prev[k]
                    || f.values[k] + 1e-12 < lo.values[k]
                    || f.values[k] > hi.values[k] + 1e-12
                {
                    violations += 1;
                }
            }
            prev = f.values.clone();
        }
    }
    println!("ordering violations over 200 random tensors: {violations}");
    Ok(())
}
