//! Deterministic quasi-uniform direction sampling: uniform angles in the
//! plane, a Fibonacci sphere in R^3, normalized Gaussians above.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn directions(dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    assert!(dim >= 2);
    match dim {
        2 => (0..count)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                DVector::from_row_slice(&[theta.cos(), theta.sin()])
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let theta = golden * i as f64;
                    DVector::from_row_slice(&[r * theta.cos(), r * theta.sin(), z])
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    loop {
                        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let n = v.norm();
                        if n > 1e-8 {
                            return v / n;
                        }
                    }
                })
                .collect()
        }
    }
}
