//! Counter-based sampling streams.
//!
//! Every random draw in estimators and training is made from a generator
//! keyed by `(seed, index)`, so results do not depend on the order in which
//! samples are evaluated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tape::ParamVector;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal_params(rng: &mut impl Rng, n: usize) -> ParamVector {
    ParamVector::new(normal_vec(rng, n))
}

/// Index drawn from the categorical distribution `p`.
pub fn categorical(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}
