//! Named random streams derived from one master seed.
//!
//! Each stream is a pure function of `(master seed, purpose, task, salt)`,
//! so a run resumed at a task boundary draws exactly the noise an
//! uninterrupted run would have drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Smallest uniform draw handed to log/logit transforms.
pub const UNIFORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    MaskNoise,
    WeightNoise,
    DataOrder,
    Coreset,
    Eval,
    Generate,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1,
            Purpose::MaskNoise => 0x2,
            Purpose::WeightNoise => 0x3,
            Purpose::DataOrder => 0x4,
            Purpose::Coreset => 0x5,
            Purpose::Eval => 0x6,
            Purpose::Generate => 0x7,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(master: u64, purpose: Purpose, task: usize, salt: u64) -> ChaCha8Rng {
    let mut s = splitmix(master);
    s = splitmix(s ^ purpose.tag());
    s = splitmix(s ^ task as u64);
    s = splitmix(s ^ salt);
    ChaCha8Rng::seed_from_u64(s)
}

/// Uniform draws clamped to `[UNIFORM_EPS, 1 - UNIFORM_EPS]`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| clamp_unit(rng.random::<f64>()))
}

pub fn clamp_unit(u: f64) -> f64 {
    u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
