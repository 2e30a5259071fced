//! Seeded random streams.
//!
//! Every draw in the crate comes from a ChaCha8 stream addressed by
//! `(seed, purpose, index)`:
//!
//! * the 256-bit key is derived from `seed` with `rand_core`'s
//!   `seed_from_u64` expansion (PCG32 output words),
//! * the 64-bit ChaCha stream id is `purpose << 56 | index` with `index`
//!   truncated to 56 bits,
//! * the block counter starts at zero.
//!
//! ChaCha is a counter-based generator, so a stream's output depends only on
//! that triple and is identical on every platform. Independent purposes
//! (initialization, data, label dropout, timesteps, noise, sampling) never
//! share a stream, so changing how much one consumer draws cannot shift
//! another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// What a stream is used for; part of the stream address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    LabelDropout = 3,
    Timestep = 4,
    Noise = 5,
    Sampler = 6,
    KMeansInit = 7,
    Test = 8,
}

const INDEX_MASK: u64 = (1 << 56) - 1;

/// A deterministic random stream.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & INDEX_MASK));
    rng
}

pub fn normal_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::cast(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}

pub fn uniform_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::cast(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
