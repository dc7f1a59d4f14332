//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream, so enabling one feature never shifts another's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

/// Purpose-specific stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    BackboneInit,
    HeadInit,
    PeftInit,
    GistInit,
    /// Per-epoch data order; the epoch is folded into the stream id.
    Shuffle(u64),
    /// Synthetic sample by index.
    Sample(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::BackboneInit => 1,
            Stream::HeadInit => 2,
            Stream::PeftInit => 3,
            Stream::GistInit => 4,
            Stream::Shuffle(epoch) => (1 << 32) + epoch,
            Stream::Sample(index) => (2 << 32) + index,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Normal(0, std) resampled until it falls within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn trunc_normal_tensor<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(trunc_normal(rng, std))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fisher–Yates permutation of `0..n` for the given epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = stream(seed, Stream::Shuffle(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
