use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

/// Seeded counter-based generator.
///
/// Backed by ChaCha8, whose keystream is addressed by (key, stream, block
/// counter), so sub-streams derived from one seed never overlap and the
/// output is identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Named sub-stream, e.g. `"data"`, `"reward"`, `"distill"`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::with_stream(seed, fnv1a(name.as_bytes()))
    }

    /// Stream for shard `id` of the named experiment stage.
    pub fn shard(seed: u64, name: &str, id: u64) -> Self {
        let mut bytes = name.as_bytes().to_vec();
        bytes.extend_from_slice(&id.to_le_bytes());
        Self::with_stream(seed, fnv1a(&bytes))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| T::lit(self.normal())).collect()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.normal_vec(n)).expect("length matches shape")
    }

    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        // Fisher-Yates, kept local so the permutation depends only on this stream.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::named(7, "data");
        let mut b = Rng::named(7, "data");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn named_streams_differ() {
        let mut a = Rng::named(7, "data");
        let mut b = Rng::named(7, "reward");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..20).collect();
        Rng::new(3).shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }
}
