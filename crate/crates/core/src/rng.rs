//! Counter-addressable random streams.
//!
//! Each consumer owns an independent ChaCha stream keyed by `(seed, tag)`.
//! The stream position is the ChaCha word counter, so a `(seed, tag,
//! counter)` triple pins every future draw exactly; checkpoints store it to
//! make resumed runs bitwise identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.state() == other.state()
    }
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub counter: u128,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    /// Stream for `purpose` under `seed`. Different tags give independent
    /// streams.
    pub fn new(seed: u64, purpose: &str) -> Self {
        Self::from_parts(seed, fnv1a(purpose.as_bytes()))
    }

    fn from_parts(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Child stream derived from this stream's identity (not its position).
    pub fn substream(&self, purpose: &str) -> Self {
        let mut bytes = self.stream.to_le_bytes().to_vec();
        bytes.extend_from_slice(purpose.as_bytes());
        Self::from_parts(self.seed, fnv1a(&bytes))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            counter: self.rng.get_word_pos(),
        }
    }

    pub fn restore(state: RngState) -> Self {
        let mut s = Self::from_parts(state.seed, state.stream);
        s.rng.set_word_pos(state.counter);
        s
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// `mean + std * eps` with `eps` from this stream; `mean` and `std` are
    /// broadcast to `shape`.
    pub fn gaussian_sample(&mut self, shape: &[usize], mean: &Tensor, std: &Tensor) -> Result<Tensor> {
        if std.data().iter().any(|&s| s < 0.0 || s.is_nan()) {
            return Err(Error::invalid("gaussian_sample: negative std"));
        }
        let mean = mean.broadcast_to(shape)?;
        let std = std.broadcast_to(shape)?;
        let eps = self.normal_tensor(shape);
        mean.add(&std.mul(&eps)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_returns_mean() {
        let mut r = RngStream::new(3, "t");
        let mean = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let s = r
            .gaussian_sample(&[4, 3], &mean, &Tensor::zeros(&[1, 3]))
            .unwrap();
        for row in 0..4 {
            assert_eq!(s.row(row), mean.data());
        }
    }

    #[test]
    fn negative_std_rejected() {
        let mut r = RngStream::new(3, "t");
        assert!(r
            .gaussian_sample(&[2], &Tensor::zeros(&[2]), &Tensor::full(&[2], -1.0))
            .is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let mut r = RngStream::new(11, "moments");
        let n = 100_000;
        let s = r.normal_tensor(&[n]);
        let mean = s.mean();
        let var = s.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn same_seed_and_counter_bitwise_identical() {
        let mut a = RngStream::new(42, "x");
        let mut b = RngStream::new(42, "x");
        let ta = a.normal_tensor(&[64]);
        let tb = b.normal_tensor(&[64]);
        assert_eq!(ta.data(), tb.data());
        let saved = a.state();
        let next = a.normal_tensor(&[16]);
        let mut c = RngStream::restore(saved);
        assert_eq!(c.normal_tensor(&[16]).data(), next.data());
    }

    #[test]
    fn tags_are_independent() {
        let mut a = RngStream::new(42, "data");
        let mut b = RngStream::new(42, "chain");
        assert_ne!(a.normal(), b.normal());
        let s1 = a.substream("k");
        let s2 = b.substream("k");
        assert_ne!(s1.state().stream, s2.state().stream);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = RngStream::new(1, "p");
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
