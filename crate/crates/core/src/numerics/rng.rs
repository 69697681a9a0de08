//! Seeded random source.
//!
//! The integer stream is ChaCha8 keyed from a 64-bit seed plus a 64-bit
//! stream id, so it is identical on every platform. Floats are derived the
//! same way everywhere: a uniform is the top 53 bits of one `u64` times
//! 2⁻⁵³, giving `[0, 1)`. Normals come from the Box–Muller transform, two
//! normals per two uniforms; an odd request discards the spare so the number
//! of words consumed is always `2 * ceil(n / 2)`.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{numel, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, kept as a string because it is 128-bit.
    pub word_pos: String,
}

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        Some(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Fills `out` with standard normals.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for pair in out.chunks_mut(2) {
            // 1 - u lies in (0, 1], keeping the log finite.
            let u1 = 1.0 - self.uniform();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            pair[0] = r * theta.cos();
            if pair.len() == 2 {
                pair[1] = r * theta.sin();
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let mut v = [0.0];
        self.fill_normal(&mut v);
        v[0]
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform() * n as f64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Seeded permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

pub fn sample_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut data = vec![0.0; numel(shape)];
    rng.fill_normal(&mut data);
    Tensor::from_vec(shape, data)
}

pub fn sample_uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = sample_normal(&mut Rng::new(7), &[3, 5]);
        let b = sample_normal(&mut Rng::new(7), &[3, 5]);
        assert_eq!(a, b);
        let c = sample_normal(&mut Rng::new(8), &[3, 5]);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let t = sample_normal(&mut Rng::new(1), &[100_000]);
        let mean = t.mean();
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn box_muller_pairs_are_uncorrelated() {
        let t = sample_normal(&mut Rng::new(2), &[200_000]);
        let pairs: Vec<(f64, f64)> = t.data().chunks(2).map(|p| (p[0], p[1])).collect();
        let n = pairs.len() as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
        assert!(cov.abs() < 0.02, "cov {cov}");
    }

    #[test]
    fn uniform_range() {
        let t = sample_uniform(&mut Rng::new(3), &[10_000]);
        assert!(t.data().iter().all(|&u| (0.0..1.0).contains(&u)));
        assert!((t.mean() - 0.5).abs() < 0.02);
    }

    #[test]
    fn odd_requests_consume_whole_pairs() {
        let mut a = Rng::new(4);
        let mut b = Rng::new(4);
        let mut v = [0.0; 3];
        a.fill_normal(&mut v);
        for _ in 0..4 {
            b.next_u64();
        }
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn state_round_trip() {
        let mut r = Rng::with_stream(9, 3);
        for _ in 0..17 {
            r.next_u64();
        }
        let mut restored = Rng::from_state(&r.state()).unwrap();
        assert_eq!(r.next_u64(), restored.next_u64());
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::with_stream(5, 0);
        let mut b = Rng::with_stream(5, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
