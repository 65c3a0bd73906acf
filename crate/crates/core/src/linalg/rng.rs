use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Identifies one independent random stream: the run seed, what the draws are
/// for, and any indices (epoch, instance, sample...) that distinguish it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub seed: u64,
    pub purpose: String,
    pub index: Vec<u64>,
}

/// Deterministic RNG keyed by a [`StreamId`]. Identical ids yield identical
/// draw sequences on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    stream: StreamId,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, purpose: &str, index: &[u64]) -> Self {
        Self::from_stream(StreamId {
            seed,
            purpose: purpose.to_string(),
            index: index.to_vec(),
        })
    }

    pub fn from_stream(stream: StreamId) -> Self {
        // Fold every component of the id through splitmix so that nearby
        // seeds and indices land on unrelated keys.
        let mut state = stream.seed;
        let mut acc = splitmix64(&mut state);
        for b in stream.purpose.bytes() {
            state ^= u64::from(b).wrapping_mul(0x100_0000_01B3);
            acc ^= splitmix64(&mut state);
        }
        // Length separator keeps ("ab", [1]) and ("a", [..]) apart.
        state ^= stream.index.len() as u64 ^ 0xA5A5_A5A5;
        acc ^= splitmix64(&mut state);
        for &i in &stream.index {
            state ^= i;
            acc = acc.rotate_left(17) ^ splitmix64(&mut state);
        }
        let mut key = [0u8; 32];
        let mut s = acc;
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        Self {
            inner: ChaCha8Rng::from_seed(key),
            stream,
        }
    }

    pub fn stream(&self) -> &StreamId {
        &self.stream
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift with rejection for exact uniformity.
        let n64 = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n64 as u128);
            let low = m as u64;
            if low >= n64.wrapping_neg() % n64 {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
