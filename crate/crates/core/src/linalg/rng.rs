use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// A reproducible random stream addressed by `(master_seed, path)`.
///
/// Two streams with the same address produce the same draws. Child streams
/// extend the path, so a round, a client and a draw purpose each get their
/// own independent sequence no matter in which order they are consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self::at(master_seed, Vec::new())
    }

    pub fn at(master_seed: u64, path: Vec<u64>) -> Self {
        let mut h = splitmix64(master_seed);
        for &label in &path {
            h = splitmix64(h ^ splitmix64(label.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(h.wrapping_add(i as u64)).to_le_bytes());
        }
        Self {
            master_seed,
            path,
            inner: ChaCha12Rng::from_seed(seed),
        }
    }

    /// Fresh stream one level below this one. Does not consume draws from `self`.
    pub fn child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self::at(self.master_seed, path)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// `count` distinct indices from `0..n`, sorted ascending.
    pub fn choose_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, count.min(n)).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for RngStream {
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
