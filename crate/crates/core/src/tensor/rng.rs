use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent random streams. Each label selects a distinct ChaCha stream,
/// so e.g. drawing more dropout masks never shifts the masking sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamLabel {
    Init = 0,
    Mask = 1,
    Augment = 2,
    Dropout = 3,
    Shuffle = 4,
}

impl StreamLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Init,
            1 => Self::Mask,
            2 => Self::Augment,
            3 => Self::Dropout,
            4 => Self::Shuffle,
            _ => return None,
        })
    }
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub label: StreamLabel,
    pub key: u64,
    pub counter: u128,
}

/// Counter-based generator keyed by `(seed, label, key)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    label: StreamLabel,
    key: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, label: StreamLabel) -> Self {
        Self::keyed(seed, label, 0)
    }

    fn keyed(seed: u64, label: StreamLabel, key: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&key.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(bytes);
        inner.set_stream(label as u64);
        Self {
            seed,
            label,
            key,
            inner,
        }
    }

    /// Derives an independent child stream, e.g. one per epoch or per image.
    pub fn fork(&self, key: u64) -> Self {
        let child = splitmix64(self.key ^ splitmix64(key.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self::keyed(self.seed, self.label, child)
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            label: self.label,
            key: self.key,
            counter: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::keyed(state.seed, state.label, state.key);
        rng.inner.set_word_pos(state.counter);
        rng
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_f32(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
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
