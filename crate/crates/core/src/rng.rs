//! Deterministic random streams keyed by a master seed and a label tuple.
//!
//! Every random quantity in the laboratory is drawn from a stream obtained
//! through [`seed_stream`], so a run is fully determined by its master seed and
//! the labels of the work items, independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed and an ordered label tuple into a single 64-bit key.
///
/// The tuple length takes part in the mix, so `(1,)` and `(1, 0)` differ.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut state = master;
    let mut acc = splitmix64(&mut state);
    for (pos, &label) in labels.iter().enumerate() {
        let mut s = acc ^ label.wrapping_mul(GOLDEN).rotate_left(pos as u32 % 64 + 1);
        acc = splitmix64(&mut s) ^ splitmix64(&mut s);
    }
    let mut s = acc ^ (labels.len() as u64);
    splitmix64(&mut s)
}

/// Stream for `(master, labels...)`. Same tuple, same stream.
pub fn seed_stream(master: u64, labels: &[u64]) -> Stream {
    stream_from_key(derive_seed(master, labels))
}

/// Stream for a key previously returned by [`derive_seed`].
pub fn stream_from_key(key: u64) -> Stream {
    let mut state = key;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// What a stream is used for. Folded into the label tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Covariates = 1,
    TestCovariates = 2,
    Weights = 3,
    TrainNoise = 4,
    TestNoise = 5,
    Target = 6,
    LabelNoise = 7,
    TargetNoise = 8,
}

impl Purpose {
    pub const ALL: [Purpose; 8] = [
        Purpose::Covariates,
        Purpose::TestCovariates,
        Purpose::Weights,
        Purpose::TrainNoise,
        Purpose::TestNoise,
        Purpose::Target,
        Purpose::LabelNoise,
        Purpose::TargetNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Purpose::Covariates => "covariates",
            Purpose::TestCovariates => "test_covariates",
            Purpose::Weights => "weights",
            Purpose::TrainNoise => "train_noise",
            Purpose::TestNoise => "test_noise",
            Purpose::Target => "target",
            Purpose::LabelNoise => "label_noise",
            Purpose::TargetNoise => "target_noise",
        }
    }

    pub fn code(self) -> u64 {
        self as u64
    }
}
