//! Named, independent random substreams derived from one root seed.
//!
//! Every stochastic choice in the pipeline draws from a stream obtained by
//! name (`"data"`, `"init"`, `"batch-order"`, ...), so varying one component
//! never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { seed: root }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for a named component.
    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream {
            seed: splitmix64(splitmix64(self.seed) ^ fnv1a(name.as_bytes())),
        }
    }

    /// Child stream for an indexed component (identity, seed replicate, ...).
    pub fn index(&self, i: u64) -> SeedStream {
        SeedStream {
            seed: splitmix64(self.seed ^ splitmix64(i.wrapping_add(0x5EED))),
        }
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.child(name).seed)
    }
}
