//! Named, hierarchical random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a root seed
//! plus a path of labels (`seed / "views" / step / image-id / "mask"`). Streams
//! with different paths are independent, so reordering or parallelising work
//! never changes what any single consumer draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// A path in the stream tree. Cheap to clone and extend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngKey {
    seed: u64,
    path: Vec<u8>,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with(&self, label: &str) -> Self {
        let mut next = self.clone();
        next.path.push(b's');
        next.path.extend_from_slice(&(label.len() as u64).to_le_bytes());
        next.path.extend_from_slice(label.as_bytes());
        next
    }

    pub fn with_u64(&self, id: u64) -> Self {
        let mut next = self.clone();
        next.path.push(b'u');
        next.path.extend_from_slice(&id.to_le_bytes());
        next
    }

    pub fn stream(&self) -> Stream {
        let mut hasher = Sha256::new();
        hasher.update(b"msn-rng-v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(&self.path);
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

/// Shorthand for `RngKey::new(seed).with(label).stream()`.
pub fn stream(seed: u64, label: &str) -> Stream {
    RngKey::new(seed).with(label).stream()
}
