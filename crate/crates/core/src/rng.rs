//! Hierarchical random streams.
//!
//! Every stream is addressed by a path of labels rooted at the run seed, so a
//! new consumer can be added without shifting the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"soup-root");
        h.update(seed.to_le_bytes());
        StreamKey(h.finalize().into())
    }

    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(b"/label:");
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        StreamKey(h.finalize().into())
    }

    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(b"/index:");
        h.update(i.to_le_bytes());
        StreamKey(h.finalize().into())
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::from_seed(self.0)
    }
}
