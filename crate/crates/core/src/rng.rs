//! Seeded random streams.
//!
//! Every component draws from its own ChaCha8 stream derived from one master
//! seed: `stream_seed = master ^ fnv1a64(tag)`. Tags are stable strings such
//! as `"split"`, `"worker/2/init"` or `"eval/episodes"`, so one component can
//! be replayed without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash of a purpose tag.
pub fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seed for the stream named `tag` under `master`.
pub fn stream_seed(master: u64, tag: &str) -> u64 {
    master ^ tag_hash(tag)
}

/// Independent RNG for the stream named `tag`.
pub fn stream(master: u64, tag: &str) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(master, tag))
}
