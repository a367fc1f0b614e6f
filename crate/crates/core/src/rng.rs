//! Counter-based random streams: every `(seed, stream)` pair addresses an
//! independent ChaCha20 keystream, so work can be split across threads
//! without changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
