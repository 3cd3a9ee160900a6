//! Counter-based random substreams.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by `(seed, domain,
//! stream)`: the seed and domain select the key, the stream index selects the ChaCha
//! nonce. Work split across threads by stream index is therefore reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Domains keep unrelated draws of one seed apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Data = 1,
    WeightA = 2,
    WeightB = 3,
    LazyBasis = 4,
    Restarts = 5,
    Test = 6,
    ExplicitW = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The generator for substream `stream` of `(seed, domain, rep)`.
pub fn substream(seed: u64, domain: Domain, rep: u64, stream: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(domain as u64)) ^ splitmix64(rep.wrapping_add(0x5851_F42D)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

/// Fills `out` with standard normals from the given generator.
pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
