use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent stream for `(seed, domain, index)`; every random draw in the
/// toolkit goes through here so results are a pure function of the seed.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in domain.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h = splitmix(h ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    ChaCha8Rng::seed_from_u64(h)
}

/// One 64-bit seed drawn from `stream(seed, domain, index)`.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    stream(seed, domain, index).next_u64()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
