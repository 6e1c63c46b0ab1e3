//! Deterministic, domain-separated RNG streams.
//!
//! Every random decision in the crate draws from a stream derived from the
//! run's master seed plus a domain tag ("init", "shuffle", "attack", ...) and
//! integer coordinates (epoch, batch, restart, ...). Two consequences:
//!
//! - reruns with the same master seed are bit-identical, and
//! - consumers cannot perturb each other: adding an extra validation check
//!   never shifts the randomness seen by the training loop.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 output permutation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed, a domain tag, and coordinates.
///
/// The derivation is a fixed mixing chain, stable across platforms and
/// releases of this crate; changing it would change every seeded run.
pub fn derive_seed(master: u64, domain: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &b in domain.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

/// A ChaCha stream seeded by [`derive_seed`].
pub fn stream(master: u64, domain: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_seed_is_deterministic() {
        let a = derive_seed(42, "attack", &[3, 7]);
        let b = derive_seed(42, "attack", &[3, 7]);
        assert_eq!(a, b);
    }

    #[test]
    fn domains_are_separated() {
        let a = derive_seed(42, "attack", &[0]);
        let b = derive_seed(42, "shuffle", &[0]);
        assert_ne!(a, b);
    }

    #[test]
    fn coordinates_are_separated() {
        assert_ne!(derive_seed(7, "attack", &[0, 1]), derive_seed(7, "attack", &[1, 0]));
        assert_ne!(derive_seed(7, "attack", &[5]), derive_seed(7, "attack", &[6]));
    }

    #[test]
    fn streams_replay_identically() {
        let mut r1 = stream(9, "init", &[2]);
        let mut r2 = stream(9, "init", &[2]);
        let a: Vec<f32> = (0..16).map(|_| r1.gen::<f32>()).collect();
        let b: Vec<f32> = (0..16).map(|_| r2.gen::<f32>()).collect();
        assert_eq!(a, b);
    }
}
