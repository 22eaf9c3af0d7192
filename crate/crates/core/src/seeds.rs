//! Stable sub-seed derivation.
//!
//! Every random draw in a run traces back to the master seed through
//! `derive_seed(master, [stage, arm, repetition, ...])`. The hash is FNV-1a over
//! the little-endian master seed and the length-prefixed labels, finished with a
//! SplitMix64 mix; it does not depend on the platform or the standard library's
//! hasher.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    for label in labels {
        h = fnv1a(h, &(label.len() as u64).to_le_bytes());
        h = fnv1a(h, label.as_bytes());
    }
    mix(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, &["dve"]), derive_seed(7, &["dve"]));
        assert_ne!(derive_seed(7, &["dve"]), derive_seed(8, &["dve"]));
        assert_ne!(derive_seed(7, &["ab", "c"]), derive_seed(7, &["a", "bc"]));
        assert_ne!(derive_seed(7, &["rl", "baseline"]), derive_seed(7, &["rl", "dvorl"]));
    }

    #[test]
    fn known_value() {
        // Frozen: changing the derivation changes every run's random draws.
        assert_eq!(derive_seed(7, &["dve", "init"]), 2_788_348_374_601_064_960);
    }
}
