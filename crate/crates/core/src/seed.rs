//! Seed fan-out.
//!
//! Every random stream in the toolkit is derived from a master seed, a purpose
//! tag and an index: `derive(master, tag, index)`. The tag is hashed with
//! 64-bit FNV-1a and the three words are combined through SplitMix64 rounds,
//! so streams for different tags or indices are statistically independent and
//! the mapping is stable across platforms and releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for `(master, tag, index)`.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let h = splitmix64(master);
    let h = splitmix64(h ^ fnv1a(tag));
    splitmix64(h ^ index)
}
