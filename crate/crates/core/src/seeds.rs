//! Named sub-seed derivation. All randomness flows from one master seed
//! through these tags, so individual components stay reproducible on their
//! own.

pub const DATA: u64 = 1;
pub const INIT: u64 = 2;
pub const DROPOUT: u64 = 3;
pub const PROBE: u64 = 4;
pub const SYNTH: u64 = 5;

/// SplitMix64-style mixing of a master seed with a tag (and optionally more
/// context via chaining).
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive with two context values (e.g. epoch and stream index).
pub fn derive2(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    derive(derive(derive(seed, tag), a.wrapping_add(0x517c_c1b7_2722_0a95)), b)
}
