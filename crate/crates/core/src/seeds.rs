//! Deterministic fan-out from one global seed to per-component sub-seeds.
//!
//! Each component mixes the global seed with a fixed salt through splitmix64,
//! so component streams stay stable across versions and independent of the
//! order in which components run.

pub const SALT_SYNTH: u64 = 0x5359_4e54_4849_0001;
pub const SALT_SAMPLING: u64 = 0x5341_4d50_4c45_0002;
pub const SALT_MASK: u64 = 0x4d41_534b_0000_0003;
pub const SALT_INIT: u64 = 0x494e_4954_0000_0004;
pub const SALT_AUGMENT: u64 = 0x4155_474d_0000_0005;
pub const SALT_FOLDS: u64 = 0x464f_4c44_0000_0006;
pub const SALT_TREES: u64 = 0x5452_4545_0000_0007;
pub const SALT_SHUFFLE: u64 = 0x5348_5546_0000_0008;
pub const SALT_FRACTION: u64 = 0x4652_4143_0000_0009;
pub const SALT_VALSPLIT: u64 = 0x5641_4c53_0000_000a;

/// splitmix64 mix of a global seed and a component salt, plus an index for
/// per-item streams (tile index, epoch, tree number, ...).
pub fn sub_seed(global: u64, salt: u64, index: u64) -> u64 {
    let mut z = global ^ salt.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
