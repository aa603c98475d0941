//! Seed derivation.
//!
//! Every random stream in a run descends from one master seed. Child seeds
//! are `FNV-1a 64` over the parent seed (little-endian), a purpose label and
//! any number of extra parts, each part terminated by a `0xff` byte, followed
//! by the SplitMix64 finalizer. Streams are `ChaCha8` seeded from the child.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One component of a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum Part<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Part<'a> {
    fn from(s: &'a str) -> Self {
        Part::Str(s)
    }
}

impl From<u64> for Part<'_> {
    fn from(v: u64) -> Self {
        Part::Int(v)
    }
}

impl From<usize> for Part<'_> {
    fn from(v: usize) -> Self {
        Part::Int(v as u64)
    }
}

pub fn derive(parent: u64, label: &str, parts: &[Part<'_>]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &parent.to_le_bytes());
    h = fnv1a(h, label.as_bytes());
    h = fnv1a(h, &[0xff]);
    for part in parts {
        h = match part {
            Part::Str(s) => fnv1a(h, s.as_bytes()),
            Part::Int(v) => fnv1a(h, &v.to_le_bytes()),
        };
        h = fnv1a(h, &[0xff]);
    }
    splitmix_finalize(h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parent: u64, label: &str, parts: &[Part<'_>]) -> ChaCha8Rng {
    rng(derive(parent, label, parts))
}

/// Per-round seed shared by every client and by the participation draw.
pub fn round_seed(master: u64, round: usize) -> u64 {
    derive(master, "round", &[Part::from(round)])
}
