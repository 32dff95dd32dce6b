//! Deterministic seed derivation so that every sub-stream (per round, per
//! client, per image) gets an independent but reproducible RNG seed.

/// FNV-1a over the tag and indices, finished with a splitmix64 scramble.
pub fn derive_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for byte in base.to_le_bytes() {
        eat(byte);
    }
    for byte in tag.as_bytes() {
        eat(*byte);
    }
    for byte in a.to_le_bytes() {
        eat(byte);
    }
    for byte in b.to_le_bytes() {
        eat(byte);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
