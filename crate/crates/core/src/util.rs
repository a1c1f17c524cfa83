//! Small deterministic helpers shared across modules.

/// FNV-1a 64-bit hash. Used for content fingerprints (grammar text) and seed
/// derivation; stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed, a purpose tag, and an index, so that
/// independent random streams (corpus, shuffles, init, ...) never alias.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = fnv1a(tag.as_bytes());
    h ^= base.rotate_left(17);
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h.wrapping_mul(0x0000_0100_0000_01b3)
}

/// `true` iff `a` and `b` agree within `tol`, absolutely or relatively.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    let diff = (a - b).abs();
    diff <= tol || diff <= tol * a.abs().max(b.abs())
}
