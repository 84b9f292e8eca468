//! Tokenizer and stable hash shared by the local embedder and the entropy metric.
//!
//! Tokens are produced by lowercasing the input and splitting on runs of
//! characters that are not Unicode alphanumeric. The hash is 64-bit FNV-1a
//! over the UTF-8 bytes of a token, which keeps hashed vectors identical
//! across processes, platforms and implementations.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercase and split on non-alphanumeric runs. Empty tokens are never emitted.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}
