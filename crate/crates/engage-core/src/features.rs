//! Text tokenization and seeded feature hashing shared by the toy policy,
//! the reward model and the hashed bag-of-words embedder.
//!
//! Everything here is integer arithmetic until the final vector is built, so
//! the same text always produces the same features on every platform.

/// Lowercases and splits text into alphanumeric runs (apostrophes kept inside
/// words, so "don't" stays one token).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            for lower in ch.to_lowercase() {
                current.push(lower);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded 64-bit FNV-1a over a byte string. The seed is absorbed first so
/// distinct seeds define distinct hash families.
pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(bytes.iter()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Maps a token to a bucket in `[0, buckets)`.
pub fn bucket_of(seed: u64, token: &str, buckets: usize) -> usize {
    (fnv1a64(seed, token.as_bytes()) % buckets as u64) as usize
}

/// Integer bag-of-words over hash buckets: counts per bucket for every token
/// in `text`.
pub fn hashed_counts(seed: u64, text: &str, buckets: usize) -> Vec<u32> {
    let mut counts = vec![0u32; buckets];
    for token in tokenize(text) {
        counts[bucket_of(seed, &token, buckets)] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", "world"]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn hashing_is_stable() {
        let a = fnv1a64(7, b"work");
        let b = fnv1a64(7, b"work");
        assert_eq!(a, b);
        assert_ne!(fnv1a64(8, b"work"), a);
    }

    #[test]
    fn counts_accumulate_per_token() {
        let counts = hashed_counts(0, "go go go", 16);
        assert_eq!(counts.iter().sum::<u32>(), 3);
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
    }
}
