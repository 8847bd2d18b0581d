//! Counter-based hashing used wherever randomness must be addressable by
//! index rather than drawn from a sequential stream.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one well-mixed 64-bit value.
pub(crate) fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(GOLDEN, |acc, &w| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(w.wrapping_add(GOLDEN)))
    })
}

/// Uniform sample in [0, 1) addressed by `words`.
pub(crate) fn unit_uniform(words: &[u64]) -> f64 {
    // top 53 bits -> exactly representable dyadic rational
    (hash_words(words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Streaming fingerprint over f64 bit patterns and integers.
#[derive(Debug, Clone)]
pub(crate) struct Fingerprint(u64);

impl Fingerprint {
    pub(crate) fn new(tag: u64) -> Self {
        Self(mix64(tag ^ GOLDEN))
    }

    pub(crate) fn word(&mut self, w: u64) -> &mut Self {
        self.0 = mix64(self.0.rotate_left(17) ^ w.wrapping_mul(GOLDEN));
        self
    }

    pub(crate) fn real(&mut self, x: f64) -> &mut Self {
        self.word(x.to_bits())
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
