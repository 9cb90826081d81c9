//! Syntactic image embeddings.
//!
//! Images are decoded to a [`LuminancePlane`] and turned into fixed-width
//! binary fingerprints: a 64-bit DCT hash ([`phash64`]) and the 256-bit PDQ
//! hash ([`pdqhash256`]). Visually similar images land at small [`hamming`]
//! distance from each other.
//!
//! All functions here are pure and may be called from any number of threads.

mod decode;
mod pdq;
mod phash;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use decode::{decode_image, LuminancePlane, MIN_DIMENSION};
pub use pdq::pdqhash256;
pub use phash::phash64;

/// Storage words per hash. PDQ needs four, pHash uses only the first.
pub const HASH_WORDS: usize = 4;

#[derive(Debug, Error)]
pub enum HashError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image is {width}x{height}, both dimensions must be at least {MIN_DIMENSION}")]
    TooSmall { width: u32, height: u32 },
    #[error("hash kind mismatch: expected {expected}, got {actual}")]
    KindMismatch { expected: HashKind, actual: HashKind },
    #[error("invalid hash text {text:?}: {reason}")]
    InvalidHex { text: String, reason: &'static str },
    #[error("luminance plane of {width}x{height} holds {len} samples")]
    PlaneShape { width: u32, height: u32, len: usize },
}

/// Which perceptual hash a fingerprint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HashKind {
    Phash64,
    Pdq256,
}

impl HashKind {
    pub const fn bit_width(self) -> u32 {
        match self {
            HashKind::Phash64 => 64,
            HashKind::Pdq256 => 256,
        }
    }

    /// Number of `u64` words that carry bits for this kind.
    pub const fn words(self) -> usize {
        match self {
            HashKind::Phash64 => 1,
            HashKind::Pdq256 => 4,
        }
    }

    pub const fn hex_len(self) -> usize {
        self.bit_width() as usize / 4
    }

    /// Stable single-byte tag used by binary formats.
    pub const fn tag(self) -> u8 {
        match self {
            HashKind::Phash64 => 1,
            HashKind::Pdq256 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(HashKind::Phash64),
            2 => Some(HashKind::Pdq256),
            _ => None,
        }
    }

    /// The calibrated maximum useful radius for each kind.
    pub const fn default_radius(self) -> u32 {
        match self {
            HashKind::Phash64 => 10,
            HashKind::Pdq256 => 90,
        }
    }
}

impl fmt::Display for HashKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HashKind::Phash64 => "PHASH64",
            HashKind::Pdq256 => "PDQ256",
        })
    }
}

impl FromStr for HashKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PHASH64" | "PHASH" => Ok(HashKind::Phash64),
            "PDQ256" | "PDQ" => Ok(HashKind::Pdq256),
            other => Err(format!("unknown hash kind {other:?}")),
        }
    }
}

/// A fixed-width binary fingerprint.
///
/// Bits are held as a little-endian array of words: bit `i` of the hash is
/// bit `i % 64` of `words[i / 64]`. Unused words are always zero, so two
/// hashes of the same kind can be compared word by word.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerceptualHash {
    kind: HashKind,
    words: [u64; HASH_WORDS],
    quality: Option<u8>,
}

impl PerceptualHash {
    /// Builds a pHash. The value's most significant bit is bit 63.
    pub fn phash(bits: u64) -> Self {
        PerceptualHash {
            kind: HashKind::Phash64,
            words: [bits, 0, 0, 0],
            quality: None,
        }
    }

    /// Builds a PDQ hash. `quality` is clamped to 100.
    pub fn pdq(words: [u64; HASH_WORDS], quality: u8) -> Self {
        PerceptualHash {
            kind: HashKind::Pdq256,
            words,
            quality: Some(quality.min(100)),
        }
    }

    /// Builds a hash of `kind` from raw words, dropping bits beyond the width.
    /// PDQ hashes created this way carry a quality of 100.
    pub fn from_words(kind: HashKind, mut words: [u64; HASH_WORDS]) -> Self {
        for w in words.iter_mut().skip(kind.words()) {
            *w = 0;
        }
        match kind {
            HashKind::Phash64 => Self::phash(words[0]),
            HashKind::Pdq256 => Self::pdq(words, 100),
        }
    }

    pub fn kind(&self) -> HashKind {
        self.kind
    }

    pub fn words(&self) -> &[u64; HASH_WORDS] {
        &self.words
    }

    /// The significant words only (1 for pHash, 4 for PDQ).
    pub fn active_words(&self) -> &[u64] {
        &self.words[..self.kind.words()]
    }

    pub fn quality(&self) -> Option<u8> {
        self.quality
    }

    pub fn bit_width(&self) -> u32 {
        self.kind.bit_width()
    }

    pub fn bit(&self, i: u32) -> bool {
        assert!(i < self.bit_width(), "bit {i} out of range");
        (self.words[(i / 64) as usize] >> (i % 64)) & 1 == 1
    }

    /// Returns a copy with bit `i` inverted.
    pub fn with_flipped(mut self, i: u32) -> Self {
        assert!(i < self.bit_width(), "bit {i} out of range");
        self.words[(i / 64) as usize] ^= 1 << (i % 64);
        self
    }

    /// Bitwise complement within the hash width.
    pub fn complement(mut self) -> Self {
        for w in self.words.iter_mut().take(self.kind.words()) {
            *w = !*w;
        }
        self
    }

    pub fn count_ones(&self) -> u32 {
        self.active_words().iter().map(|w| w.count_ones()).sum()
    }

    /// Lowercase hex, most significant bit first.
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.kind.hex_len());
        for w in self.active_words().iter().rev() {
            out.push_str(&format!("{w:016x}"));
        }
        out
    }

    /// Parses the text form; the kind is inferred from the length
    /// (16 chars for pHash, 64 for PDQ).
    pub fn from_hex(text: &str) -> Result<Self, HashError> {
        let kind = match text.len() {
            16 => HashKind::Phash64,
            64 => HashKind::Pdq256,
            _ => {
                return Err(HashError::InvalidHex {
                    text: text.to_string(),
                    reason: "expected 16 or 64 hex characters",
                })
            }
        };
        Self::from_hex_kind(kind, text)
    }

    pub fn from_hex_kind(kind: HashKind, text: &str) -> Result<Self, HashError> {
        if text.len() != kind.hex_len() {
            return Err(HashError::InvalidHex {
                text: text.to_string(),
                reason: "length does not match hash kind",
            });
        }
        let mut words = [0u64; HASH_WORDS];
        let n = kind.words();
        for (i, chunk) in text.as_bytes().chunks(16).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| HashError::InvalidHex {
                text: text.to_string(),
                reason: "not ascii",
            })?;
            if !s.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(HashError::InvalidHex {
                    text: text.to_string(),
                    reason: "non-hex character",
                });
            }
            words[n - 1 - i] = u64::from_str_radix(s, 16).expect("validated hex");
        }
        Ok(Self::from_words(kind, words))
    }
}

impl fmt::Debug for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.quality {
            Some(q) => write!(f, "{}({}, q={q})", self.kind, self.to_hex()),
            None => write!(f, "{}({})", self.kind, self.to_hex()),
        }
    }
}

impl fmt::Display for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for PerceptualHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PerceptualHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        PerceptualHash::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

/// Number of differing bits between two hashes of the same kind.
pub fn hamming(a: &PerceptualHash, b: &PerceptualHash) -> Result<u32, HashError> {
    if a.kind != b.kind {
        return Err(HashError::KindMismatch {
            expected: a.kind,
            actual: b.kind,
        });
    }
    Ok(hamming_words(a.active_words(), b.active_words()))
}

/// Popcount of XOR over equal-length word slices.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Decodes `bytes` and computes the hash of the requested kind.
pub fn hash_image(bytes: &[u8], kind: HashKind) -> Result<PerceptualHash, HashError> {
    let plane = decode_image(bytes)?;
    Ok(hash_plane(&plane, kind))
}

pub fn hash_plane(plane: &LuminancePlane, kind: HashKind) -> PerceptualHash {
    match kind {
        HashKind::Phash64 => phash64(plane),
        HashKind::Pdq256 => pdqhash256(plane),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_hamming(a: &PerceptualHash, b: &PerceptualHash) -> u32 {
        (0..a.bit_width()).filter(|&i| a.bit(i) != b.bit(i)).count() as u32
    }

    fn arb_pdq() -> impl Strategy<Value = PerceptualHash> {
        any::<[u64; 4]>().prop_map(|w| PerceptualHash::pdq(w, 100))
    }

    #[test]
    fn identical_is_zero_and_complement_is_width() {
        let h = PerceptualHash::phash(0x0123_4567_89ab_cdef);
        assert_eq!(hamming(&h, &h).unwrap(), 0);
        assert_eq!(hamming(&h, &h.complement()).unwrap(), 64);
        let p = PerceptualHash::pdq([1, 2, 3, 4], 50);
        assert_eq!(hamming(&p, &p.complement()).unwrap(), 256);
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let a = PerceptualHash::phash(0);
        let b = PerceptualHash::pdq([0; 4], 100);
        assert!(matches!(hamming(&a, &b), Err(HashError::KindMismatch { .. })));
    }

    #[test]
    fn random_pairs_match_bit_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = PerceptualHash::pdq(rng.random(), 100);
            let b = PerceptualHash::pdq(rng.random(), 100);
            assert_eq!(hamming(&a, &b).unwrap(), naive_hamming(&a, &b));
        }
    }

    #[test]
    fn hex_is_msb_first() {
        let h = PerceptualHash::phash(1 << 63);
        assert_eq!(h.to_hex(), "8000000000000000");
        let p = PerceptualHash::pdq([1, 0, 0, 0], 100);
        assert_eq!(p.to_hex(), format!("{}1", "0".repeat(63)));
        assert_eq!(PerceptualHash::from_hex(&p.to_hex()).unwrap().words(), p.words());
    }

    #[test]
    fn hex_rejects_garbage() {
        assert!(PerceptualHash::from_hex("abc").is_err());
        assert!(PerceptualHash::from_hex("zz23456789abcdef").is_err());
        assert!(PerceptualHash::from_hex_kind(HashKind::Pdq256, "0123456789abcdef").is_err());
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in arb_pdq(), b in arb_pdq(), c in arb_pdq()) {
            let ab = hamming(&a, &b).unwrap();
            prop_assert_eq!(hamming(&a, &a).unwrap(), 0);
            prop_assert_eq!(ab, hamming(&b, &a).unwrap());
            prop_assert!(hamming(&a, &c).unwrap() <= ab + hamming(&b, &c).unwrap());
            prop_assert!(ab <= 256);
        }

        #[test]
        fn hex_round_trip(w in any::<u64>()) {
            let h = PerceptualHash::phash(w);
            prop_assert_eq!(PerceptualHash::from_hex(&h.to_hex()).unwrap(), h);
        }
    }
}
