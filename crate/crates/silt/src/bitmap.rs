//! Fixed-width bitmap used for delete tracking and visibility views.

/// A fixed-length bitmap over `len` bits, backed by u64 words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FixedBitmap {
    len: u32,
    words: Vec<u64>,
}

impl FixedBitmap {
    pub fn new(len: u32) -> Self {
        FixedBitmap {
            len,
            words: vec![0; (len as usize + 63) / 64],
        }
    }

    pub fn from_words(len: u32, words: Vec<u64>) -> Self {
        assert_eq!(words.len(), (len as usize + 63) / 64);
        FixedBitmap { len, words }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn set(&mut self, i: u32) {
        debug_assert!(i < self.len);
        self.words[(i / 64) as usize] |= 1u64 << (i % 64);
    }

    pub fn get(&self, i: u32) -> bool {
        debug_assert!(i < self.len);
        self.words[(i / 64) as usize] & (1u64 << (i % 64)) != 0
    }

    /// Number of set bits.
    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Set every bit that is set in `other`.
    pub fn union_with(&mut self, other: &FixedBitmap) {
        debug_assert_eq!(self.len, other.len);
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    /// True if every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &FixedBitmap) -> bool {
        debug_assert_eq!(self.len, other.len);
        self.words.iter().zip(&other.words).all(|(w, o)| w & !o == 0)
    }
}
