//! Packing of low-bit quantization codes into 32-bit words.
//!
//! Two layouts exist:
//!
//! * `Uniform(b)` for `b` in {1, 2, 4}: `32 / b` codes per word, code `i` of a
//!   word at bit offset `i * b`.
//! * `Mixed3`: blocks of eleven codes per word. Positions 0..=9 are 3-bit
//!   fields at offsets 0, 3, .., 27 and position 10 is a 2-bit field at
//!   offset 30, so all 32 bits are used.
//!
//! Fields are filled LSB-first and the final partial word is zero-padded;
//! the logical length disambiguates the padding. Words are serialized
//! little-endian wherever they hit disk.

use crate::error::{Error, Result};

/// Codes per `Mixed3` word.
pub const MIXED3_BLOCK: usize = 11;

/// Field maximum for position 10 of a `Mixed3` block.
pub const MIXED3_TAIL_QMAX: u32 = 3;

/// Field maximum for positions 0..=9 of a `Mixed3` block.
pub const MIXED3_QMAX: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    Uniform(u32),
    Mixed3,
}

impl Layout {
    /// Picks the layout for a bit width; 3 bits always maps to `Mixed3`.
    pub fn for_bits(bits: u32) -> Result<Self> {
        match bits {
            1 | 2 | 4 => Ok(Layout::Uniform(bits)),
            3 => Ok(Layout::Mixed3),
            other => Err(Error::UnsupportedBits(other)),
        }
    }

    pub fn bits(&self) -> u32 {
        match *self {
            Layout::Uniform(b) => b,
            Layout::Mixed3 => 3,
        }
    }

    /// Number of words needed for `n` codes.
    pub fn word_count(&self, n: usize) -> usize {
        match *self {
            Layout::Uniform(b) => (n * b as usize).div_ceil(32),
            Layout::Mixed3 => n.div_ceil(MIXED3_BLOCK),
        }
    }

    /// Largest code representable at logical index `idx`.
    #[inline]
    pub fn qmax_at(&self, idx: usize) -> u32 {
        match *self {
            Layout::Uniform(b) => (1 << b) - 1,
            Layout::Mixed3 => {
                if idx % MIXED3_BLOCK == MIXED3_BLOCK - 1 {
                    MIXED3_TAIL_QMAX
                } else {
                    MIXED3_QMAX
                }
            }
        }
    }

    /// `(word index, bit shift, field mask)` of logical index `idx`.
    #[inline]
    fn locate(&self, idx: usize) -> (usize, u32, u32) {
        match *self {
            Layout::Uniform(b) => {
                let per_word = (32 / b) as usize;
                let shift = (idx % per_word) as u32 * b;
                (idx / per_word, shift, (1u32 << b) - 1)
            }
            Layout::Mixed3 => {
                let pos = idx % MIXED3_BLOCK;
                if pos == MIXED3_BLOCK - 1 {
                    (idx / MIXED3_BLOCK, 30, 0b11)
                } else {
                    (idx / MIXED3_BLOCK, pos as u32 * 3, 0b111)
                }
            }
        }
    }

    fn tag(&self) -> u8 {
        match *self {
            Layout::Uniform(b) => b as u8,
            Layout::Mixed3 => 3,
        }
    }
}

/// Codes per 32-bit word for the uniform layouts.
pub fn feat_per_word(bits: u32) -> Result<usize> {
    match bits {
        1 | 2 | 4 => Ok((32 / bits) as usize),
        other => Err(Error::UnsupportedBits(other)),
    }
}

/// Cursor over a [`PackedBuffer`]; see [`PackedBuffer::iter_from`].
#[derive(Debug, Clone)]
pub struct CodeIter<'a> {
    buf: &'a PackedBuffer,
    idx: usize,
    word: usize,
    shift: u32,
}

impl Iterator for CodeIter<'_> {
    type Item = (u32, u32);

    #[inline]
    fn next(&mut self) -> Option<(u32, u32)> {
        if self.idx >= self.buf.len {
            return None;
        }
        let w = self.buf.words[self.word];
        let item = match self.buf.layout {
            Layout::Uniform(b) => {
                let mask = (1u32 << b) - 1;
                let code = (w >> self.shift) & mask;
                self.shift += b;
                if self.shift >= 32 {
                    self.shift = 0;
                    self.word += 1;
                }
                (code, mask)
            }
            Layout::Mixed3 => {
                if self.shift == 30 {
                    self.shift = 0;
                    self.word += 1;
                    (w >> 30, MIXED3_TAIL_QMAX)
                } else {
                    let code = (w >> self.shift) & 0b111;
                    self.shift += 3;
                    (code, MIXED3_QMAX)
                }
            }
        };
        self.idx += 1;
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.buf.len.saturating_sub(self.idx);
        (n, Some(n))
    }
}

/// Immutable packed code sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBuffer {
    words: Vec<u32>,
    layout: Layout,
    len: usize,
}

impl PackedBuffer {
    /// Rebuilds a buffer from raw parts, checking the word count.
    pub fn from_parts(words: Vec<u32>, layout: Layout, len: usize) -> Result<Self> {
        if let Layout::Uniform(b) = layout {
            feat_per_word(b)?;
        }
        let expected = layout.word_count(len);
        if words.len() != expected {
            return Err(Error::Format(format!(
                "{} words for {} codes in layout {:?} ({} expected)",
                words.len(),
                len,
                layout,
                expected
            )));
        }
        Ok(Self { words, layout, len })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, idx: usize) -> Result<u32> {
        if idx >= self.len {
            return Err(Error::IndexOutOfBounds {
                index: idx,
                len: self.len,
            });
        }
        Ok(self.code(idx))
    }

    /// Unchecked-length read used by the attention kernels.
    #[inline]
    pub fn code(&self, idx: usize) -> u32 {
        debug_assert!(idx < self.len);
        let (w, shift, mask) = self.layout.locate(idx);
        (self.words[w] >> shift) & mask
    }

    pub fn unpack_all(&self) -> Vec<u32> {
        (0..self.len).map(|i| self.code(i)).collect()
    }

    /// Sequential reader starting at logical index `start`; yields
    /// `(code, field q_max)` without per-element division.
    pub fn iter_from(&self, start: usize) -> CodeIter<'_> {
        let (word, shift, _) = if start < self.len {
            self.layout.locate(start)
        } else {
            (self.words.len(), 0, 0)
        };
        CodeIter {
            buf: self,
            idx: start,
            word,
            shift,
        }
    }

    pub fn payload_bits(&self) -> u64 {
        self.words.len() as u64 * 32
    }

    pub(crate) fn layout_tag(&self) -> u8 {
        self.layout.tag()
    }

    pub(crate) fn layout_from_tag(tag: u8) -> Result<Layout> {
        Layout::for_bits(tag as u32).map_err(|_| Error::Format(format!("unknown layout tag {tag}")))
    }
}

/// Append-only writer that streams codes straight into packed words.
#[derive(Debug, Clone)]
pub struct PackedWriter {
    words: Vec<u32>,
    layout: Layout,
    len: usize,
}

impl PackedWriter {
    pub fn new(layout: Layout) -> Self {
        Self::with_capacity(layout, 0)
    }

    pub fn with_capacity(layout: Layout, codes: usize) -> Self {
        Self {
            words: Vec::with_capacity(layout.word_count(codes)),
            layout,
            len: 0,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Field maximum for the next pushed code.
    #[inline]
    pub fn next_qmax(&self) -> u32 {
        self.layout.qmax_at(self.len)
    }

    pub fn push(&mut self, code: u32) -> Result<()> {
        let idx = self.len;
        let max = self.layout.qmax_at(idx);
        if code > max {
            return Err(match self.layout {
                Layout::Uniform(bits) => Error::CodeOutOfRange {
                    index: idx,
                    code,
                    bits,
                },
                Layout::Mixed3 => Error::Mixed3OutOfRange {
                    block: idx / MIXED3_BLOCK,
                    position: idx % MIXED3_BLOCK,
                    code,
                    max,
                },
            });
        }
        let (w, shift, _) = self.layout.locate(idx);
        if w == self.words.len() {
            self.words.push(0);
        }
        self.words[w] |= code << shift;
        self.len += 1;
        Ok(())
    }

    pub fn finish(self) -> PackedBuffer {
        PackedBuffer {
            words: self.words,
            layout: self.layout,
            len: self.len,
        }
    }
}

fn pack_with(codes: &[u32], layout: Layout) -> Result<PackedBuffer> {
    let mut w = PackedWriter::with_capacity(layout, codes.len());
    for &c in codes {
        w.push(c)?;
    }
    Ok(w.finish())
}

pub fn pack_uniform(codes: &[u32], bits: u32) -> Result<PackedBuffer> {
    feat_per_word(bits)?;
    pack_with(codes, Layout::Uniform(bits))
}

pub fn unpack_uniform(buf: &PackedBuffer, idx: usize) -> Result<u32> {
    match buf.layout {
        Layout::Uniform(_) => buf.get(idx),
        Layout::Mixed3 => Err(Error::LayoutMismatch(
            "expected a uniform layout, found Mixed3".into(),
        )),
    }
}

pub fn pack_mixed3(codes: &[u32]) -> Result<PackedBuffer> {
    pack_with(codes, Layout::Mixed3)
}

pub fn unpack_mixed3(buf: &PackedBuffer, idx: usize) -> Result<u32> {
    match buf.layout {
        Layout::Mixed3 => buf.get(idx),
        Layout::Uniform(b) => Err(Error::LayoutMismatch(format!(
            "expected Mixed3, found Uniform({b})"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent per-element oracle: explicit bit offsets, no shared helpers.
    fn oracle_pack(codes: &[u32], layout: Layout) -> Vec<u32> {
        let mut out = Vec::new();
        match layout {
            Layout::Uniform(b) => {
                for (i, &c) in codes.iter().enumerate() {
                    let bit = i * b as usize;
                    if bit / 32 == out.len() {
                        out.push(0u32);
                    }
                    out[bit / 32] |= c << (bit % 32);
                }
            }
            Layout::Mixed3 => {
                for chunk in codes.chunks(11) {
                    let mut word = 0u32;
                    for (p, &c) in chunk.iter().enumerate() {
                        let offset = if p < 10 { 3 * p } else { 30 };
                        word |= c << offset;
                    }
                    out.push(word);
                }
            }
        }
        out
    }

    fn uniform3_oracle_words(n: usize) -> usize {
        n.div_ceil(10)
    }

    #[test]
    fn feat_per_word_values() {
        assert_eq!(feat_per_word(4).unwrap(), 8);
        assert_eq!(feat_per_word(2).unwrap(), 16);
        assert_eq!(feat_per_word(1).unwrap(), 32);
        assert!(matches!(feat_per_word(3), Err(Error::UnsupportedBits(3))));
        assert!(feat_per_word(8).is_err());
    }

    #[test]
    fn uniform_extremes() {
        let zeros = pack_uniform(&[0; 16], 2).unwrap();
        assert_eq!(zeros.words(), &[0]);
        let ones = pack_uniform(&[3; 16], 2).unwrap();
        assert_eq!(ones.words(), &[0xFFFF_FFFF]);
        let buf = pack_uniform(&[0, 1, 2, 3], 2).unwrap();
        assert_eq!(unpack_uniform(&buf, 3).unwrap(), 3);
        let one = pack_uniform(&[1], 1).unwrap();
        assert_eq!(unpack_uniform(&one, 0).unwrap(), 1);
    }

    #[test]
    fn uniform_rejects_wide_code_with_index() {
        let err = pack_uniform(&[1, 2, 4, 0], 2).unwrap_err();
        assert!(matches!(
            err,
            Error::CodeOutOfRange {
                index: 2,
                code: 4,
                bits: 2
            }
        ));
        assert!(pack_uniform(&[0], 3).is_err());
    }

    #[test]
    fn mixed3_extremes() {
        let full = pack_mixed3(&[7, 7, 7, 7, 7, 7, 7, 7, 7, 7, 3]).unwrap();
        assert_eq!(full.words(), &[0xFFFF_FFFF]);
        let zero = pack_mixed3(&[0; 11]).unwrap();
        assert_eq!(zero.words(), &[0]);
    }

    #[test]
    fn mixed3_field_offsets() {
        let mut codes = vec![0; 11];
        codes[10] = 2;
        assert_eq!(pack_mixed3(&codes).unwrap().words(), &[2 << 30]);
        codes[10] = 0;
        codes[9] = 5;
        assert_eq!(pack_mixed3(&codes).unwrap().words(), &[5 << 27]);
    }

    #[test]
    fn mixed3_rejects_with_block_and_position() {
        let mut codes = vec![0; 22];
        codes[21] = 4;
        let err = pack_mixed3(&codes).unwrap_err();
        assert!(matches!(
            err,
            Error::Mixed3OutOfRange {
                block: 1,
                position: 10,
                code: 4,
                max: 3
            }
        ));
        let mut codes = vec![0; 5];
        codes[3] = 8;
        assert!(pack_mixed3(&codes).is_err());
    }

    #[test]
    fn mixed3_thousand_codes_word_count() {
        let codes: Vec<u32> = (0..1000).map(|i| if i % 11 == 10 { 3 } else { (i % 8) as u32 }).collect();
        let buf = pack_mixed3(&codes).unwrap();
        assert_eq!(buf.words().len(), 91);
        assert_eq!(uniform3_oracle_words(1000), 100);
        assert_eq!(buf.unpack_all(), codes);
    }

    #[test]
    fn out_of_bounds_and_layout_errors() {
        let buf = pack_uniform(&[1, 2], 4).unwrap();
        assert!(matches!(
            unpack_uniform(&buf, 2),
            Err(Error::IndexOutOfBounds { index: 2, len: 2 })
        ));
        assert!(unpack_mixed3(&buf, 0).is_err());
        let m = pack_mixed3(&[1]).unwrap();
        assert!(unpack_uniform(&m, 0).is_err());
        assert!(unpack_mixed3(&m, 1).is_err());
    }

    #[test]
    fn from_parts_validates_word_count() {
        assert!(PackedBuffer::from_parts(vec![0, 0], Layout::Mixed3, 11).is_err());
        assert!(PackedBuffer::from_parts(vec![0], Layout::Mixed3, 11).is_ok());
        assert!(PackedBuffer::from_parts(vec![], Layout::Uniform(4), 0).is_ok());
    }

    fn codes_for(layout: Layout, max_len: usize) -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(any::<u32>(), 0..=max_len).prop_map(move |raw| {
            raw.iter()
                .enumerate()
                .map(|(i, r)| r % (layout.qmax_at(i) + 1))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn cursor_matches_random_access(
            (layout, codes) in any_layout().prop_flat_map(|l| (Just(l), codes_for(l, 200))),
            start in 0usize..220,
        ) {
            let buf = match layout {
                Layout::Mixed3 => pack_mixed3(&codes).unwrap(),
                Layout::Uniform(b) => pack_uniform(&codes, b).unwrap(),
            };
            let seen: Vec<(u32, u32)> = buf.iter_from(start).collect();
            let expected: Vec<(u32, u32)> = (start.min(codes.len())..codes.len())
                .map(|i| (codes[i], layout.qmax_at(i)))
                .collect();
            prop_assert_eq!(seen, expected);
        }
    }

    fn any_layout() -> impl Strategy<Value = Layout> {
        prop_oneof![
            Just(Layout::Uniform(1)),
            Just(Layout::Uniform(2)),
            Just(Layout::Uniform(4)),
            Just(Layout::Mixed3),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip_matches_oracle(
            (layout, codes) in any_layout().prop_flat_map(|l| (Just(l), codes_for(l, 1000)))
        ) {
            let buf = match layout {
                Layout::Uniform(b) => pack_uniform(&codes, b).unwrap(),
                Layout::Mixed3 => pack_mixed3(&codes).unwrap(),
            };
            let expected = oracle_pack(&codes, layout);
            prop_assert_eq!(buf.words(), expected.as_slice());
            prop_assert_eq!(buf.words().len(), layout.word_count(codes.len()));
            prop_assert_eq!(buf.unpack_all(), codes);
        }

        #[test]
        fn mixed3_density_gain(k in 1usize..40) {
            let n = 110 * k;
            prop_assert_eq!(Layout::Mixed3.word_count(n), n / 11);
            prop_assert_eq!(uniform3_oracle_words(n), n / 10);
            prop_assert_eq!(Layout::Mixed3.word_count(n) * 11, uniform3_oracle_words(n) * 10);
        }
    }
}
