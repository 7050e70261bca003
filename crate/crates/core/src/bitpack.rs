//! Bit-packed binary tensors and XNOR-popcount primitives.
//!
//! A binary value is `+1` or `-1`. In packed form `+1` is bit 1 and `-1` is
//! bit 0, elements are flattened row-major and packed LSB-first. Internally
//! bits live in `u64` words, which have the same layout as the byte stream
//! when the words are written little-endian. Bits past the element count are
//! always zero.

use std::fmt;
use std::ops::Neg;

use crate::error::{Error, Result};
use crate::tensor::element_count;

const WORD_BITS: usize = 64;

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// A value in `{-1, +1}`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Neg,
    Pos,
}

impl Sign {
    #[inline]
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }

    #[inline]
    pub fn bit(self) -> bool {
        self == Sign::Pos
    }

    #[inline]
    pub fn value(self) -> i32 {
        match self {
            Sign::Pos => 1,
            Sign::Neg => -1,
        }
    }

    /// Returns `None` for anything other than `-1` or `+1`.
    pub fn from_value(v: i32) -> Option<Self> {
        match v {
            1 => Some(Sign::Pos),
            -1 => Some(Sign::Neg),
            _ => None,
        }
    }
}

impl Neg for Sign {
    type Output = Sign;

    #[inline]
    fn neg(self) -> Sign {
        match self {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        }
    }
}

impl fmt::Debug for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Pos => "+1",
            Sign::Neg => "-1",
        })
    }
}

/// `+1` iff `a == b`; the product `a * b` in the `±1` domain.
#[inline]
pub fn xnor(a: Sign, b: Sign) -> Sign {
    Sign::from_bit(a == b)
}

/// Binary dot product `Σ xnor(x_k, w_k)` over the first `len` bits of two
/// packed word slices. Equals `2 * matches - len`.
#[inline]
pub fn dot_words(x: &[u64], w: &[u64], len: usize) -> i32 {
    let full = len / WORD_BITS;
    let mut matches = 0u32;
    for (a, b) in x[..full].iter().zip(&w[..full]) {
        matches += (!(a ^ b)).count_ones();
    }
    let rem = len % WORD_BITS;
    if rem != 0 {
        let mask = (1u64 << rem) - 1;
        matches += (!(x[full] ^ w[full]) & mask).count_ones();
    }
    2 * matches as i32 - len as i32
}

/// Flat bit vector with the packing described at module level.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct PackedBits {
    len: usize,
    words: Vec<u64>,
}

impl PackedBits {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; words_for(len)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut bits = Self {
            len,
            words: vec![u64::MAX; words_for(len)],
        };
        bits.clear_padding();
        bits
    }

    pub fn from_bools(values: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for v in values {
            if len % WORD_BITS == 0 {
                words.push(0);
            }
            if v {
                words[len / WORD_BITS] |= 1 << (len % WORD_BITS);
            }
            len += 1;
        }
        Self { len, words }
    }

    /// Takes `words_for(len)` words; bits past `len` are cleared.
    pub(crate) fn from_words(len: usize, words: Vec<u64>) -> Self {
        assert_eq!(words.len(), words_for(len));
        let mut bits = Self { len, words };
        bits.clear_padding();
        bits
    }

    pub fn from_signs(values: &[Sign]) -> Self {
        Self::from_bools(values.iter().map(|s| s.bit()))
    }

    /// Reads `len` bits from exactly `ceil(len / 8)` bytes. Nonzero padding
    /// bits are rejected.
    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        let needed = len.div_ceil(8);
        if bytes.len() != needed {
            return Err(Error::Inconsistent(format!(
                "{len} bits need {needed} bytes, blob has {}",
                bytes.len()
            )));
        }
        let mut words = vec![0u64; words_for(len)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        let bits = Self { len, words };
        let mut clean = bits.clone();
        clean.clear_padding();
        if clean != bits {
            return Err(Error::Inconsistent(format!(
                "nonzero padding bits after bit {len}"
            )));
        }
        Ok(bits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let m = 1u64 << (i % WORD_BITS);
        if v {
            self.words[i / WORD_BITS] |= m;
        } else {
            self.words[i / WORD_BITS] &= !m;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// Indices of set bits, ascending.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD_BITS + b)
            })
        })
    }

    pub fn negated(&self) -> Self {
        let mut out = Self {
            len: self.len,
            words: self.words.iter().map(|w| !w).collect(),
        };
        out.clear_padding();
        out
    }

    fn clear_padding(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for PackedBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PackedBits[{}](", self.len)?;
        for b in self.iter().take(128) {
            f.write_str(if b { "1" } else { "0" })?;
        }
        if self.len > 128 {
            f.write_str("…")?;
        }
        f.write_str(")")
    }
}

/// Copies `len` bits from `src` starting at bit `src_off` into `dst` at bit
/// `dst_off`. `dst` bits outside the range are left untouched.
pub(crate) fn copy_bits(src: &[u64], src_off: usize, dst: &mut [u64], dst_off: usize, len: usize) {
    let mut done = 0;
    while done < len {
        let s = src_off + done;
        let d = dst_off + done;
        let s_bit = s % WORD_BITS;
        let d_bit = d % WORD_BITS;
        let chunk = (len - done).min(WORD_BITS - s_bit).min(WORD_BITS - d_bit);
        let mask = if chunk == WORD_BITS {
            u64::MAX
        } else {
            (1u64 << chunk) - 1
        };
        let v = (src[s / WORD_BITS] >> s_bit) & mask;
        let dw = &mut dst[d / WORD_BITS];
        *dw = (*dw & !(mask << d_bit)) | (v << d_bit);
        done += chunk;
    }
}

/// Multi-dimensional tensor over `{-1, +1}`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryTensor {
    shape: Vec<usize>,
    bits: PackedBits,
}

impl BinaryTensor {
    /// All `-1`.
    pub fn negative(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            bits: PackedBits::zeros(n),
        }
    }

    pub fn pack(values: &[Sign], shape: Vec<usize>) -> Result<Self> {
        let expected = element_count(&shape);
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            bits: PackedBits::from_signs(values),
        })
    }

    pub fn from_bits(bits: PackedBits, shape: Vec<usize>) -> Result<Self> {
        let expected = element_count(&shape);
        if bits.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self { shape, bits })
    }

    pub fn from_bytes(bytes: &[u8], shape: Vec<usize>) -> Result<Self> {
        let bits = PackedBits::from_bytes(element_count(&shape), bytes)?;
        Ok(Self { shape, bits })
    }

    pub fn unpack(&self) -> Vec<Sign> {
        self.bits.iter().map(Sign::from_bit).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.to_bytes()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &PackedBits {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut PackedBits {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> Sign {
        Sign::from_bit(self.bits.get(i))
    }

    pub fn negated(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            bits: self.bits.negated(),
        }
    }

    pub(crate) fn reshape(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(element_count(&shape), self.bits.len());
        self.shape = shape;
        self
    }
}

impl fmt::Debug for BinaryTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryTensor")
            .field("shape", &self.shape)
            .field("bits", &self.bits)
            .finish()
    }
}

/// `Σ_k xnor(x_k, w_k)` over two equally long bit vectors.
pub fn xnor_popcount_dot(x: &PackedBits, w: &PackedBits) -> Result<i32> {
    if x.len() != w.len() {
        return Err(Error::DotLength {
            left: x.len(),
            right: w.len(),
        });
    }
    Ok(dot_words(x.words(), w.words(), x.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn signs(v: &[i32]) -> Vec<Sign> {
        v.iter().map(|&x| Sign::from_value(x).unwrap()).collect()
    }

    fn loop_dot(x: &[Sign], w: &[Sign]) -> i32 {
        x.iter().zip(w).map(|(&a, &b)| xnor(a, b).value()).sum()
    }

    #[test]
    fn xnor_truth_table() {
        assert_eq!(xnor(Sign::Pos, Sign::Pos), Sign::Pos);
        assert_eq!(xnor(Sign::Pos, Sign::Neg), Sign::Neg);
        assert_eq!(xnor(Sign::Neg, Sign::Pos), Sign::Neg);
        assert_eq!(xnor(Sign::Neg, Sign::Neg), Sign::Pos);
        for a in [Sign::Neg, Sign::Pos] {
            for b in [Sign::Neg, Sign::Pos] {
                assert_eq!(xnor(a, b).value(), a.value() * b.value());
                assert_eq!(xnor(a, b).bit(), !(a.bit() ^ b.bit()));
            }
        }
    }

    #[test]
    fn dot_examples() {
        let x = PackedBits::from_signs(&[Sign::Pos; 9]);
        assert_eq!(xnor_popcount_dot(&x, &x).unwrap(), 9);
        let x = PackedBits::from_signs(&signs(&[1, -1, 1, -1]));
        let w = PackedBits::from_signs(&signs(&[1, 1, -1, -1]));
        assert_eq!(xnor_popcount_dot(&x, &w).unwrap(), 0);
    }

    #[test]
    fn dot_length_mismatch() {
        let x = PackedBits::zeros(4);
        let w = PackedBits::zeros(5);
        assert!(matches!(
            xnor_popcount_dot(&x, &w),
            Err(Error::DotLength { left: 4, right: 5 })
        ));
    }

    #[test]
    fn pack_layout() {
        let t = BinaryTensor::pack(&signs(&[1, -1, 1, -1, 1, -1, 1, -1, 1]), vec![9]).unwrap();
        assert_eq!(t.to_bytes(), vec![0b0101_0101, 0b0000_0001]);
    }

    #[test]
    fn pack_degenerate_and_mismatch() {
        let t = BinaryTensor::pack(&[], vec![0]).unwrap();
        assert!(t.to_bytes().is_empty());
        assert!(matches!(
            BinaryTensor::pack(&[Sign::Pos], vec![2]),
            Err(Error::LengthMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn nonzero_padding_rejected() {
        assert!(PackedBits::from_bytes(3, &[0b0000_1000]).is_err());
        assert!(PackedBits::from_bytes(3, &[0b0000_0101]).is_ok());
        assert!(PackedBits::from_bytes(9, &[0]).is_err());
    }

    #[test]
    fn random_dots_match_loop() {
        use rand_core::{RngCore, SeedableRng};
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(11);
        for _ in 0..1000 {
            let k = 1 + (rng.next_u64() % 64) as usize;
            let x: Vec<Sign> = (0..k).map(|_| Sign::from_bit(rng.next_u64() & 1 == 1)).collect();
            let w: Vec<Sign> = (0..k).map(|_| Sign::from_bit(rng.next_u64() & 1 == 1)).collect();
            let got =
                xnor_popcount_dot(&PackedBits::from_signs(&x), &PackedBits::from_signs(&w)).unwrap();
            assert_eq!(got, loop_dot(&x, &w));
        }
    }

    #[test]
    fn copy_bits_matches_per_bit() {
        let src = PackedBits::from_bools((0..300).map(|i| (i * 7 + i / 3) % 5 < 2));
        for (s_off, d_off, len) in [(0, 0, 300), (3, 61, 200), (63, 1, 130), (5, 64, 64)] {
            let mut dst = PackedBits::ones(400);
            let len = len.min(300 - s_off);
            copy_bits(src.words(), s_off, &mut dst.words, d_off, len);
            for i in 0..400 {
                let expect = if i >= d_off && i < d_off + len {
                    src.get(s_off + i - d_off)
                } else {
                    true
                };
                assert_eq!(dst.get(i), expect, "bit {i}");
            }
        }
    }

    fn arb_signs(max: usize) -> impl Strategy<Value = Vec<Sign>> {
        prop::collection::vec(any::<bool>().prop_map(Sign::from_bit), 1..max)
    }

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(any::<bool>().prop_map(Sign::from_bit), 0..10_000)) {
            let n = values.len();
            let t = BinaryTensor::pack(&values, vec![n]).unwrap();
            prop_assert_eq!(t.unpack(), values);
            let back = BinaryTensor::from_bytes(&t.to_bytes(), vec![n]).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn dot_properties(x in arb_signs(300), seed in any::<u64>()) {
            let k = x.len();
            let w: Vec<Sign> = (0..k).map(|i| Sign::from_bit((seed.rotate_left(i as u32) ^ i as u64) & 1 == 1)).collect();
            let neg_w: Vec<Sign> = w.iter().map(|&s| -s).collect();
            let (px, pw, pn) = (PackedBits::from_signs(&x), PackedBits::from_signs(&w), PackedBits::from_signs(&neg_w));
            let d = xnor_popcount_dot(&px, &pw).unwrap();
            prop_assert_eq!(xnor_popcount_dot(&px, &px).unwrap(), k as i32);
            prop_assert_eq!(d, -xnor_popcount_dot(&px, &pn).unwrap());
            prop_assert_eq!(d.rem_euclid(2), (k % 2) as i32);
            prop_assert!(d.abs() <= k as i32);
            prop_assert_eq!(d, loop_dot(&x, &w));
        }
    }
}
