//! Binary masks and their run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dims, ensure_same_dims};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "expected {} mask bits for {width}x{height}, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        ensure_same_dims(self.width, self.height, other.width, other.height)
    }

    /// `self AND NOT other`
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_dims(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Row-major runs alternating unset/set, always starting with the count
    /// of unset pixels (which may be zero).
    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            width: self.width,
            height: self.height,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::InvalidArgument(format!(
                "run lengths sum to {total}, expected {}",
                self.width * self.height
            )));
        }
        let mut bits = Vec::with_capacity(self.width * self.height);
        for (k, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat(k % 2 == 1).take(c as usize));
        }
        BinaryMask::new(self.width, self.height, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::new(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(m.to_rle().counts, vec![0, 2, 1]);
    }

    #[test]
    fn rle_decode_sets_expected_pixels() {
        let rle = Rle {
            width: 3,
            height: 2,
            counts: vec![3, 2, 1],
        };
        let m = rle.decode().unwrap();
        assert_eq!(m.bits(), &[false, false, false, true, true, false]);
    }

    #[test]
    fn rle_rejects_bad_total() {
        let rle = Rle {
            width: 2,
            height: 2,
            counts: vec![1, 1],
        };
        assert!(rle.decode().is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1usize..9, h in 1usize..9, seed in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::from_fn(w, h, |x, y| seed[(y * w + x) % 64]);
            let rle = m.to_rle();
            prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), w * h);
            prop_assert_eq!(rle.decode().unwrap(), m);
        }
    }
}
