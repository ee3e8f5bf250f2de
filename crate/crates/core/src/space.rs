//! Mixed-radix indexing of every token field of a given length.

use crate::error::{Error, Result};

/// Largest state space any exhaustive enumeration is allowed to visit.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// All fields of `dims` symbols drawn from `0..base`. Dimension 0 is the least significant digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpace {
    base: usize,
    dims: usize,
    len: usize,
}

impl TokenSpace {
    pub fn new(base: usize, dims: usize) -> Result<Self> {
        let size = (base as u128).checked_pow(dims as u32).unwrap_or(u128::MAX);
        if size > ENUMERATION_LIMIT as u128 {
            return Err(Error::EnumerationTooLarge {
                size,
                limit: ENUMERATION_LIMIT,
            });
        }
        Ok(Self {
            base,
            dims,
            len: size as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims);
        for _ in 0..self.dims {
            out.push(index % self.base);
            index /= self.base;
        }
        out
    }

    pub fn encode(&self, tokens: &[usize]) -> usize {
        tokens.iter().rev().fold(0, |acc, &t| acc * self.base + t)
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.len).map(|i| self.decode(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let s = TokenSpace::new(4, 3).unwrap();
        assert_eq!(s.len(), 64);
        for i in 0..s.len() {
            assert_eq!(s.encode(&s.decode(i)), i);
        }
    }

    #[test]
    fn guard_reports_size() {
        let err = TokenSpace::new(11, 6).unwrap_err();
        assert_eq!(
            err,
            Error::EnumerationTooLarge {
                size: 1_771_561,
                limit: ENUMERATION_LIMIT
            }
        );
    }
}
