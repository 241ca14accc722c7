//! Run-length encoding of bit masks for JSON transport.

use afm_core::{BitMask, MaskStage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raster-order runs alternating unset/set, starting with unset; the first
/// run is zero when the mask starts with a set pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
    pub runs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RleError {
    #[error("runs cover {covered} pixels, mask has {expected}")]
    LengthMismatch { covered: usize, expected: usize },
    #[error("zero-length run at position {0}")]
    EmptyRun(usize),
    #[error(transparent)]
    Grid(#[from] afm_core::GridError),
}

impl RleMask {
    pub fn encode(mask: &BitMask) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in mask.bits() {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        if len > 0 {
            runs.push(len);
        }
        RleMask {
            rows: mask.rows(),
            cols: mask.cols(),
            count: mask.count(),
            runs,
        }
    }

    pub fn decode(&self, stage: MaskStage) -> Result<BitMask, RleError> {
        let expected = self.rows * self.cols;
        let covered: usize = self.runs.iter().sum();
        if covered != expected {
            return Err(RleError::LengthMismatch { covered, expected });
        }
        if let Some(i) = self.runs.iter().skip(1).position(|&r| r == 0) {
            return Err(RleError::EmptyRun(i + 1));
        }
        let mut bits = Vec::with_capacity(expected);
        for (i, &run) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run));
        }
        Ok(BitMask::from_bits(self.rows, self.cols, bits, stage)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded() {
        let m = BitMask::from_bits(2, 3, vec![true, true, false, false, false, true], MaskStage::Raw).unwrap();
        let rle = RleMask::encode(&m);
        assert_eq!(rle.runs, vec![0, 2, 3, 1]);
        assert_eq!(rle.count, 3);
        assert_eq!(rle.decode(MaskStage::Raw).unwrap(), m);
        let empty = BitMask::empty(2, 2, MaskStage::Raw);
        assert_eq!(RleMask::encode(&empty).runs, vec![4]);
    }

    #[test]
    fn rejects_bad_runs() {
        let bad = RleMask { rows: 2, cols: 2, count: 0, runs: vec![3] };
        assert!(matches!(bad.decode(MaskStage::Raw), Err(RleError::LengthMismatch { .. })));
        let zero = RleMask { rows: 2, cols: 2, count: 2, runs: vec![2, 0, 2] };
        assert_eq!(zero.decode(MaskStage::Raw), Err(RleError::EmptyRun(1)));
    }
}
