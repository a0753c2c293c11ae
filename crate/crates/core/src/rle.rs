//! Run-length encodings used by the annotation sidecar files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask as `(start, length)` runs of set pixels in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<(usize, usize)>,
}

impl MaskRle {
    pub fn encode(height: usize, width: usize, mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                runs.push((start, i - start));
            } else {
                i += 1;
            }
        }
        Self { height, width, runs }
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        let len = self.height * self.width;
        let mut mask = vec![false; len];
        let mut prev_end = 0;
        for &(start, run) in &self.runs {
            if start < prev_end || run == 0 || start + run > len {
                return Err(Error::Input(format!("malformed mask run ({start}, {run})")));
            }
            mask[start..start + run].fill(true);
            prev_end = start + run;
        }
        Ok(mask)
    }
}

/// Label grid as `(label, count)` runs in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<(u8, usize)>,
}

impl LabelRle {
    pub fn encode(height: usize, width: usize, labels: &[u8]) -> Self {
        let mut runs: Vec<(u8, usize)> = Vec::new();
        for &l in labels {
            match runs.last_mut() {
                Some((label, count)) if *label == l => *count += 1,
                _ => runs.push((l, 1)),
            }
        }
        Self { height, width, runs }
    }

    pub fn decode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for &(label, count) in &self.runs {
            out.extend(std::iter::repeat_n(label, count));
        }
        if out.len() != self.height * self.width {
            return Err(Error::Input(format!(
                "label runs cover {} pixels, grid has {}",
                out.len(),
                self.height * self.width
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mask_round_trip(mask in proptest::collection::vec(any::<bool>(), 0..200)) {
            let rle = MaskRle::encode(1, mask.len(), &mask);
            prop_assert_eq!(rle.decode().unwrap(), mask);
        }

        #[test]
        fn label_round_trip(labels in proptest::collection::vec(1u8..=6, 0..200)) {
            let rle = LabelRle::encode(1, labels.len(), &labels);
            prop_assert_eq!(rle.decode().unwrap(), labels);
        }
    }

    #[test]
    fn malformed_runs_rejected() {
        let bad = MaskRle { height: 2, width: 2, runs: vec![(3, 2)] };
        assert!(bad.decode().is_err());
        let overlap = MaskRle { height: 2, width: 2, runs: vec![(0, 2), (1, 1)] };
        assert!(overlap.decode().is_err());
        let short = LabelRle { height: 2, width: 2, runs: vec![(1, 3)] };
        assert!(short.decode().is_err());
    }
}
