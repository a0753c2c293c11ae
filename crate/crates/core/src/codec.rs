//! Gaussian target encoding and peak decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, HeatmapRole, Keypoint, KeypointSet};
use crate::scalar::{sigmoid, Scalar};

/// How overlapping Gaussians combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// `min(sum, 1)`, keeps the target a probability map.
    Clamp,
    /// Plain sum of the per-point Gaussians.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecParams {
    /// Gaussian spread in pixels: `exp(-d^2 / delta^2)`.
    pub delta: f64,
    /// Contributions farther than this are exactly zero.
    pub truncation_radius: f64,
    pub overlap_mode: OverlapMode,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self::with_delta(2.0)
    }
}

impl CodecParams {
    /// `delta` with the default truncation at three spreads and clamped overlap.
    pub fn with_delta(delta: f64) -> Self {
        Self {
            delta,
            truncation_radius: 3.0 * delta,
            overlap_mode: OverlapMode::Clamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.truncation_radius.is_finite() && self.truncation_radius >= self.delta) {
            return Err(Error::Config(format!(
                "truncation_radius ({}) must be finite and >= delta ({})",
                self.truncation_radius, self.delta
            )));
        }
        Ok(())
    }
}

/// Activation applied to a heatmap before peak picking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    /// Side of the square NMS neighborhood; odd.
    pub window: usize,
    /// Maximum number of returned points.
    pub k: usize,
    /// Minimum activated score.
    pub t: f64,
    pub activation: Activation,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            window: 5,
            k: 30,
            t: 0.3,
            activation: Activation::Sigmoid,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "NMS window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Config(format!("threshold t must lie in [0, 1], got {}", self.t)));
        }
        Ok(())
    }
}

/// Renders a Gaussian bump at every keypoint and combines them.
pub fn encode_target<T: Scalar>(
    keypoints: &KeypointSet,
    height: usize,
    width: usize,
    params: &CodecParams,
) -> Result<Heatmap<T>> {
    params.validate()?;
    keypoints.check_bounds(height, width)?;

    // Summation order is fixed by position so the result does not depend on
    // the order of the input list.
    let mut centers = keypoints.positions();
    centers.sort_unstable();

    let inv_delta2 = 1.0 / (params.delta * params.delta);
    let radius2 = params.truncation_radius * params.truncation_radius;
    let reach = params.truncation_radius.floor() as usize;

    let mut heat = Heatmap::<T>::zeros(height, width, HeatmapRole::Target);
    for (cr, cc) in centers {
        let r0 = cr.saturating_sub(reach);
        let r1 = (cr + reach).min(height - 1);
        let c0 = cc.saturating_sub(reach);
        let c1 = (cc + reach).min(width - 1);
        for r in r0..=r1 {
            let dr = r as f64 - cr as f64;
            for c in c0..=c1 {
                let dc = c as f64 - cc as f64;
                let d2 = dr * dr + dc * dc;
                if d2 <= radius2 {
                    let add = T::from_f64_lossy((-d2 * inv_delta2).exp());
                    let v = heat.get(r, c) + add;
                    heat.set(r, c, v);
                }
            }
        }
    }
    if params.overlap_mode == OverlapMode::Clamp {
        heat.values_mut().iter_mut().for_each(|v| *v = v.min(T::one()));
    }
    Ok(heat)
}

/// Sliding maximum over a `window x window` neighborhood, clipped at borders.
fn window_max<T: Scalar>(h: &Heatmap<T>, window: usize) -> Vec<T> {
    let (height, width) = h.shape();
    let half = window / 2;
    let src = h.values();
    let mut rows = vec![T::zero(); src.len()];
    for r in 0..height {
        let line = &src[r * width..(r + 1) * width];
        for c in 0..width {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(width - 1);
            rows[r * width + c] = line[lo..=hi].iter().copied().fold(T::neg_infinity(), T::max);
        }
    }
    let mut out = vec![T::zero(); src.len()];
    for r in 0..height {
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(height - 1);
        for c in 0..width {
            out[r * width + c] = (lo..=hi)
                .map(|rr| rows[rr * width + c])
                .fold(T::neg_infinity(), T::max);
        }
    }
    out
}

/// Pixels equal to the maximum of their neighborhood, one per plateau.
///
/// A plateau is an 8-connected group of such pixels sharing the same value;
/// only its row-major-first pixel is kept. Output is in row-major order.
pub fn nms_local_maxima<T: Scalar>(h: &Heatmap<T>, window: usize) -> Vec<(Keypoint, T)> {
    let (height, width) = h.shape();
    if h.is_empty() {
        return Vec::new();
    }
    let maxed = window_max(h, window.max(1));
    let values = h.values();
    let is_peak: Vec<bool> = values.iter().zip(&maxed).map(|(v, m)| v == m).collect();

    let mut visited = vec![false; values.len()];
    let mut stack = Vec::new();
    let mut peaks = Vec::new();
    for idx in 0..values.len() {
        if !is_peak[idx] || visited[idx] {
            continue;
        }
        let value = values[idx];
        peaks.push((Keypoint::new(idx / width, idx % width), value));
        visited[idx] = true;
        stack.push(idx);
        while let Some(cur) = stack.pop() {
            let (r, c) = (cur / width, cur % width);
            for nr in r.saturating_sub(1)..=(r + 1).min(height - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(width - 1) {
                    let n = nr * width + nc;
                    if !visited[n] && is_peak[n] && values[n] == value {
                        visited[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
    }
    peaks
}

/// Activation, NMS, threshold and top-k.
pub fn decode_points<T: Scalar>(h: &Heatmap<T>, params: &DecodeParams) -> Result<KeypointSet> {
    params.validate()?;
    let activated = match (h.role(), params.activation) {
        (HeatmapRole::Logit, Activation::Sigmoid) => h.map(HeatmapRole::Probability, sigmoid),
        (HeatmapRole::Target | HeatmapRole::Probability, Activation::Identity) => h.clone(),
        (role, act) => {
            return Err(Error::Config(format!(
                "{act:?} activation cannot decode a {role:?} heatmap"
            )))
        }
    };
    let t = T::from_f64_lossy(params.t);
    let mut kept: Vec<(Keypoint, T)> = nms_local_maxima(&activated, params.window)
        .into_iter()
        .filter(|(_, v)| *v >= t)
        .collect();
    // Stable sort keeps row-major order among equal scores.
    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    kept.truncate(params.k);
    KeypointSet::new(
        kept.into_iter()
            .map(|(p, v)| Keypoint::scored(p.row, p.col, v.to_f64_lossy()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_peaks() -> Heatmap<f64> {
        let mut h = Heatmap::zeros(32, 32, HeatmapRole::Probability);
        h.set(5, 5, 0.9);
        h.set(20, 20, 0.4);
        h
    }

    /// Exhaustive check: every pixel against every pixel of its clipped window.
    fn brute_force_maxima(h: &Heatmap<f64>, window: usize) -> Vec<(usize, usize)> {
        let half = window as i64 / 2;
        let mut out = Vec::new();
        for r in 0..h.height() as i64 {
            for c in 0..h.width() as i64 {
                let v = h.get(r as usize, c as usize);
                let mut is_max = true;
                for dr in -half..=half {
                    for dc in -half..=half {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < h.height() as i64 && cc < h.width() as i64 {
                            if h.get(rr as usize, cc as usize) > v {
                                is_max = false;
                            }
                        }
                    }
                }
                if is_max && v > 0.0 {
                    out.push((r as usize, c as usize));
                }
            }
        }
        out
    }

    #[test]
    fn gaussian_values() {
        let set = KeypointSet::from_positions([(10, 10)]).unwrap();
        let h: Heatmap<f64> = encode_target(&set, 32, 32, &CodecParams::with_delta(2.0)).unwrap();
        assert_eq!(h.get(10, 10), 1.0);
        assert!((h.get(10, 12) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((h.get(10, 12) - 0.367879).abs() < 1e-6);
        // exactly zero past the truncation radius (6 px)
        assert!(h.get(10, 16) > 0.0);
        assert_eq!(h.get(10, 17), 0.0);
        assert_eq!(h.get(15, 15), 0.0); // d = 7.07
    }

    #[test]
    fn clamped_overlap() {
        let set = KeypointSet::from_positions([(10, 10), (10, 12)]).unwrap();
        let clamp: Heatmap<f64> = encode_target(&set, 32, 32, &CodecParams::with_delta(2.0)).unwrap();
        assert_eq!(clamp.get(10, 11), 1.0);
        let mut params = CodecParams::with_delta(2.0);
        params.overlap_mode = OverlapMode::Sum;
        let sum: Heatmap<f64> = encode_target(&set, 32, 32, &params).unwrap();
        assert!((sum.get(10, 11) - 1.557602).abs() < 1e-6);
        assert!((sum.get(10, 11) - 2.0 * (-0.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn empty_set_is_all_zero() {
        let h: Heatmap<f64> =
            encode_target(&KeypointSet::empty(), 8, 8, &CodecParams::default()).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_out_of_bounds_point() {
        let set = KeypointSet::from_positions([(1, 1), (8, 3)]).unwrap();
        let err = encode_target::<f64>(&set, 8, 8, &CodecParams::default()).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { row: 8, col: 3, .. }));
    }

    #[test]
    fn invalid_codec_params() {
        let mut p = CodecParams::with_delta(2.0);
        p.truncation_radius = 1.0;
        assert!(p.validate().is_err());
        assert!(CodecParams::with_delta(0.0).validate().is_err());
    }

    #[test]
    fn unique_maximum() {
        let mut h = Heatmap::filled(5, 5, 0.1, HeatmapRole::Probability);
        h.set(2, 2, 0.9);
        let peaks = nms_local_maxima(&h, 5);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].0.position(), (2, 2));
        assert_eq!(peaks[0].1, 0.9);
    }

    #[test]
    fn flat_plateau_keeps_first_pixel() {
        let h = Heatmap::filled(4, 4, 0.7, HeatmapRole::Probability);
        let peaks = nms_local_maxima(&h, 5);
        assert_eq!(peaks, vec![(Keypoint::new(0, 0), 0.7)]);
    }

    #[test]
    fn isolated_peaks_match_exhaustive_check() {
        let h = two_peaks();
        let nonzero: Vec<_> = nms_local_maxima(&h, 5)
            .into_iter()
            .filter(|(_, v)| *v > 0.0)
            .map(|(p, _)| p.position())
            .collect();
        assert_eq!(nonzero, brute_force_maxima(&h, 5));
        assert_eq!(nonzero, vec![(5, 5), (20, 20)]);
    }

    #[test]
    fn decode_threshold_and_top_k() {
        let h = two_peaks();
        let mut p = DecodeParams {
            window: 5,
            k: 30,
            t: 0.3,
            activation: Activation::Identity,
        };
        let got = decode_points(&h, &p).unwrap();
        assert_eq!(got.positions(), vec![(5, 5), (20, 20)]);
        assert_eq!(got.points()[0].score, Some(0.9));

        p.t = 0.5;
        assert_eq!(decode_points(&h, &p).unwrap().positions(), vec![(5, 5)]);

        p.t = 0.3;
        p.k = 1;
        assert_eq!(decode_points(&h, &p).unwrap().positions(), vec![(5, 5)]);
    }

    #[test]
    fn decode_ties_in_row_major_order() {
        let mut h = Heatmap::zeros(20, 20, HeatmapRole::Probability);
        h.set(15, 2, 0.6);
        h.set(3, 12, 0.6);
        h.set(9, 9, 0.8);
        let p = DecodeParams {
            activation: Activation::Identity,
            ..DecodeParams::default()
        };
        assert_eq!(
            decode_points(&h, &p).unwrap().positions(),
            vec![(9, 9), (3, 12), (15, 2)]
        );
    }

    #[test]
    fn decode_role_activation_mismatch() {
        let h = two_peaks();
        let p = DecodeParams::default(); // sigmoid
        assert!(matches!(decode_points(&h, &p), Err(Error::Config(_))));
        let logits = h.with_role(HeatmapRole::Logit);
        let p = DecodeParams {
            activation: Activation::Identity,
            ..DecodeParams::default()
        };
        assert!(matches!(decode_points(&logits, &p), Err(Error::Config(_))));
    }

    #[test]
    fn decode_logits_through_sigmoid() {
        let mut h = Heatmap::filled(16, 16, -6.0, HeatmapRole::Logit);
        h.set(8, 8, 2.0);
        let got = decode_points(&h, &DecodeParams::default()).unwrap();
        assert_eq!(got.positions(), vec![(8, 8)]);
        assert!((got.points()[0].score.unwrap() - sigmoid(2.0f64)).abs() < 1e-15);
    }
}
