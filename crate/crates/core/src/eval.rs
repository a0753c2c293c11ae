//! Point-in-mask localization metrics and per-station multilabel metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::KeypointSet;

/// Number of anatomical stations in a station map.
pub const STATIONS: usize = 6;

/// Row-major binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} mask values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a mask from rows of `'#'` (set) and any other character (clear).
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn overlap(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    /// Flood fill over 8-neighbors starting at `start`; marks `visited` and
    /// returns the filled pixels.
    fn flood(&self, start: usize, visited: &mut [bool]) -> Vec<usize> {
        let mut pixels = vec![start];
        visited[start] = true;
        let mut head = 0;
        while head < pixels.len() {
            let cur = pixels[head];
            head += 1;
            let (r, c) = (cur / self.width, cur % self.width);
            for nr in r.saturating_sub(1)..=(r + 1).min(self.height - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(self.width - 1) {
                    let n = nr * self.width + nc;
                    if self.data[n] && !visited[n] {
                        visited[n] = true;
                        pixels.push(n);
                    }
                }
            }
        }
        pixels
    }

    fn from_pixels(&self, pixels: &[usize]) -> Self {
        let mut out = Self::empty(self.height, self.width);
        for &p in pixels {
            out.data[p] = true;
        }
        out
    }

    /// The 8-connected component through `(row, col)`, or an empty mask if that pixel is clear.
    pub fn component_containing(&self, row: usize, col: usize) -> Self {
        let start = row * self.width + col;
        if !self.data[start] {
            return Self::empty(self.height, self.width);
        }
        let mut visited = vec![false; self.data.len()];
        self.from_pixels(&self.flood(start, &mut visited))
    }

    pub fn components(&self) -> Vec<BinaryMask> {
        connected_components(self)
    }
}

/// 8-connected components, ordered by their first pixel in row-major order.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let mut visited = vec![false; mask.data.len()];
    let mut out = Vec::new();
    for idx in 0..mask.data.len() {
        if mask.data[idx] && !visited[idx] {
            let pixels = mask.flood(idx, &mut visited);
            out.push(mask.from_pixels(&pixels));
        }
    }
    out
}

/// Per-pixel station labels in `1..=6`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl StationMap {
    /// Rejects labels outside `1..=6` and maps where a station is missing.
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} station labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        let mut seen = [false; STATIONS];
        for &l in &labels {
            if l == 0 || l as usize > STATIONS {
                return Err(Error::Input(format!("station label {l} outside 1..={STATIONS}")));
            }
            seen[l as usize - 1] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Input(format!("station map has no pixels for station {}", missing + 1)));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }
}

/// `num / den`, or the empty-denominator convention: 1 when the complementary
/// error count is also zero, else 0.
fn ratio(num: usize, den: usize, complementary_errors: usize) -> f64 {
    if den == 0 {
        if complementary_errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 with the raw counts they came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp, fn_);
        let recall = ratio(tp, tp + fn_, fp);
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp,
            fn_,
        }
    }

    pub fn prf(&self) -> (f64, f64, f64) {
        (self.precision, self.recall, self.f1)
    }
}

/// Points inside any instance mask are true positives, points outside all masks
/// false positives, and masks without a point false negatives.
pub fn point_localization_metrics(pred: &KeypointSet, instances: &[BinaryMask]) -> Result<Score> {
    let Some(first) = instances.first() else {
        return Ok(Score::from_counts(0, pred.len(), 0));
    };
    let (h, w) = (first.height, first.width);
    if instances.iter().any(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::Dimension("instance masks differ in size".into()));
    }
    pred.check_bounds(h, w)?;

    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); h * w];
    for (i, mask) in instances.iter().enumerate() {
        for (p, _) in mask.data.iter().enumerate().filter(|(_, &b)| b) {
            owners[p].push(i);
        }
    }
    let mut covered = vec![false; instances.len()];
    let (mut tp, mut fp) = (0, 0);
    for p in pred {
        let ids = &owners[p.row * w + p.col];
        if ids.is_empty() {
            fp += 1;
        } else {
            tp += 1;
            ids.iter().for_each(|&i| covered[i] = true);
        }
    }
    let fn_ = covered.iter().filter(|c| !**c).count();
    Ok(Score::from_counts(tp, fp, fn_))
}

/// Unweighted mean of per-image (precision, recall, F1).
pub fn aggregate_localization(per_image: &[(f64, f64, f64)]) -> Result<(f64, f64, f64)> {
    if per_image.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    let n = per_image.len() as f64;
    let sum = per_image
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
    Ok((sum.0 / n, sum.1 / n, sum.2 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationMetrics {
    pub per_station: Vec<Score>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A station is predicted present in an image iff some predicted point lies in
/// its region; each station is then scored as a binary task over images, and
/// the six station scores are averaged.
pub fn multilabel_station_metrics(
    predictions: &[KeypointSet],
    station_maps: &[StationMap],
    gt_presence: &[[bool; STATIONS]],
) -> Result<StationMetrics> {
    if predictions.len() != station_maps.len() || predictions.len() != gt_presence.len() {
        return Err(Error::Dimension(format!(
            "{} predictions, {} station maps, {} presence vectors",
            predictions.len(),
            station_maps.len(),
            gt_presence.len()
        )));
    }
    let mut counts = [(0usize, 0usize, 0usize); STATIONS];
    for ((pred, map), gt) in predictions.iter().zip(station_maps).zip(gt_presence) {
        // re-validate: maps built without `StationMap::new` cannot exist, but a
        // mismatched grid size can
        pred.check_bounds(map.height, map.width)?;
        let mut predicted = [false; STATIONS];
        for p in pred {
            predicted[map.get(p.row, p.col) as usize - 1] = true;
        }
        for s in 0..STATIONS {
            match (predicted[s], gt[s]) {
                (true, true) => counts[s].0 += 1,
                (true, false) => counts[s].1 += 1,
                (false, true) => counts[s].2 += 1,
                (false, false) => {}
            }
        }
    }
    let per_station: Vec<Score> = counts.iter().map(|&(tp, fp, fn_)| Score::from_counts(tp, fp, fn_)).collect();
    let n = STATIONS as f64;
    Ok(StationMetrics {
        precision: per_station.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: per_station.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: per_station.iter().map(|s| s.f1).sum::<f64>() / n,
        per_station,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: usize,
    pub predicted: usize,
    #[serde(flatten)]
    pub score: Score,
}

/// Both protocols over one evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub localization: Summary,
    pub stations: StationMetrics,
}

/// Ground truth of one image as seen by the metrics.
pub struct GroundTruth<'a> {
    pub instances: &'a [BinaryMask],
    pub station_map: &'a StationMap,
    pub presence: [bool; STATIONS],
}

impl MetricsReport {
    pub fn compute(predictions: &[KeypointSet], truth: &[GroundTruth<'_>]) -> Result<Self> {
        if predictions.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} images",
                predictions.len(),
                truth.len()
            )));
        }
        let per_image = predictions
            .iter()
            .zip(truth)
            .enumerate()
            .map(|(image, (pred, gt))| {
                Ok(ImageMetrics {
                    image,
                    predicted: pred.len(),
                    score: point_localization_metrics(pred, gt.instances)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let prf: Vec<_> = per_image.iter().map(|m| m.score.prf()).collect();
        let (precision, recall, f1) = aggregate_localization(&prf)?;
        let maps: Vec<StationMap> = truth.iter().map(|t| t.station_map.clone()).collect();
        let presence: Vec<_> = truth.iter().map(|t| t.presence).collect();
        let stations = multilabel_station_metrics(predictions, &maps, &presence)?;
        Ok(Self {
            per_image,
            localization: Summary { precision, recall, f1 },
            stations,
        })
    }

    /// Per-image rows, per-station rows, then the two summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,id,precision,recall,f1,tp,fp,fn,predicted\n");
        for m in &self.per_image {
            let s = &m.score;
            let _ = writeln!(
                out,
                "image,{},{},{},{},{},{},{},{}",
                m.image, s.precision, s.recall, s.f1, s.tp, s.fp, s.fn_, m.predicted
            );
        }
        for (i, s) in self.stations.per_station.iter().enumerate() {
            let _ = writeln!(
                out,
                "station,{},{},{},{},{},{},{},",
                i + 1,
                s.precision,
                s.recall,
                s.f1,
                s.tp,
                s.fp,
                s.fn_
            );
        }
        let l = &self.localization;
        let _ = writeln!(out, "summary,localization,{},{},{},,,,", l.precision, l.recall, l.f1);
        let st = &self.stations;
        let _ = writeln!(out, "summary,multilabel,{},{},{},,,,", st.precision, st.recall, st.f1);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
