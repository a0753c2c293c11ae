use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A pixel location, optionally carrying a detection score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Keypoint {
    pub fn new(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            score: None,
        }
    }

    pub fn scored(row: usize, col: usize, score: f64) -> Self {
        Self {
            row,
            col,
            score: Some(score),
        }
    }

    pub fn position(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::OutOfBounds {
                row: self.row,
                col: self.col,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Ordered list of keypoints with unique positions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Keypoint>", into = "Vec<Keypoint>")]
pub struct KeypointSet {
    points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(p.position()) {
                return Err(Error::Input(format!(
                    "duplicate keypoint at ({}, {})",
                    p.row, p.col
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn from_positions<I: IntoIterator<Item = (usize, usize)>>(positions: I) -> Result<Self> {
        Self::new(positions.into_iter().map(|(r, c)| Keypoint::new(r, c)).collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Keypoint] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keypoint> {
        self.points.iter()
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.points.iter().map(Keypoint::position).collect()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        self.points.iter().try_for_each(|p| p.check_bounds(height, width))
    }
}

impl TryFrom<Vec<Keypoint>> for KeypointSet {
    type Error = Error;

    fn try_from(points: Vec<Keypoint>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<KeypointSet> for Vec<Keypoint> {
    fn from(set: KeypointSet) -> Self {
        set.points
    }
}

impl<'a> IntoIterator for &'a KeypointSet {
    type Item = &'a Keypoint;
    type IntoIter = std::slice::Iter<'a, Keypoint>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// What the values of a [`Heatmap`] mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapRole {
    /// Encoded ground truth, values in `[0, 1]` (may exceed 1 only in `sum` overlap mode).
    Target,
    /// Raw network output.
    Logit,
    /// Activated scores in `[0, 1]`.
    Probability,
}

/// Row-major 2D grid of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    role: HeatmapRole,
}

impl<T: Scalar> Heatmap<T> {
    pub fn zeros(height: usize, width: usize, role: HeatmapRole) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); height * width],
            role,
        }
    }

    pub fn filled(height: usize, width: usize, value: T, role: HeatmapRole) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
            role,
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<T>, role: HeatmapRole) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} heatmap",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            role,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        role: HeatmapRole,
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
            role,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn role(&self) -> HeatmapRole {
        self.role
    }

    pub fn with_role(mut self, role: HeatmapRole) -> Self {
        self.role = role;
        self
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.values[row * self.width + col] = value;
    }

    pub fn map(&self, role: HeatmapRole, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
            role,
        }
    }

    pub fn ensure_same_shape<U: Scalar>(&self, other: &Heatmap<U>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Checks the value range implied by the role.
    pub fn validate(&self) -> Result<()> {
        let bad = match self.role {
            HeatmapRole::Logit => self.values.iter().position(|v| !v.is_finite()),
            HeatmapRole::Target | HeatmapRole::Probability => self
                .values
                .iter()
                .position(|&v| !(v >= T::zero() && v <= T::one())),
        };
        match bad {
            None => Ok(()),
            Some(i) => Err(Error::Input(format!(
                "{:?} heatmap value {} at ({}, {}) is out of range",
                self.role,
                self.values[i],
                i / self.width,
                i % self.width
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Heatmap<U> {
        Heatmap {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            role: self.role,
        }
    }
}
