//! Point cloud container and geometry error type.

use std::fmt;

use crate::numerics::Mat;

/// Errors from geometry kernels and point-cloud I/O.
#[derive(Clone, Debug)]
pub enum GeometryError {
    EmptyCloud,
    NonFinitePosition { index: usize },
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    SampleCountOutOfRange { k: usize, n: usize },
    EmptySources,
    InvalidNeighborCount,
    NonPositiveCellSize { axis: usize, value: f64 },
    EmptyGrid,
    InvalidBox { axis: usize },
    InvalidResolution,
    Format { line: usize, message: String },
    Io { path: String, message: String },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::EmptyCloud => write!(f, "point cloud must contain at least one point"),
            GeometryError::NonFinitePosition { index } => {
                write!(f, "non-finite coordinate at point {index}")
            }
            GeometryError::LengthMismatch { what, expected, got } => {
                write!(f, "{what} length {got} does not match point count {expected}")
            }
            GeometryError::SampleCountOutOfRange { k, n } => {
                write!(f, "cannot sample {k} points from a cloud of {n}")
            }
            GeometryError::EmptySources => write!(f, "neighbor search needs at least one source"),
            GeometryError::InvalidNeighborCount => write!(f, "neighbor count must be at least 1"),
            GeometryError::NonPositiveCellSize { axis, value } => {
                write!(f, "cell size must be positive, axis {axis} is {value}")
            }
            GeometryError::EmptyGrid => write!(f, "voxel grid has no occupied cells"),
            GeometryError::InvalidBox { axis } => {
                write!(f, "box min must be below box max on axis {axis}")
            }
            GeometryError::InvalidResolution => write!(f, "grid resolution must be at least 1"),
            GeometryError::Format { line, message } => {
                write!(f, "format error at line {line}: {message}")
            }
            GeometryError::Io { path, message } => write!(f, "io error on '{path}': {message}"),
        }
    }
}

impl std::error::Error for GeometryError {}

/// N points with 3D coordinates plus optional per-point attributes and
/// class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    attributes: Option<Mat>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        attributes: Option<Mat>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self, GeometryError> {
        if positions.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::NonFinitePosition { index: i });
            }
        }
        if let Some(a) = &attributes {
            if a.rows() != positions.len() {
                return Err(GeometryError::LengthMismatch {
                    what: "attributes",
                    expected: positions.len(),
                    got: a.rows(),
                });
            }
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(GeometryError::LengthMismatch {
                    what: "labels",
                    expected: positions.len(),
                    got: l.len(),
                });
            }
        }
        Ok(PointCloud {
            positions,
            attributes,
            labels,
        })
    }

    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        Self::new(positions, None, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn attributes(&self) -> Option<&Mat> {
        self.attributes.as_ref()
    }

    /// Attribute width, 0 when the cloud has none.
    pub fn attr_width(&self) -> usize {
        self.attributes.as_ref().map_or(0, |a| a.cols())
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Componentwise minimum corner of the bounding box.
    pub fn min_corner(&self) -> [f64; 3] {
        fold_corner(&self.positions, f64::min)
    }

    /// Componentwise maximum corner of the bounding box.
    pub fn max_corner(&self) -> [f64; 3] {
        fold_corner(&self.positions, f64::max)
    }
}

fn fold_corner(positions: &[[f64; 3]], pick: fn(f64, f64) -> f64) -> [f64; 3] {
    let mut out = positions[0];
    for p in &positions[1..] {
        for a in 0..3 {
            out[a] = pick(out[a], p[a]);
        }
    }
    out
}

/// Squared Euclidean distance between two points.
#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(
            PointCloud::from_positions(vec![]),
            Err(GeometryError::EmptyCloud)
        ));
        assert!(matches!(
            PointCloud::from_positions(vec![[0.0, f64::NAN, 0.0]]),
            Err(GeometryError::NonFinitePosition { index: 0 })
        ));
    }

    #[test]
    fn rejects_mismatched_side_data() {
        let pos = vec![[0.0; 3], [1.0; 3]];
        assert!(PointCloud::new(pos.clone(), None, Some(vec![0])).is_err());
        assert!(PointCloud::new(pos, Some(Mat::zeros(3, 2)), None).is_err());
    }

    #[test]
    fn bounding_corners() {
        let pc = PointCloud::from_positions(vec![[0.0, 5.0, -1.0], [2.0, -3.0, 4.0]]).unwrap();
        assert_eq!(pc.min_corner(), [0.0, -3.0, -1.0]);
        assert_eq!(pc.max_corner(), [2.0, 5.0, 4.0]);
    }
}
