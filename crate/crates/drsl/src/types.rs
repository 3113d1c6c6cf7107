//! Shared tensor and label types.

use ndarray::{Array2, Array3};

use crate::error::{DrslError, Result};

/// Label value that marks a pixel as excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Which side of the domain gap a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// A channel-first RGB image with values in `[0, 1]`.
///
/// Shape is `[3, height, width]`.
#[derive(Debug, Clone)]
pub struct ImageTensor(pub Array3<f32>);

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != 3 {
            return Err(DrslError::Shape(format!(
                "image tensor must have 3 channels, got {c}"
            )));
        }
        Ok(ImageTensor(data))
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }
}

/// A dense per-pixel class map. `IGNORE` marks excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap(pub Array2<u8>);

impl LabelMap {
    /// Validates that every non-ignored label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &v in self.0.iter() {
            if v != IGNORE && (v as usize) >= num_classes {
                return Err(DrslError::Shape(format!(
                    "label {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    /// Per-class pixel counts over non-ignored pixels.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for &v in self.0.iter() {
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn histogram_skips_ignored_pixels() {
        let m = LabelMap(arr2(&[[0, 1], [IGNORE, 1]]));
        assert_eq!(m.class_histogram(3), vec![1, 2, 0]);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let m = LabelMap(arr2(&[[0, 4]]));
        assert!(m.validate(3).is_err());
        assert!(m.validate(5).is_ok());
        let ignored = LabelMap(arr2(&[[IGNORE]]));
        assert!(ignored.validate(1).is_ok());
    }
}
