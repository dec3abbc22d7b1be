//! Domain value types shared across modules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sentinel class id excluding a pixel from losses and metrics.
pub const IGNORE: u8 = 255;

/// H×W integer class ids with an ignore marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {}x{} needs {} entries, got {}",
                height,
                width,
                height * width,
                classes.len()
            )));
        }
        if num_classes == 0 || num_classes > IGNORE as usize {
            return Err(Error::Config(format!("unsupported class count {num_classes}")));
        }
        for &c in &classes {
            if c != IGNORE && (c as usize) >= num_classes {
                return Err(Error::ClassOutOfRange { id: c, classes: num_classes });
            }
        }
        Ok(LabelMap { height, width, classes, num_classes })
    }

    pub fn filled(height: usize, width: usize, class: u8, num_classes: usize) -> Result<Self> {
        Self::new(height, width, vec![class; height * width], num_classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.classes[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, class: u8) {
        debug_assert!(class == IGNORE || (class as usize) < self.num_classes);
        self.classes[h * self.width + w] = class;
    }

    pub fn count_valid(&self) -> usize {
        self.classes.iter().filter(|&&c| c != IGNORE).count()
    }
}

/// H×W×C per-pixel class distribution (generator output).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(pub Tensor);

impl ProbMap {
    /// Wraps a [C,H,W] tensor, checking simplex membership at every pixel.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[0] < 2 {
            return Err(Error::ShapeMismatch(format!(
                "probability map must be [C,H,W] with C >= 2, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let v = tensor.values();
        for p in 0..plane {
            let mut sum = 0.0f64;
            for ch in 0..c {
                let x = v[ch * plane + p];
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Range(format!("probability {x} outside [0,1]")));
                }
                sum += x as f64;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Range(format!("pixel {p} probabilities sum to {sum}")));
            }
        }
        Ok(ProbMap(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// H×W (or 1×1) discriminator confidences, strictly inside (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(pub Tensor);

impl ConfidenceMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "confidence map must be [1,H,W], got {shape:?}"
            )));
        }
        for &v in tensor.values() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Range(format!("confidence {v} not strictly inside (0,1)")));
            }
        }
        Ok(ConfidenceMap(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labelmap_validates_entries() {
        assert!(LabelMap::new(2, 2, vec![0, 1, 2, IGNORE], 3).is_ok());
        assert!(matches!(
            LabelMap::new(2, 2, vec![0, 1, 3, 0], 3),
            Err(Error::ClassOutOfRange { .. })
        ));
        assert!(LabelMap::new(2, 2, vec![0; 3], 3).is_err());
    }

    #[test]
    fn probmap_requires_simplex() {
        let uniform = Tensor::full(vec![4, 2, 2], 0.25);
        assert!(ProbMap::new(uniform).is_ok());
        let bad = Tensor::full(vec![4, 2, 2], 0.3);
        assert!(ProbMap::new(bad).is_err());
    }

    #[test]
    fn confidence_must_be_interior() {
        assert!(ConfidenceMap::new(Tensor::full(vec![1, 2, 2], 0.5)).is_ok());
        assert!(ConfidenceMap::new(Tensor::full(vec![1, 2, 2], 1.0)).is_err());
        assert!(ConfidenceMap::new(Tensor::full(vec![1, 2, 2], 0.0)).is_err());
    }
}
