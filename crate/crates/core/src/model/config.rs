use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the desk-scale one-stage detector.
///
/// The backbone is a stack of stride-2 3x3 convolutions, one per entry of
/// `backbone_channels`. Every backbone output whose stride is at least
/// `grid_stride` feeds the FPN-style neck; the head predicts on the neck
/// level at `grid_stride`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub backbone_channels: Vec<usize>,
    pub neck_channels: usize,
    pub head_depth: usize,
    pub grid_stride: usize,
    /// When false (the default) the backbone is update-exempt.
    pub train_backbone: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            image_size: (64, 64),
            backbone_channels: vec![16, 32, 48, 64, 64],
            neck_channels: 32,
            head_depth: 2,
            grid_stride: 8,
            train_backbone: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("image_size dimensions must be positive".into()));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config(
                "backbone_channels must be a non-empty list of positive integers".into(),
            ));
        }
        if self.neck_channels == 0 {
            return Err(Error::Config("neck_channels must be positive".into()));
        }
        if self.head_depth == 0 {
            return Err(Error::Config("head_depth must be at least 1".into()));
        }
        if self.grid_stride < 2 || !self.grid_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid_stride must be a power of two >= 2, got {}",
                self.grid_stride
            )));
        }
        if h % self.grid_stride != 0 || w % self.grid_stride != 0 {
            return Err(Error::Config(format!(
                "image_size {h}x{w} is not divisible by grid_stride {}",
                self.grid_stride
            )));
        }
        let deepest = 1usize << self.backbone_channels.len();
        if self.grid_stride > deepest {
            return Err(Error::Config(format!(
                "grid_stride {} exceeds the deepest backbone stride {deepest}",
                self.grid_stride
            )));
        }
        if h % deepest != 0 || w % deepest != 0 {
            return Err(Error::Config(format!(
                "image_size {h}x{w} must be divisible by the deepest backbone stride {deepest}"
            )));
        }
        Ok(())
    }

    /// `(rows, cols)` of the prediction grid.
    pub fn grid_size(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.grid_stride,
            self.image_size.1 / self.grid_stride,
        )
    }

    /// Index of the first backbone stage feeding the neck.
    pub(crate) fn first_neck_level(&self) -> usize {
        self.grid_stride.trailing_zeros() as usize - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_with_8x8_grid() {
        let cfg = DetectorConfig {
            num_classes: 4,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.grid_size(), (8, 8));
        assert_eq!(cfg.first_neck_level(), 2);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let bad = [
            DetectorConfig {
                image_size: (60, 64),
                ..Default::default()
            },
            DetectorConfig {
                grid_stride: 6,
                ..Default::default()
            },
            DetectorConfig {
                head_depth: 0,
                ..Default::default()
            },
            DetectorConfig {
                backbone_channels: vec![8, 0],
                ..Default::default()
            },
            DetectorConfig {
                backbone_channels: vec![8, 8],
                grid_stride: 8,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
