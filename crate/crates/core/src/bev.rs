//! Network input parameterization: the two-bin LiDAR BEV histogram, the
//! cropped and normalized camera image, and goal registration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::geometry::Pose2;
use crate::sim::RgbImage;
use crate::tensor::{Real, Tensor};

/// Height above the ground plane separating the two histogram bins (m).
pub const GROUND_THRESHOLD: f64 = 0.2;
/// Per-cell saturation count before scaling to `[0, 1]`.
pub const HISTOGRAM_CAP: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum BevError {
    #[error("grid extent {extent} m is not a multiple of cell size {cell} m")]
    Extent { extent: f64, cell: f64 },
    #[error("raw image {width}x{height} is smaller than the {target}x{target} crop")]
    ImageTooSmall {
        width: usize,
        height: usize,
        target: usize,
    },
}

/// Metric extent and resolution of the BEV grid in the ego frame
/// (+x forward, +y left).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub forward_m: f64,
    pub lateral_m: f64,
    pub cell_m: f64,
}

impl GridSpec {
    /// 32 m × 32 m at 0.125 m: 256 × 256 cells.
    pub fn paper() -> Self {
        Self {
            forward_m: 32.0,
            lateral_m: 16.0,
            cell_m: 0.125,
        }
    }

    /// 32 m × 32 m at 0.5 m: 64 × 64 cells.
    pub fn desk() -> Self {
        Self {
            cell_m: 0.5,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), BevError> {
        for extent in [self.forward_m, 2.0 * self.lateral_m] {
            let ratio = extent / self.cell_m;
            if !(ratio.is_finite() && ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
                return Err(BevError::Extent {
                    extent,
                    cell: self.cell_m,
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        (self.forward_m / self.cell_m).round() as usize
    }

    pub fn cols(&self) -> usize {
        (2.0 * self.lateral_m / self.cell_m).round() as usize
    }

    /// Cell `(row, col)` of an ego-frame ground position, half-open binning.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= 0.0 && x < self.forward_m && y >= -self.lateral_m && y < self.lateral_m) {
            return None;
        }
        let row = ((x / self.cell_m).floor() as usize).min(self.rows() - 1);
        let col = (((y + self.lateral_m) / self.cell_m).floor() as usize).min(self.cols() - 1);
        Some((row, col))
    }

    /// The same metric grid at a coarser `rows × cols` resolution.
    pub fn with_resolution(&self, rows: usize) -> Self {
        Self {
            cell_m: self.forward_m / rows as f64,
            ..*self
        }
    }
}

/// Point counts per cell; channel 0 holds returns on or below the ground
/// threshold, channel 1 those above.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevHistogram {
    rows: usize,
    cols: usize,
    counts: Vec<u32>,
}

impl BevHistogram {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 3] {
        [2, self.rows, self.cols]
    }

    pub fn count(&self, channel: usize, row: usize, col: usize) -> u32 {
        self.counts[(channel * self.rows + row) * self.cols + col]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// `min(count, cap) / cap` as a `2 × rows × cols` tensor.
    pub fn to_tensor<T: Real>(&self, cap: u32) -> Tensor<T> {
        let inv = 1.0 / cap as f64;
        Tensor::new(
            &self.shape(),
            self.counts
                .iter()
                .map(|&c| T::of(c.min(cap) as f64 * inv))
                .collect(),
        )
        .expect("histogram shape is valid")
    }
}

/// Bins ego-frame points into the two-channel BEV histogram.
pub fn rasterize_bev(points: &[[f32; 3]], spec: &GridSpec, ground_threshold: f64) -> BevHistogram {
    let (rows, cols) = (spec.rows(), spec.cols());
    let mut counts = vec![0u32; 2 * rows * cols];
    for p in points {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if let Some((r, c)) = spec.cell_of(x, y) {
            let ch = usize::from(z > ground_threshold);
            counts[(ch * rows + r) * cols + c] += 1;
        }
    }
    BevHistogram { rows, cols, counts }
}

/// Per-channel normalization constants applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageNorm {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Top-left corner `(row, col)` of a centered `target × target` crop.
pub fn crop_offsets(height: usize, width: usize, target: usize) -> (usize, usize) {
    ((height - target) / 2, (width - target) / 2)
}

/// Center-crops to `target × target`, scales to `[0, 1]` and normalizes.
pub fn prepare_image<T: Real>(
    raw: &RgbImage,
    target: usize,
    norm: &ImageNorm,
) -> Result<Tensor<T>, BevError> {
    if raw.width < target || raw.height < target {
        return Err(BevError::ImageTooSmall {
            width: raw.width,
            height: raw.height,
            target,
        });
    }
    let (top, left) = crop_offsets(raw.height, raw.width, target);
    let mut data = Vec::with_capacity(3 * target * target);
    for c in 0..3 {
        let (mean, std) = (norm.mean[c], norm.std[c]);
        for y in 0..target {
            for x in 0..target {
                let v = raw.get(c, top + y, left + x) as f64 / 255.0;
                data.push(T::of((v - mean) / std));
            }
        }
    }
    Ok(Tensor::new(&[3, target, target], data).expect("crop shape is valid"))
}

/// World-frame point into the ego frame: translate, then rotate by −heading.
pub fn register_goal(goal_world: [f64; 2], ego: &Pose2) -> [f64; 2] {
    let (dx, dy) = (goal_world[0] - ego.x, goal_world[1] - ego.y);
    let (s, c) = ego.heading.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}
