//! Stereo samples: random-dot stereogram synthesis, file formats and
//! manifest loading.

mod manifest;
mod pfm;
mod pnm;
mod rds;

pub use manifest::{load_dataset, read_manifest, read_map_list, write_dataset, write_manifest, ManifestEntry};
pub use pfm::{read_disparity_pfm, read_pfm, write_disparity_pfm, write_pfm};
pub use pnm::{read_pnm, write_pnm};
pub use rds::{gen_rds, gen_rds_sample, RdsConfig, ShapeKind};

use crate::error::{Error, Result};
use crate::maps::DisparityMap;
use crate::tensor::{Scalar, Tensor};

/// A rectified pair with left-view ground truth. Images are (1, C, H, W)
/// with intensities in [0, 1]; the ground-truth validity mask excludes
/// occluded and out-of-range pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt: DisparityMap,
}

impl StereoSample {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>, gt: DisparityMap) -> Result<Self> {
        let (ls, rs) = (left.shape(), right.shape());
        if ls != rs {
            return Err(Error::shape(format!("left {ls} vs right {rs}")));
        }
        if ls.n() != 1 || (ls.h(), ls.w()) != (gt.height(), gt.width()) {
            return Err(Error::shape(format!(
                "image {ls} vs ground truth {}x{}",
                gt.height(),
                gt.width()
            )));
        }
        Ok(StereoSample { left, right, gt })
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }
}

/// Maps intensities in [0, 1] to [-1, 1] per channel, converting precision.
pub fn normalize_image<S: Scalar>(image: &Tensor<f32>) -> Tensor<S> {
    let t: Tensor<S> = image.cast();
    let half = S::from_f64(0.5);
    t.map(|v| (v - half) / half)
}
