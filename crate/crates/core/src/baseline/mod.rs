//! Hand-crafted matching costs, winner-take-all disparity, and an analytic
//! estimate of the network's parameters, flops and activation memory.

mod resources;

pub use resources::{conv_flops, estimate_resources, ResourceReport};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::maps::DisparityMap;
use crate::model::{extract_features, ModelConfig, ModelWeights, Net};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    RawIntensity,
    FeatureNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsdConfig {
    /// Half-width of the square patch summed around each pixel.
    pub patch_radius: usize,
    pub feature_source: FeatureSource,
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig {
            patch_radius: 1,
            feature_source: FeatureSource::RawIntensity,
        }
    }
}

/// Sum over the patch around each pixel of `|fl(q) - fr(q - d)|^2`.
///
/// Inputs are (1, C, H, W). Patches are clipped to the image; where
/// `q - d` falls left of the image the right feature reads as zero.
pub fn ssd_cost<S: Scalar>(fl: &Tensor<S>, fr: &Tensor<S>, d: usize, cfg: &SsdConfig) -> Result<Tensor<S>> {
    let s = fl.shape();
    fr.expect_shape(s, "ssd_cost right features")?;
    if s.n() != 1 {
        return Err(Error::shape(format!("ssd_cost expects batch 1, got {s}")));
    }
    let (c, h, w) = (s.c(), s.h(), s.w());
    if d >= w {
        return Err(Error::invalid(format!("disparity {d} outside [0, {w})")));
    }
    let mut sq = vec![S::ZERO; h * w];
    for ch in 0..c {
        let (l, r) = (fl.plane(0, ch), fr.plane(0, ch));
        for y in 0..h {
            for x in 0..w {
                let rv = if x >= d { r[y * w + x - d] } else { S::ZERO };
                let diff = l[y * w + x] - rv;
                sq[y * w + x] += diff * diff;
            }
        }
    }
    let k = cfg.patch_radius;
    let mut out = Tensor::zeros(Shape::new(1, 1, h, w));
    let dst = out.plane_mut(0, 0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::ZERO;
            for yy in y.saturating_sub(k)..(y + k + 1).min(h) {
                for xx in x.saturating_sub(k)..(x + k + 1).min(w) {
                    acc += sq[yy * w + xx];
                }
            }
            dst[y * w + x] = acc;
        }
    }
    Ok(out)
}

/// (1, levels, H, W) stack of [`ssd_cost`] for `d = 0..levels`.
pub fn ssd_volume<S: Scalar>(fl: &Tensor<S>, fr: &Tensor<S>, levels: usize, cfg: &SsdConfig) -> Result<Tensor<S>> {
    let s = fl.shape();
    let mut data = Vec::with_capacity(levels * s.plane());
    for d in 0..levels {
        data.extend_from_slice(ssd_cost(fl, fr, d, cfg)?.data());
    }
    Tensor::from_vec(Shape::new(1, levels, s.h(), s.w()), data)
}

/// Features to compare: the image itself, or the feature net's output
/// (1/3 resolution) under `model`.
pub fn ssd_features<S: Scalar>(
    image: &Tensor<S>,
    source: FeatureSource,
    model: Option<(&ModelConfig, &ModelWeights<S>)>,
) -> Result<Tensor<S>> {
    match (source, model) {
        (FeatureSource::RawIntensity, _) => Ok(image.clone()),
        (FeatureSource::FeatureNet, Some((cfg, weights))) => {
            let mut graph = Eager::new();
            let mut net = Net::inference(&mut graph, cfg, weights);
            let x = net.graph.constant(image.clone());
            Ok((*extract_features(&mut net, &x)?).clone())
        }
        (FeatureSource::FeatureNet, None) => Err(Error::invalid("feature-net SSD needs model weights")),
    }
}

/// Per-pixel argmin over levels; the first (smallest) level wins ties.
pub fn wta_disparity<S: Scalar>(volume: &Tensor<S>) -> Result<DisparityMap> {
    let s = volume.shape();
    if s.n() != 1 || s.c() == 0 {
        return Err(Error::shape(format!("wta expects a (1, L>=1, H, W) volume, got {s}")));
    }
    let p = s.plane();
    let values = (0..p)
        .map(|i| {
            let mut best = 0;
            for d in 1..s.c() {
                if volume.data()[d * p + i] < volume.data()[best * p + i] {
                    best = d;
                }
            }
            best as f32
        })
        .collect();
    DisparityMap::dense(s.h(), s.w(), values)
}
