//! Feature extraction, displacement-invariant cost volume, soft-argmin
//! projection with entropy, and entropy-guided refinement.

mod config;
mod network;
mod weights;

use std::time::{Duration, Instant};

pub use config::{ModelConfig, Profile, SppBranch};
pub use network::{
    build_cost_volume, compute_cost_map, entropy, entropy_scale, extract_features, forward, refine, shift_features,
    soft_argmin, upsample_outputs, CostMode, Net, Outputs, MIN_MATCHING_EXTENT,
};
pub use weights::{all_convs, decoder_channels, feature_convs, matching_convs, refine_convs, ConvSpec, ModelWeights};

use crate::autodiff::{Eager, Graph};
use crate::error::Result;
use crate::maps::{DisparityMap, EntropyMap};
use crate::tensor::{Scalar, Tensor};

/// Wall-clock time per pipeline stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub features: Duration,
    pub cost_volume: Duration,
    pub projection: Duration,
    pub refine: Duration,
}

#[derive(Debug, Clone)]
pub struct Prediction<S> {
    /// (1, D/3, H/3, W/3) matching costs.
    pub volume: Tensor<S>,
    pub coarse: DisparityMap,
    pub refined: DisparityMap,
    pub entropy: EntropyMap,
    pub timings: StageTimings,
}

/// Runs the full pipeline without recording gradients, timing each stage.
pub fn infer<S: Scalar>(
    config: &ModelConfig,
    weights: &ModelWeights<S>,
    left: &Tensor<S>,
    right: &Tensor<S>,
    mode: CostMode,
) -> Result<Prediction<S>> {
    let mut graph = Eager::new();
    let mut net = Net::inference(&mut graph, config, weights);
    let (h, w) = (left.shape().h(), left.shape().w());
    if left.shape() != right.shape() {
        return Err(crate::Error::shape(format!(
            "left image {} vs right image {}",
            left.shape(),
            right.shape()
        )));
    }
    let mut timings = StageTimings::default();
    let l = net.graph.constant(left.clone());
    let r = net.graph.constant(right.clone());

    let t = Instant::now();
    let fl = extract_features(&mut net, &l)?;
    let fr = extract_features(&mut net, &r)?;
    timings.features = t.elapsed();

    let t = Instant::now();
    let volume = build_cost_volume(&mut net, &fl, &fr, mode, None)?;
    timings.cost_volume = t.elapsed();

    let t = Instant::now();
    let disp = soft_argmin(net.graph, &volume)?;
    let ent = entropy(net.graph, &volume)?;
    let (coarse, ent_full) = upsample_outputs(net.graph, &disp, &ent, h, w)?;
    timings.projection = t.elapsed();

    let t = Instant::now();
    let refined = refine(&mut net, &coarse, &l, &ent_full)?;
    timings.refine = t.elapsed();

    Ok(Prediction {
        coarse: DisparityMap::from_tensor(&coarse)?,
        refined: DisparityMap::from_tensor(&refined)?,
        entropy: EntropyMap::from_tensor(&ent_full)?,
        volume: (*volume).clone(),
        timings,
    })
}
