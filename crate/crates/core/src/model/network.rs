//! The four sub-networks, written against [`Graph`] so the same code serves
//! training (on a [`crate::Tape`]) and inference (on [`crate::Eager`]).

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::weights::{decoder_channels, ModelWeights};
use crate::autodiff::{Graph, RunningStats};
use crate::error::{Error, Result};
use crate::ops::{Axis, BatchNormConfig, ConvGeometry, PoolWindow};
use crate::tensor::{Scalar, Shape, Tensor};

/// Smallest 1/3-resolution extent the 4-level matching encoder accepts.
pub const MIN_MATCHING_EXTENT: usize = 16;

/// How the disparity levels of a cost volume are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CostMode {
    /// One level at a time; activations of a level are released before the
    /// next one starts.
    #[default]
    Sequential,
    /// All levels stacked along the batch axis and evaluated together.
    Parallel,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(CostMode::Sequential),
            "parallel" => Ok(CostMode::Parallel),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected sequential|parallel)"
            ))),
        }
    }
}

/// Binds weights into a graph and carries per-pass state.
pub struct Net<'a, S: Scalar, G: Graph<S>> {
    pub graph: &'a mut G,
    pub config: &'a ModelConfig,
    weights: &'a ModelWeights<S>,
    bound: BTreeMap<String, G::Value>,
    trainable: bool,
    training: bool,
    updates: BTreeMap<String, RunningStats<S>>,
}

impl<'a, S: Scalar, G: Graph<S>> Net<'a, S, G> {
    /// Inference: running batch-norm statistics, weights bound as constants.
    pub fn inference(graph: &'a mut G, config: &'a ModelConfig, weights: &'a ModelWeights<S>) -> Self {
        Net {
            graph,
            config,
            weights,
            bound: BTreeMap::new(),
            trainable: false,
            training: false,
            updates: BTreeMap::new(),
        }
    }

    /// Training: batch statistics, weights bound as gradient leaves.
    pub fn training(graph: &'a mut G, config: &'a ModelConfig, weights: &'a ModelWeights<S>) -> Self {
        Net {
            trainable: true,
            training: true,
            ..Self::inference(graph, config, weights)
        }
    }

    /// Gradient leaves for every parameter, but running batch-norm statistics.
    pub fn frozen_statistics(graph: &'a mut G, config: &'a ModelConfig, weights: &'a ModelWeights<S>) -> Self {
        Net {
            trainable: true,
            ..Self::inference(graph, config, weights)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// The graph value bound to a parameter. Each parameter is bound once per
    /// pass and then shared by every use (e.g. every disparity level).
    pub fn param(&mut self, name: &str) -> Result<G::Value> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let t = self.weights.param(name)?.clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Uses `value` for parameter `name` instead of the stored tensor.
    pub fn bind(&mut self, name: &str, value: G::Value) {
        self.bound.insert(name.to_string(), value);
    }

    /// Parameters bound so far.
    pub fn bound_params(&self) -> &BTreeMap<String, G::Value> {
        &self.bound
    }

    /// Running-statistics updates collected by training-mode batch norms.
    pub fn take_updates(&mut self) -> BTreeMap<String, RunningStats<S>> {
        std::mem::take(&mut self.updates)
    }

    pub fn conv(&mut self, x: &G::Value, name: &str, g: ConvGeometry) -> Result<G::Value> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.weights.params.contains_key(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.graph.conv2d(x, &w, b.as_ref(), g)
    }

    pub fn bn(&mut self, x: &G::Value, name: &str) -> Result<G::Value> {
        let gamma = self.param(&format!("{name}.bn.gamma"))?;
        let beta = self.param(&format!("{name}.bn.beta"))?;
        let rm = self.weights.buffer(&format!("{name}.bn.running_mean"))?;
        let rv = self.weights.buffer(&format!("{name}.bn.running_var"))?;
        let cfg = BatchNormConfig {
            training: self.training,
            ..Default::default()
        };
        let (y, stats) = self.graph.batch_norm(x, &gamma, &beta, rm, rv, cfg)?;
        if let Some(stats) = stats {
            self.updates.insert(name.to_string(), stats);
        }
        Ok(y)
    }

    pub fn conv_bn(&mut self, x: &G::Value, name: &str, g: ConvGeometry) -> Result<G::Value> {
        let c = self.conv(x, name, g)?;
        self.bn(&c, name)
    }

    pub fn conv_bn_relu(&mut self, x: &G::Value, name: &str, g: ConvGeometry) -> Result<G::Value> {
        let c = self.conv_bn(x, name, g)?;
        Ok(self.graph.relu(&c))
    }

    fn shape(&self, v: &G::Value) -> Shape {
        self.graph.tensor(v).shape()
    }
}

/// 3x3 dilated conv geometry preserving extents.
fn dilated(rate: usize) -> ConvGeometry {
    ConvGeometry::new(1, rate, rate)
}

/// Feature net: stride-3 conv, three dilated convs, a two-branch pyramid
/// pooling module, a fusion conv and a linear 1x1 projection to F channels.
/// Exactly eight convolutions.
pub fn extract_features<S: Scalar, G: Graph<S>>(net: &mut Net<'_, S, G>, image: &G::Value) -> Result<G::Value> {
    let s = net.shape(image);
    if s.h() < 9 || s.w() < 9 {
        return Err(Error::invalid(format!("image {s} is smaller than 9x9")));
    }
    let cfg = net.config;
    let mut x = net.conv_bn_relu(image, "feature.conv0", ConvGeometry::new(3, 1, 1))?;
    for (i, &rate) in cfg.dilations.iter().enumerate() {
        x = net.conv_bn_relu(&x, &format!("feature.dil{i}"), dilated(rate))?;
    }
    let fs = net.shape(&x);
    let mut parts = vec![x.clone()];
    for (i, branch) in cfg.spp.iter().enumerate() {
        let pooled = net.graph.avg_pool(&x, PoolWindow::square(branch.window))?;
        let proj = net.conv_bn_relu(&pooled, &format!("feature.spp{i}"), ConvGeometry::same(1))?;
        parts.push(net.graph.bilinear_resize(&proj, fs.h(), fs.w())?);
    }
    let cat = net.graph.concat_channels(&parts)?;
    let fused = net.conv_bn_relu(&cat, "feature.fuse", ConvGeometry::same(3))?;
    net.conv(&fused, "feature.out", ConvGeometry::same(1))
}

/// Column `x` of the result is column `x - d` of `features`; the first `d`
/// columns are zero.
pub fn shift_features<S: Scalar, G: Graph<S>>(graph: &mut G, features: &G::Value, d: usize) -> Result<G::Value> {
    graph.shift_width(features, d)
}

/// Matching net: a skip-connected U-Net over the channel-concatenated pair,
/// producing one cost per pixel. Accepts any batch size; batch elements are
/// independent except for training-mode batch statistics.
pub fn compute_cost_map<S: Scalar, G: Graph<S>>(
    net: &mut Net<'_, S, G>,
    left: &G::Value,
    right_shifted: &G::Value,
) -> Result<G::Value> {
    let (ls, rs) = (net.shape(left), net.shape(right_shifted));
    if ls != rs {
        return Err(Error::shape(format!("feature pair {ls} vs {rs}")));
    }
    if ls.h() < MIN_MATCHING_EXTENT || ls.w() < MIN_MATCHING_EXTENT {
        return Err(Error::invalid(format!(
            "feature map {}x{} is below the {MIN_MATCHING_EXTENT}x{MIN_MATCHING_EXTENT} the matching encoder needs",
            ls.h(),
            ls.w()
        )));
    }
    let input = net.graph.concat_channels(&[left.clone(), right_shifted.clone()])?;
    let mut skips = vec![input.clone()];
    let mut x = input;
    for i in 0..4 {
        x = net.conv_bn_relu(&x, &format!("matching.enc{i}.down"), ConvGeometry::new(2, 1, 1))?;
        x = net.conv_bn_relu(&x, &format!("matching.enc{i}.conv"), ConvGeometry::same(3))?;
        if i < 3 {
            skips.push(x.clone());
        }
    }
    for j in 0..decoder_channels(net.config).len() {
        let skip = skips.pop().expect("one skip per decoder stage");
        let ss = net.shape(&skip);
        let up = net.graph.bilinear_resize(&x, ss.h(), ss.w())?;
        let cat = net.graph.concat_channels(&[up, skip])?;
        x = net.conv_bn_relu(&cat, &format!("matching.dec{j}"), ConvGeometry::same(3))?;
    }
    net.conv(&x, "matching.out", ConvGeometry::same(3))
}

/// Right-hand operand of the matching net: the right features, or the left
/// features again for the context-only control.
fn matching_partner<S: Scalar, G: Graph<S>>(net: &Net<'_, S, G>, left: &G::Value, right: &G::Value) -> G::Value {
    if net.config.context_only {
        left.clone()
    } else {
        right.clone()
    }
}

/// Stacks one cost map per disparity level into a (1, D/3, h, w) volume.
///
/// `order` sets the sequence in which levels are evaluated (default
/// ascending); slice `d` of the result is always the cost at shift `d`.
/// Training passes always batch the levels.
pub fn build_cost_volume<S: Scalar, G: Graph<S>>(
    net: &mut Net<'_, S, G>,
    left: &G::Value,
    right: &G::Value,
    mode: CostMode,
    order: Option<&[usize]>,
) -> Result<G::Value> {
    let levels = net.config.levels();
    let fs = net.shape(left);
    if fs.n() != 1 {
        return Err(Error::shape(format!("cost volume expects batch 1 features, got {fs}")));
    }
    if levels > fs.w() {
        return Err(Error::invalid(format!(
            "{levels} disparity levels exceed feature width {}",
            fs.w()
        )));
    }
    let order: Vec<usize> = match order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..levels).collect::<Vec<_>>() {
                return Err(Error::invalid(format!("{o:?} is not a permutation of {levels} levels")));
            }
            o.to_vec()
        }
        None => (0..levels).collect(),
    };
    let partner = matching_partner(net, left, right);
    let mode = if net.is_training() { CostMode::Parallel } else { mode };
    let (h, w) = (fs.h(), fs.w());
    let evaluated = match mode {
        CostMode::Parallel => {
            let mut lefts = Vec::with_capacity(levels);
            let mut rights = Vec::with_capacity(levels);
            for &d in &order {
                lefts.push(left.clone());
                rights.push(shift_features(net.graph, &partner, d)?);
            }
            let l = net.graph.concat(&lefts, Axis::Batch)?;
            let r = net.graph.concat(&rights, Axis::Batch)?;
            drop(rights);
            let costs = compute_cost_map(net, &l, &r)?;
            net.graph.reshape(&costs, Shape::new(1, levels, h, w))?
        }
        CostMode::Sequential => {
            let mut slices = Vec::with_capacity(levels);
            for &d in &order {
                let shifted = shift_features(net.graph, &partner, d)?;
                slices.push(compute_cost_map(net, left, &shifted)?);
            }
            net.graph.concat_channels(&slices)?
        }
    };
    if order.iter().enumerate().all(|(i, &d)| i == d) {
        return Ok(evaluated);
    }
    // Channel i of `evaluated` holds level order[i]; invert.
    let mut inverse = vec![0; levels];
    for (i, &d) in order.iter().enumerate() {
        inverse[d] = i;
    }
    net.graph.permute_channels(&evaluated, &inverse)
}

fn level_indices<S: Scalar>(shape: Shape) -> Tensor<S> {
    Tensor::from_fn(shape, |[_, d, _, _]| S::from_usize(d))
}

/// `sum_d d * softmax(-c)_d` over the level axis, in 1/3-resolution units.
pub fn soft_argmin<S: Scalar, G: Graph<S>>(graph: &mut G, volume: &G::Value) -> Result<G::Value> {
    let shape = graph.tensor(volume).shape();
    if shape.c() == 0 {
        return Err(Error::invalid("soft_argmin needs at least one level"));
    }
    let neg = graph.scale(volume, -S::ONE);
    let prob = graph.softmax(&neg, Axis::Channel)?;
    let idx = graph.constant(level_indices(shape));
    let weighted = graph.mul(&prob, &idx)?;
    Ok(graph.sum_channels(&weighted))
}

/// `-sum_d p_d ln p_d` with `p = softmax(-c)` over the level axis, in nats.
pub fn entropy<S: Scalar, G: Graph<S>>(graph: &mut G, volume: &G::Value) -> Result<G::Value> {
    if graph.tensor(volume).shape().c() == 0 {
        return Err(Error::invalid("entropy needs at least one level"));
    }
    let neg = graph.scale(volume, -S::ONE);
    let prob = graph.softmax(&neg, Axis::Channel)?;
    let logp = graph.log_softmax(&neg, Axis::Channel)?;
    let plogp = graph.mul(&prob, &logp)?;
    let total = graph.sum_channels(&plogp);
    Ok(graph.scale(&total, -S::ONE))
}

/// Bilinear upsampling to (H, W); disparities are multiplied by 3 to convert
/// to full-resolution pixels, entropies are not rescaled.
pub fn upsample_outputs<S: Scalar, G: Graph<S>>(
    graph: &mut G,
    disparity: &G::Value,
    entropy: &G::Value,
    height: usize,
    width: usize,
) -> Result<(G::Value, G::Value)> {
    let d = graph.bilinear_resize(disparity, height, width)?;
    let d = graph.scale(&d, S::from_f64(3.0));
    let e = graph.bilinear_resize(entropy, height, width)?;
    Ok((d, e))
}

/// Entropy normalizer ln(D/3), or 1 for a single level.
pub fn entropy_scale(cfg: &ModelConfig) -> f64 {
    let levels = cfg.levels();
    if levels > 1 {
        (levels as f64).ln()
    } else {
        1.0
    }
}

/// Refine net: residual correction of the upsampled disparity from the left
/// image and the entropy map; output clamped at zero.
pub fn refine<S: Scalar, G: Graph<S>>(
    net: &mut Net<'_, S, G>,
    disparity: &G::Value,
    left: &G::Value,
    entropy: &G::Value,
) -> Result<G::Value> {
    let (ds, ls, es) = (net.shape(disparity), net.shape(left), net.shape(entropy));
    if ds.plane() == 0 || (ds.h(), ds.w()) != (ls.h(), ls.w()) || (ds.h(), ds.w()) != (es.h(), es.w()) {
        return Err(Error::shape(format!(
            "refine inputs disagree: disparity {ds}, image {ls}, entropy {es}"
        )));
    }
    let cfg = net.config;
    let d_norm = net.graph.scale(disparity, S::from_f64(1.0 / cfg.max_disparity as f64));
    let e_norm = net.graph.scale(entropy, S::from_f64(1.0 / entropy_scale(cfg)));
    let input = net.graph.concat_channels(&[left.clone(), d_norm, e_norm])?;
    let mut x = net.conv_bn_relu(&input, "refine.in", ConvGeometry::same(3))?;
    for (i, &rate) in cfg.refine_dilations.iter().enumerate() {
        let y = net.conv_bn_relu(&x, &format!("refine.block{i}.conv1"), dilated(rate))?;
        let y = net.conv_bn(&y, &format!("refine.block{i}.conv2"), dilated(rate))?;
        let sum = net.graph.add(&x, &y)?;
        x = net.graph.relu(&sum);
    }
    let residual = net.conv(&x, "refine.out", ConvGeometry::same(3))?;
    let out = net.graph.add(disparity, &residual)?;
    Ok(net.graph.relu(&out))
}

/// Graph values produced by one full pass.
pub struct Outputs<V> {
    pub volume: V,
    /// Full-resolution upsampled soft-argmin disparity.
    pub coarse: V,
    pub refined: V,
    /// Full-resolution entropy.
    pub entropy: V,
}

/// Feature net, cost volume, projection and refinement in sequence.
pub fn forward<S: Scalar, G: Graph<S>>(
    net: &mut Net<'_, S, G>,
    left: &G::Value,
    right: &G::Value,
    mode: CostMode,
) -> Result<Outputs<G::Value>> {
    let (ls, rs) = (net.shape(left), net.shape(right));
    if ls != rs {
        return Err(Error::shape(format!("left image {ls} vs right image {rs}")));
    }
    let fl = extract_features(net, left)?;
    let fr = extract_features(net, right)?;
    let volume = build_cost_volume(net, &fl, &fr, mode, None)?;
    let disp = soft_argmin(net.graph, &volume)?;
    let ent = entropy(net.graph, &volume)?;
    let (coarse, ent_full) = upsample_outputs(net.graph, &disp, &ent, ls.h(), ls.w())?;
    let refined = refine(net, &coarse, left, &ent_full)?;
    Ok(Outputs {
        volume,
        coarse,
        refined,
        entropy: ent_full,
    })
}
