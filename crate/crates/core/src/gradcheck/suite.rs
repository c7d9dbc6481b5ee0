//! The full gradient-check suite: every differentiable operation plus the
//! model's composite stages, in high precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckConfig, GradReport};
use crate::autodiff::{Graph, Tape, Var};
use crate::datasets::{gen_rds, RdsConfig};
use crate::error::Result;
use crate::model::{
    build_cost_volume, compute_cost_map, entropy, forward, refine, soft_argmin, CostMode, ModelConfig, ModelWeights,
    Net, Profile,
};
use crate::ops::{self, Axis, BatchNormConfig, ConvGeometry, PoolWindow};
use crate::tensor::{Shape, Tensor};
use crate::training::{total_loss, LossConfig, LossTargets};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub profile: Profile,
    /// Bound for single operations.
    pub op_tolerance: f64,
    /// Bound for multi-layer composites.
    pub composite_tolerance: f64,
    /// Adds a relu whose backward pass is deliberately wrong.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            profile: Profile::Tiny,
            op_tolerance: 1e-5,
            composite_tolerance: 1e-3,
            inject_fault: false,
        }
    }
}

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero, so kinks at 0 are not
/// straddled by the finite-difference step.
fn away_from_zero(shape: Shape, seed: u64, gap: f64) -> Tensor<f64> {
    random(shape, seed).map(|v| v + gap * v.signum())
}

fn vec_shape(c: usize) -> Shape {
    Shape::new(c, 1, 1, 1)
}

/// Weights with every parameter perturbed away from its initial value, so
/// that no stage is bypassed (the zero-initialized refine head included).
fn perturbed_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights<f64>> {
    let mut w = ModelWeights::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for (name, t) in w.params.iter_mut() {
        let scale = if name.ends_with(".weight") { 0.05 } else { 0.1 };
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    Ok(w)
}

/// Binds leaves `v[first..]` to `names` on `net`.
fn bind_all<G: Graph<f64, Value = Var>>(net: &mut Net<'_, f64, G>, names: &[&str], vars: &[Var]) {
    for (n, v) in names.iter().zip(vars) {
        net.bind(n, *v);
    }
}

fn param_inputs<'a>(w: &ModelWeights<f64>, names: &[&'a str]) -> Vec<(&'a str, Tensor<f64>)> {
    names.iter().map(|n| (*n, w.params[*n].clone())).collect()
}

/// Runs every check. Reports carry their own tolerance; a report fails when
/// its max relative error is not below it.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradReport>> {
    let op = GradCheckConfig {
        tolerance: opts.op_tolerance,
        ..Default::default()
    };
    // Composites hold thousands of ReLU inputs; a small step keeps the
    // central difference from straddling their kinks.
    let deep = GradCheckConfig {
        step: 1e-6,
        tolerance: opts.composite_tolerance,
        max_elements: Some(8),
        ..Default::default()
    };
    let mut out = Vec::new();

    for (g, k) in [
        (ConvGeometry::new(1, 1, 1), 3),
        (ConvGeometry::new(2, 1, 1), 3),
        (ConvGeometry::new(3, 1, 1), 3),
        (ConvGeometry::new(1, 2, 2), 3),
        (ConvGeometry::new(2, 3, 0), 3),
        (ConvGeometry::new(1, 1, 0), 1),
    ] {
        let inputs = [
            ("x", random(Shape::new(2, 2, 9, 8), 1)),
            ("w", random(Shape::new(3, 2, k, k), 2)),
            ("b", random(vec_shape(3), 3)),
        ];
        let label = format!("conv2d s{} d{} p{} k{k}", g.stride, g.dilation, g.padding);
        out.push(grad_check(
            &label,
            &inputs,
            move |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), g),
            op,
        )?);
    }

    let rm = random(vec_shape(3), 4).map(|v| 0.2 * v);
    let rv = random(vec_shape(3), 5).map(|v| 1.0 + 0.5 * v.abs());
    for training in [true, false] {
        let inputs = [
            ("x", random(Shape::new(2, 3, 4, 5), 6)),
            ("gamma", random(vec_shape(3), 7).map(|v| v + 1.5)),
            ("beta", random(vec_shape(3), 8)),
        ];
        let (rm, rv) = (rm.clone(), rv.clone());
        let cfg = BatchNormConfig {
            training,
            ..Default::default()
        };
        let label = if training {
            "batch_norm training"
        } else {
            "batch_norm inference"
        };
        out.push(grad_check(
            label,
            &inputs,
            move |t, v| Ok(t.batch_norm(&v[0], &v[1], &v[2], &rm, &rv, cfg)?.0),
            op,
        )?);
    }

    let x = away_from_zero(Shape::new(1, 2, 4, 4), 9, 0.05);
    out.push(grad_check("relu", &[("x", x.clone())], |t, v| Ok(t.relu(&v[0])), op)?);
    if opts.inject_fault {
        out.push(grad_check(
            "relu (injected fault)",
            &[("x", x)],
            |t, v| {
                let value = ops::relu(t.value(v[0]));
                Ok(t.custom("faulty_relu", &[v[0]], value, |g, inputs| {
                    vec![Some(ops::relu_backward(inputs[0], g).map(|d| 2.0 * d))]
                }))
            },
            op,
        )?);
    }

    for (win, label) in [
        (PoolWindow::square(2), "avg_pool 2x2"),
        (PoolWindow::square(8), "avg_pool clipped"),
    ] {
        let x = random(Shape::new(2, 2, 6, 7), 10);
        out.push(grad_check(label, &[("x", x)], move |t, v| t.avg_pool(&v[0], win), op)?);
    }
    for (h, w, label) in [(9, 11, "bilinear_resize up"), (3, 2, "bilinear_resize down")] {
        let x = random(Shape::new(1, 2, 5, 4), 11);
        out.push(grad_check(
            label,
            &[("x", x)],
            move |t, v| t.bilinear_resize(&v[0], h, w),
            op,
        )?);
    }
    let x = random(Shape::new(2, 5, 3, 3), 12).map(|v| 3.0 * v);
    out.push(grad_check(
        "softmax",
        &[("x", x.clone())],
        |t, v| t.softmax(&v[0], Axis::Channel),
        op,
    )?);
    out.push(grad_check(
        "log_softmax",
        &[("x", x)],
        |t, v| t.log_softmax(&v[0], Axis::Channel),
        op,
    )?);
    for (axis, label) in [(Axis::Channel, "concat channels"), (Axis::Batch, "concat batch")] {
        let inputs = [
            ("a", random(Shape::new(1, 2, 3, 4), 13)),
            ("b", random(Shape::new(1, 2, 3, 4), 14)),
        ];
        out.push(grad_check(
            label,
            &inputs,
            move |t, v| t.concat(&[v[0], v[1]], axis),
            op,
        )?);
    }
    let x = random(Shape::new(1, 3, 3, 6), 15);
    out.push(grad_check(
        "shift_width",
        &[("x", x.clone())],
        |t, v| t.shift_width(&v[0], 2),
        op,
    )?);
    out.push(grad_check(
        "permute_channels",
        &[("x", x)],
        |t, v| t.permute_channels(&v[0], &[2, 0, 1]),
        op,
    )?);
    let inputs = [
        ("a", random(Shape::new(1, 3, 2, 3), 16)),
        ("b", random(Shape::new(1, 3, 2, 3), 17)),
    ];
    out.push(grad_check(
        "add/sub/mul/scale/sum_channels",
        &inputs,
        |t, v| {
            let s = t.add(&v[0], &v[1])?;
            let d = t.sub(&v[0], &v[1])?;
            let p = t.mul(&s, &d)?;
            let p = t.scale(&p, 0.7);
            Ok(t.sum_channels(&p))
        },
        op,
    )?);
    out.push(grad_check(
        "sum_all",
        &inputs,
        |t, v| {
            let p = t.mul(&v[0], &v[1])?;
            Ok(t.sum_all(&p))
        },
        op,
    )?);
    // Offsets at least 0.1 from the |x| = 1 knee.
    let x = Tensor::from_fn(Shape::new(1, 1, 2, 4), |[_, _, y, x]| {
        [-2.3, -0.6, 0.4, 1.7, -1.2, 0.2, 0.9, 3.1][y * 4 + x]
    });
    out.push(grad_check("smooth_l1", &[("x", x)], |t, v| Ok(t.smooth_l1(&v[0])), op)?);

    let vol = random(Shape::new(1, 6, 3, 4), 18).map(|v| 2.0 * v);
    out.push(grad_check(
        "soft_argmin",
        &[("cost", vol.clone())],
        |t, v| soft_argmin(t, &v[0]),
        op,
    )?);
    out.push(grad_check("entropy", &[("cost", vol)], |t, v| entropy(t, &v[0]), op)?);

    let gt = crate::maps::DisparityMap::dense(3, 4, (0..12).map(|i| (i % 5) as f32).collect())?;
    let targets = LossTargets::<f64>::new(
        &gt,
        &[true, true, false, true, true, true, true, true, false, true, true, true],
    )?;
    let coarse = Tensor::from_fn(Shape::new(1, 1, 3, 4), |[_, _, y, x]| {
        ((y * 4 + x) % 5) as f64 + [0.3, -1.5, 2.2, -0.4][x]
    });
    let refined = coarse.map(|v| v + 0.15);
    out.push(grad_check(
        "total_loss",
        &[("coarse", coarse), ("refined", refined)],
        move |t, v| total_loss(t, &v[0], &v[1], &targets, &LossConfig::default()),
        op,
    )?);

    let cfg = ModelConfig::for_profile(opts.profile, 1, 6);
    let weights = perturbed_weights(&cfg, 21)?;
    let (h, w) = (48, 48);

    {
        let names = [
            "refine.in.weight",
            "refine.block0.conv2.bn.gamma",
            "refine.out.weight",
            "refine.out.bias",
        ];
        let mut inputs = vec![
            ("disparity", random(Shape::new(1, 1, h, w), 22).map(|v| 3.0 * v + 3.0)),
            ("left", random(Shape::new(1, 1, h, w), 23)),
            ("entropy", random(Shape::new(1, 1, h, w), 24).map(|v| v.abs())),
        ];
        inputs.extend(param_inputs(&weights, &names));
        let (cfg, weights) = (cfg.clone(), weights.clone());
        out.push(grad_check(
            "refine composite",
            &inputs,
            move |t: &mut Tape<f64>, v| {
                let mut net = Net::training(t, &cfg, &weights);
                bind_all(&mut net, &names, &v[3..]);
                refine(&mut net, &v[0], &v[1], &v[2])
            },
            deep,
        )?);
    }

    {
        let f = cfg.feature_channels;
        let names = [
            "matching.enc0.down.weight",
            "matching.dec3.bn.beta",
            "matching.out.weight",
        ];
        let mut inputs = vec![
            ("left features", random(Shape::new(1, f, 16, 16), 25)),
            ("right features", random(Shape::new(1, f, 16, 16), 26)),
        ];
        inputs.extend(param_inputs(&weights, &names));
        let (cfg, weights) = (cfg.clone(), weights.clone());
        out.push(grad_check(
            "cost volume composite",
            &inputs,
            move |t: &mut Tape<f64>, v| {
                let mut net = Net::frozen_statistics(t, &cfg, &weights);
                bind_all(&mut net, &names, &v[2..]);
                let vol = build_cost_volume(&mut net, &v[0], &v[1], CostMode::Sequential, None)?;
                let c = compute_cost_map(&mut net, &v[0], &v[1])?;
                net.graph.concat_channels(&[vol, c])
            },
            deep,
        )?);
    }

    {
        let sample = gen_rds(&RdsConfig::new(w, h, 6, 27), 1)?.remove(0);
        let names = [
            "feature.conv0.weight",
            "feature.spp1.bn.gamma",
            "feature.out.bias",
            "matching.enc3.conv.weight",
        ];
        let mut inputs = vec![
            ("left", crate::datasets::normalize_image::<f64>(&sample.left)),
            ("right", crate::datasets::normalize_image::<f64>(&sample.right)),
        ];
        inputs.extend(param_inputs(&weights, &names));
        let targets = LossTargets::<f64>::below(&sample.gt, cfg.max_disparity)?;
        let (cfg, weights) = (cfg.clone(), weights.clone());
        out.push(grad_check(
            "full model loss",
            &inputs,
            move |t: &mut Tape<f64>, v| {
                let mut net = Net::training(t, &cfg, &weights);
                bind_all(&mut net, &names, &v[2..]);
                let o = forward(&mut net, &v[0], &v[1], CostMode::Parallel)?;
                total_loss(net.graph, &o.coarse, &o.refined, &targets, &LossConfig::default())
            },
            deep,
        )?);
    }
    Ok(out)
}
