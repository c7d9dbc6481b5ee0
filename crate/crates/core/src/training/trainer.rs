use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::loss::{total_loss, LossConfig, LossTargets};
use crate::autodiff::{Graph, Tape};
use crate::datasets::{normalize_image, StereoSample};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_maps};
use crate::model::{forward, infer, CostMode, ModelConfig, ModelWeights, Net};
use crate::tensor::{Shape, Tensor};

/// Same random window of left, right and ground truth.
pub fn random_crop(sample: &StereoSample, crop_h: usize, crop_w: usize, rng: &mut impl Rng) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    if crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w {
        return Err(Error::invalid(format!(
            "crop {crop_h}x{crop_w} does not fit image {h}x{w}"
        )));
    }
    let top = rng.gen_range(0..=h - crop_h);
    let left = rng.gen_range(0..=w - crop_w);
    StereoSample::new(
        sample.left.crop(top, left, crop_h, crop_w)?,
        sample.right.crop(top, left, crop_h, crop_w)?,
        sample.gt.crop(top, left, crop_h, crop_w)?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Training window `(height, width)`; `None` trains on whole images.
    pub crop: Option<(usize, usize)>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            crop: None,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Refined-output EPE on the validation set, if one was given.
    pub val_epe: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6} val_epe=", self.epoch, self.loss)?;
        match self.val_epe {
            Some(v) => write!(f, "{v:.6}"),
            None => write!(f, "nan"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// One forward/backward pass and optimizer update on a single sample.
/// Returns the loss before the update.
pub fn train_step(
    config: &ModelConfig,
    weights: &mut ModelWeights<f32>,
    adam: &mut AdamState<f32>,
    sample: &StereoSample,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let targets = LossTargets::<f32>::below(&sample.gt, config.max_disparity)?;
    let mut tape = Tape::<f32>::new();
    let (loss, bound, updates) = {
        let mut net = Net::training(&mut tape, config, weights);
        let l = net.graph.constant(normalize_image(&sample.left));
        let r = net.graph.constant(normalize_image(&sample.right));
        let out = forward(&mut net, &l, &r, CostMode::Parallel)?;
        let loss = total_loss(net.graph, &out.coarse, &out.refined, &targets, loss_cfg)?;
        (loss, net.bound_params().clone(), net.take_updates())
    };
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss is {value}")));
    }
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound {
        if let Some(g) = tape.take_grad(var) {
            grads.insert(name, g);
        }
    }
    drop(tape);
    adam_step(&mut weights.params, &grads, adam)?;
    for (name, stats) in updates {
        let c = stats.mean.len();
        let shape = Shape::new(c, 1, 1, 1);
        weights
            .buffers
            .insert(format!("{name}.bn.running_mean"), Tensor::from_vec(shape, stats.mean)?);
        weights
            .buffers
            .insert(format!("{name}.bn.running_var"), Tensor::from_vec(shape, stats.var)?);
    }
    Ok(value)
}

/// Mean refined-output EPE over `samples`, pooled by valid pixel.
pub fn validation_epe(config: &ModelConfig, weights: &ModelWeights<f32>, samples: &[StereoSample]) -> Result<f64> {
    let reports = samples
        .par_iter()
        .map(|s| {
            let pred = infer(
                config,
                weights,
                &normalize_image(&s.left),
                &normalize_image(&s.right),
                CostMode::Sequential,
            )?;
            evaluate_maps(&pred.refined, &s.gt, config.max_disparity, &[])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&reports)?.epe)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains from `resume` (or fresh weights seeded by `opts.seed`) until
/// `opts.epochs` epochs are complete. `on_epoch` sees every epoch's log line
/// and the checkpoint reached at its end.
pub fn train(
    config: &ModelConfig,
    train_set: &[StereoSample],
    val_set: &[StereoSample],
    opts: &TrainOptions,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    opts.adam.validate()?;
    opts.loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = train_set
        .iter()
        .chain(val_set)
        .find(|s| s.left.shape().c() != config.in_channels)
    {
        return Err(Error::invalid(format!(
            "sample has {} channels but the model expects {}",
            s.left.shape().c(),
            config.in_channels
        )));
    }
    let mut ck = match resume {
        Some(ck) => {
            ck.check_config(config)?;
            ck
        }
        None => Checkpoint {
            config: config.clone(),
            weights: ModelWeights::init(config, opts.seed)?,
            adam: None,
            epoch: 0,
            seed: opts.seed,
        },
    };
    let mut adam = ck.adam.take().unwrap_or_else(|| AdamState::new(opts.adam));
    adam.config = opts.adam;
    let mut log = Vec::new();
    for epoch in ck.epoch as usize..opts.epochs {
        let mut rng = epoch_rng(ck.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let sample = match opts.crop {
                Some((h, w)) => random_crop(&train_set[i], h, w, &mut rng)?,
                None => train_set[i].clone(),
            };
            total += train_step(config, &mut ck.weights, &mut adam, &sample, &opts.loss).map_err(|e| match e {
                Error::Divergence(m) => {
                    Error::Divergence(format!("{m} at epoch {} step {step} (sample {i})", epoch + 1))
                }
                other => other,
            })?;
        }
        let val_epe = if val_set.is_empty() {
            None
        } else {
            Some(validation_epe(config, &ck.weights, val_set)?)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: total / order.len() as f64,
            val_epe,
        };
        ck.epoch = epoch as u64 + 1;
        ck.adam = Some(adam.clone());
        on_epoch(&entry, &ck)?;
        log.push(entry);
    }
    ck.adam = Some(adam);
    Ok(TrainOutcome { checkpoint: ck, log })
}
