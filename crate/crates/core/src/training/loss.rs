use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::maps::DisparityMap;
use crate::tensor::{Scalar, Shape, Tensor};

/// Weight of the refined-output term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 1.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Ground truth and 0/1 mask as (1, 1, H, W) tensors. Masked-out pixels hold
/// 0 in the ground-truth tensor so they stay finite.
#[derive(Debug, Clone)]
pub struct LossTargets<S> {
    pub gt: Tensor<S>,
    pub mask: Tensor<S>,
    pub count: usize,
}

impl<S: Scalar> LossTargets<S> {
    pub fn new(gt: &DisparityMap, mask: &[bool]) -> Result<Self> {
        let (h, w) = (gt.height(), gt.width());
        if mask.len() != h * w {
            return Err(Error::shape(format!(
                "mask has {} entries for {h}x{w} pixels",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("loss mask selects no pixels"));
        }
        let shape = Shape::new(1, 1, h, w);
        let mut values = Vec::with_capacity(h * w);
        for (i, &m) in mask.iter().enumerate() {
            if m && !gt.is_valid(i / w, i % w) {
                return Err(Error::invalid(format!(
                    "pixel {i} is masked in but has invalid ground truth"
                )));
            }
            values.push(if m { S::from_f64(gt.values()[i] as f64) } else { S::ZERO });
        }
        Ok(LossTargets {
            gt: Tensor::from_vec(shape, values)?,
            mask: Tensor::from_vec(shape, mask.iter().map(|&m| if m { S::ONE } else { S::ZERO }).collect())?,
            count,
        })
    }

    /// Valid ground truth strictly below `max_disparity`.
    pub fn below(gt: &DisparityMap, max_disparity: usize) -> Result<Self> {
        Self::new(gt, &crate::evaluation::valid_mask(gt, max_disparity))
    }
}

fn masked_mean<S: Scalar, G: Graph<S>>(
    graph: &mut G,
    pred: &G::Value,
    gt: &G::Value,
    mask: &G::Value,
    count: usize,
) -> Result<G::Value> {
    let diff = graph.sub(pred, gt)?;
    let l = graph.smooth_l1(&diff);
    let masked = graph.mul(&l, mask)?;
    let sum = graph.sum_all(&masked);
    Ok(graph.scale(&sum, S::ONE / S::from_usize(count)))
}

/// Masked-mean smooth L1 of both outputs: `mean(l(coarse - gt)) +
/// lambda * mean(l(refined - gt))`.
pub fn total_loss<S: Scalar, G: Graph<S>>(
    graph: &mut G,
    coarse: &G::Value,
    refined: &G::Value,
    targets: &LossTargets<S>,
    cfg: &LossConfig,
) -> Result<G::Value> {
    cfg.validate()?;
    let gt = graph.constant(targets.gt.clone());
    let mask = graph.constant(targets.mask.clone());
    let a = masked_mean(graph, coarse, &gt, &mask, targets.count)?;
    let b = masked_mean(graph, refined, &gt, &mask, targets.count)?;
    let b = graph.scale(&b, S::from_f64(cfg.lambda));
    graph.add(&a, &b)
}

/// [`total_loss`] on finished maps, evaluated in high precision.
pub fn total_loss_maps(
    coarse: &DisparityMap,
    refined: &DisparityMap,
    gt: &DisparityMap,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<f64> {
    for m in [coarse, refined] {
        if (m.height(), m.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                m.height(),
                m.width(),
                gt.height(),
                gt.width()
            )));
        }
    }
    let targets = LossTargets::<f64>::new(gt, mask)?;
    let mut g = Eager::new();
    let c = g.constant(coarse.to_tensor());
    let r = g.constant(refined.to_tensor());
    let loss = total_loss(&mut g, &c, &r, &targets, cfg)?;
    Ok(loss.data()[0])
}
