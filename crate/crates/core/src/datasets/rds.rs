//! Random-dot stereograms rendered from a layered cyclopean scene.
//!
//! Each layer (the background plane plus `num_shapes` fronto-parallel
//! shapes) carries its own binary dot texture indexed by cyclopean column
//! `u` and a constant integer disparity `d`. The layer point at `u` lands at
//! `x_l = u + ceil(d/2)` in the left view and `x_r = u - floor(d/2)` in the
//! right view, so `x_l - x_r = d` exactly. Nearer layers (larger `d`) hide
//! farther ones independently in each view. A left pixel whose surface point
//! is hidden or out of frame in the right view is occluded: it renders black
//! and is invalid in the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StereoSample;
use crate::error::{Error, Result};
use crate::maps::DisparityMap;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdsConfig {
    pub width: usize,
    pub height: usize,
    /// Probability that a dot is white, in (0, 1).
    pub dot_density: f64,
    pub num_shapes: usize,
    /// Inclusive range of integer disparities.
    pub disparity_range: (usize, usize),
    /// Inclusive range of shape widths and heights in pixels.
    pub shape_size: (usize, usize),
    pub shape_kinds: Vec<ShapeKind>,
    pub seed: u64,
}

impl RdsConfig {
    /// Disparities span `0..max_disparity`, the range a model with that
    /// maximum can represent.
    pub fn new(width: usize, height: usize, max_disparity: usize, seed: u64) -> Self {
        RdsConfig {
            width,
            height,
            dot_density: 0.5,
            num_shapes: 3,
            disparity_range: (0, max_disparity.saturating_sub(1)),
            shape_size: ((width.min(height) / 6).max(1), (width.min(height) / 2).max(1)),
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.disparity_range;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("RDS extents must be positive"));
        }
        if !(self.dot_density > 0.0 && self.dot_density < 1.0) {
            return Err(Error::invalid(format!(
                "dot density {} outside (0, 1)",
                self.dot_density
            )));
        }
        if lo > hi || hi >= self.width {
            return Err(Error::invalid(format!(
                "disparity range ({lo}, {hi}) must be ordered with max < width {}",
                self.width
            )));
        }
        let (smin, smax) = self.shape_size;
        if self.num_shapes > 0 {
            if smin == 0 || smin > smax {
                return Err(Error::invalid(format!("bad shape size range ({smin}, {smax})")));
            }
            if smax > self.width || smax > self.height {
                return Err(Error::invalid(format!(
                    "shapes up to {smax}px do not fit a {}x{} image",
                    self.width, self.height
                )));
            }
            if self.shape_kinds.is_empty() {
                return Err(Error::invalid("no shape kinds configured"));
            }
        }
        Ok(())
    }
}

struct Layer {
    disparity: usize,
    /// Cyclopean coverage test; the background covers everything.
    region: Option<(ShapeKind, f64, f64, f64, f64)>,
    /// Row-major dots over the padded cyclopean domain.
    texture: Vec<u8>,
}

impl Layer {
    fn covers(&self, y: usize, u: isize) -> bool {
        match self.region {
            None => true,
            Some((kind, cy, cx, ry, rx)) => {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (u as f64 + 0.5 - cx) / rx);
                match kind {
                    ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
                }
            }
        }
    }
}

/// Which layer is visible at every pixel of one view, or `None` for holes.
fn visible_layers(layers: &[Layer], h: usize, w: usize, left_view: bool) -> Vec<Option<usize>> {
    let mut vis = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            // Nearest (largest disparity) covering layer wins; ties go to the
            // later (front) layer.
            let mut best: Option<usize> = None;
            for (k, layer) in layers.iter().enumerate() {
                let d = layer.disparity;
                let u = if left_view {
                    x as isize - d.div_ceil(2) as isize
                } else {
                    x as isize + (d / 2) as isize
                };
                if layer.covers(y, u) && best.is_none_or(|b| layers[b].disparity <= d) {
                    best = Some(k);
                }
            }
            vis[y * w + x] = best;
        }
    }
    vis
}

/// One sample from the stream `(cfg.seed, index)`.
pub fn gen_rds_sample(cfg: &RdsConfig, index: u64) -> Result<StereoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let (lo, hi) = cfg.disparity_range;
    let pad = hi + 1;
    let tex_w = w + 2 * pad;

    let texture = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        (0..h * tex_w)
            .map(|_| u8::from(rng.gen_bool(cfg.dot_density)))
            .collect()
    };

    let background = rng.gen_range(lo..=(lo + hi) / 2);
    let mut layers = vec![Layer {
        disparity: background,
        region: None,
        texture: texture(&mut rng),
    }];
    for _ in 0..cfg.num_shapes {
        let kind = cfg.shape_kinds[rng.gen_range(0..cfg.shape_kinds.len())];
        let sh = rng.gen_range(cfg.shape_size.0..=cfg.shape_size.1) as f64;
        let sw = rng.gen_range(cfg.shape_size.0..=cfg.shape_size.1) as f64;
        let cy = rng.gen_range(sh / 2.0..=h as f64 - sh / 2.0);
        let cx = rng.gen_range(sw / 2.0..=w as f64 - sw / 2.0);
        let d = if background < hi {
            rng.gen_range(background + 1..=hi)
        } else {
            background
        };
        layers.push(Layer {
            disparity: d,
            region: Some((kind, cy, cx, sh / 2.0, sw / 2.0)),
            texture: texture(&mut rng),
        });
    }

    let vis_l = visible_layers(&layers, h, w, true);
    let vis_r = visible_layers(&layers, h, w, false);
    let dot =
        |k: usize, y: usize, u: isize| -> f32 { f32::from(layers[k].texture[y * tex_w + (u + pad as isize) as usize]) };

    let mut left = vec![0f32; h * w];
    let mut right = vec![0f32; h * w];
    let mut gt = vec![0f32; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if let Some(k) = vis_r[i] {
                right[i] = dot(k, y, x as isize + (layers[k].disparity / 2) as isize);
            }
            let Some(k) = vis_l[i] else { continue };
            let d = layers[k].disparity;
            gt[i] = d as f32;
            let seen_right = x >= d && vis_r[i - d] == Some(k);
            if seen_right {
                valid[i] = true;
                left[i] = dot(k, y, x as isize - d.div_ceil(2) as isize);
            }
        }
    }
    let shape = Shape::new(1, 1, h, w);
    StereoSample::new(
        Tensor::from_vec(shape, left)?,
        Tensor::from_vec(shape, right)?,
        DisparityMap::new(h, w, gt, valid)?,
    )
}

/// `count` samples; sample `i` uses RNG stream `i` of `cfg.seed`.
pub fn gen_rds(cfg: &RdsConfig, count: usize) -> Result<Vec<StereoSample>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    cfg.validate()?;
    (0..count as u64).map(|i| gen_rds_sample(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RdsConfig {
        RdsConfig::new(48, 40, 12, 7)
    }

    #[test]
    fn deterministic() {
        let a = gen_rds(&cfg(), 3).unwrap();
        let b = gen_rds(&cfg(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn zero_disparity_is_degenerate_stereo() {
        let mut c = cfg();
        c.disparity_range = (0, 0);
        for s in gen_rds(&c, 2).unwrap() {
            assert_eq!(s.left, s.right);
            assert!(s.gt.values().iter().all(|&v| v == 0.0));
            assert_eq!(s.gt.valid_count(), 40 * 48);
        }
    }

    #[test]
    fn stereo_constraint_and_occlusions() {
        for s in gen_rds(&cfg(), 5).unwrap() {
            let (h, w) = (s.height(), s.width());
            let mut occluded = 0;
            for y in 0..h {
                for x in 0..w {
                    if !s.gt.is_valid(y, x) {
                        occluded += 1;
                        assert_eq!(s.left.at([0, 0, y, x]), 0.0);
                        continue;
                    }
                    let d = s.gt.get(y, x);
                    assert!((0.0..=12.0).contains(&d) && d.fract() == 0.0);
                    let xr = x - d as usize;
                    assert_eq!(s.left.at([0, 0, y, x]), s.right.at([0, 0, y, xr]));
                }
            }
            assert!(occluded > 0);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg();
        c.shape_size = (4, 49);
        assert!(gen_rds(&c, 1).is_err());
        let mut c = cfg();
        c.disparity_range = (0, 48);
        assert!(gen_rds(&c, 1).is_err());
        let mut c = cfg();
        c.dot_density = 1.0;
        assert!(gen_rds(&c, 1).is_err());
        assert!(gen_rds(&cfg(), 0).is_err());
    }
}
