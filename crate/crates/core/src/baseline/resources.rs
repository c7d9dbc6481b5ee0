use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{all_convs, decoder_channels, ModelConfig};
use crate::ops::{ConvGeometry, PoolWindow};

/// Flops of one convolution layer, counting a multiply-accumulate as 2.
pub fn conv_flops(kernel: usize, cin: usize, cout: usize, hout: usize, wout: usize) -> u64 {
    2 * (kernel * kernel * cin * cout * hout * wout) as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceReport {
    pub height: usize,
    pub width: usize,
    pub max_disparity: usize,
    pub feature_channels: usize,
    /// Extents of the 1/3-resolution feature maps.
    pub feature_height: usize,
    pub feature_width: usize,
    pub levels: usize,
    pub params: usize,
    /// Feature net on both images.
    pub feature_flops: u64,
    /// Matching net on one disparity level.
    pub matching_flops_per_level: u64,
    /// Matching net over all levels.
    pub matching_flops: u64,
    pub refine_flops: u64,
    pub flops: u64,
    /// One (H/3)(W/3)(2F) concatenated feature pair.
    pub sequential_peak: u64,
    /// All levels' pairs batched at once.
    pub parallel_peak: u64,
    /// The concatenated 4D feature volume a 3D-convolution matcher would hold.
    pub volume_4d_peak: u64,
}

fn extent(g: ConvGeometry, n: usize, k: usize, what: &str) -> Result<usize> {
    g.output_extent(n, k)
        .filter(|&e| e > 0)
        .ok_or_else(|| Error::invalid(format!("input too small for {what}")))
}

/// Counts parameters from the layer list and convolution flops from the
/// layer extents at an `height x width` input.
pub fn estimate_resources(cfg: &ModelConfig, height: usize, width: usize) -> Result<ResourceReport> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("extents must be positive"));
    }
    let f = cfg.feature_channels;
    let stride3 = ConvGeometry::new(3, 1, 1);
    let (h3, w3) = (
        extent(stride3, height, 3, "feature.conv0")?,
        extent(stride3, width, 3, "feature.conv0")?,
    );

    let mut feature = conv_flops(3, cfg.in_channels, f, h3, w3);
    feature += cfg.dilations.len() as u64 * conv_flops(3, f, f, h3, w3);
    for b in &cfg.spp {
        let (_, _, ph, pw) = PoolWindow::square(b.window).resolve(h3, w3)?;
        feature += conv_flops(1, f, b.channels, ph, pw);
    }
    let fused = f + cfg.spp.iter().map(|b| b.channels).sum::<usize>();
    feature += conv_flops(3, fused, cfg.fusion_channels, h3, w3);
    feature += conv_flops(1, cfg.fusion_channels, f, h3, w3);
    let feature = 2 * feature;

    let down = ConvGeometry::new(2, 1, 1);
    let mut sizes = vec![(h3, w3)];
    let (mut cin, mut matching) = (2 * f, 0u64);
    for (i, &ch) in cfg.matching_channels.iter().enumerate() {
        let (ph, pw) = sizes[i];
        let e = (
            extent(down, ph, 3, "matching encoder")?,
            extent(down, pw, 3, "matching encoder")?,
        );
        matching += conv_flops(3, cin, ch, e.0, e.1) + conv_flops(3, ch, ch, e.0, e.1);
        sizes.push(e);
        cin = ch;
    }
    let c = cfg.matching_channels;
    let skips = [c[2], c[1], c[0], 2 * f];
    for (j, (&out, &skip)) in decoder_channels(cfg).iter().zip(&skips).enumerate() {
        let (sh, sw) = sizes[3 - j];
        matching += conv_flops(3, cin + skip, out, sh, sw);
        cin = out;
    }
    matching += conv_flops(3, cin, 1, h3, w3);

    let r = cfg.refine_channels;
    let mut refine = conv_flops(3, cfg.in_channels + 2, r, height, width);
    refine += 2 * cfg.refine_dilations.len() as u64 * conv_flops(3, r, r, height, width);
    refine += conv_flops(3, r, 1, height, width);

    let levels = cfg.levels();
    let sequential = (h3 * w3 * 2 * f) as u64;
    Ok(ResourceReport {
        height,
        width,
        max_disparity: cfg.max_disparity,
        feature_channels: f,
        feature_height: h3,
        feature_width: w3,
        levels,
        params: all_convs(cfg).iter().map(|s| s.param_count()).sum(),
        feature_flops: feature,
        matching_flops_per_level: matching,
        matching_flops: matching * levels as u64,
        refine_flops: refine,
        flops: feature + matching * levels as u64 + refine,
        sequential_peak: sequential,
        parallel_peak: sequential * levels as u64,
        volume_4d_peak: (h3 * w3 * levels * 2 * f) as u64,
    })
}

impl ResourceReport {
    /// Human-readable table with the formula behind each figure.
    pub fn to_table(&self) -> String {
        let gf = |v: u64| v as f64 / 1e9;
        let (h, w, l, f2) = (
            self.feature_height,
            self.feature_width,
            self.levels,
            2 * self.feature_channels,
        );
        let mut s = String::new();
        let _ = writeln!(
            s,
            "input {}x{}, max disparity {}, {} levels, features {}x{}x{}",
            self.height, self.width, self.max_disparity, l, h, w, self.feature_channels
        );
        let _ = writeln!(s, "{:<30} {:>16}", "parameters", self.params);
        let _ = writeln!(
            s,
            "{:<30} {:>16} ({:.3} Gflops)",
            "flops (total)",
            self.flops,
            gf(self.flops)
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16} ({:.3} Gflops)",
            "  feature net, both views",
            self.feature_flops,
            gf(self.feature_flops)
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16} ({:.3} Gflops)",
            "  matching net, one level",
            self.matching_flops_per_level,
            gf(self.matching_flops_per_level)
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16} ({:.3} Gflops)",
            "  matching net, all levels",
            self.matching_flops,
            gf(self.matching_flops)
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16} ({:.3} Gflops)",
            "  refine net",
            self.refine_flops,
            gf(self.refine_flops)
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16}  = (H/3)(W/3)(2F) = {h}*{w}*{f2}",
            "peak elements, sequential", self.sequential_peak
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16}  = sequential * (D/3) = {}*{l}",
            "peak elements, parallel", self.parallel_peak, self.sequential_peak
        );
        let _ = writeln!(
            s,
            "{:<30} {:>16}  = (H/3)(W/3)(D/3)(2F) = {h}*{w}*{l}*{f2}",
            "peak elements, 4D volume", self.volume_4d_peak
        );
        s.push_str("flops count 2 per multiply-accumulate over convolutions; normalization and activations excluded\n");
        s
    }

    pub fn key_values(&self) -> String {
        format!(
            "params={} flops={} feature_flops={} matching_flops_per_level={} matching_flops={} refine_flops={} \
             sequential_peak={} parallel_peak={} volume_4d_peak={}",
            self.params,
            self.flops,
            self.feature_flops,
            self.matching_flops_per_level,
            self.matching_flops,
            self.refine_flops,
            self.sequential_peak,
            self.parallel_peak,
            self.volume_4d_peak
        )
    }
}
