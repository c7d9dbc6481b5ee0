//! Disparity quality metrics: EPE, RMSE, bad-δ percentages and A99.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::maps::DisparityMap;

/// Thresholds of the default report columns.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    pub rmse: f64,
    /// `(δ, percentage of errors > δ)` in threshold order.
    pub bad: Vec<(f64, f64)>,
    pub a99: f64,
    /// False when `a99` is a pixel-weighted mean of per-report values rather
    /// than a percentile of the pooled errors.
    pub a99_exact: bool,
    pub valid_pixel_count: usize,
    errors: Option<Vec<f64>>,
}

/// Nearest-rank percentile `p` (in percent) of ascending `sorted`.
fn nearest_rank(sorted: &[f64], p: usize) -> f64 {
    let rank = (p * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

impl MetricReport {
    /// Report over a list of absolute errors.
    pub fn from_errors(mut errors: Vec<f64>, thresholds: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("no valid pixels to evaluate"));
        }
        let n = errors.len() as f64;
        let epe = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let bad = thresholds
            .iter()
            .map(|&t| (t, 100.0 * errors.iter().filter(|&&e| e > t).count() as f64 / n))
            .collect();
        errors.sort_by(f64::total_cmp);
        Ok(MetricReport {
            epe,
            rmse,
            bad,
            a99: nearest_rank(&errors, 99),
            a99_exact: true,
            valid_pixel_count: errors.len(),
            errors: Some(errors),
        })
    }

    pub fn bad(&self, threshold: f64) -> Option<f64> {
        self.bad.iter().find(|(t, _)| *t == threshold).map(|&(_, p)| p)
    }

    /// Drops the retained error list; later aggregation falls back to a
    /// weighted A99.
    pub fn without_errors(mut self) -> Self {
        self.errors = None;
        self
    }

    /// `epe=... rmse=... bad1=... ... a99=...`
    pub fn key_values(&self) -> String {
        let mut s = format!("epe={:.6} rmse={:.6}", self.epe, self.rmse);
        for (t, p) in &self.bad {
            let _ = write!(s, " bad{}={:.4}", t, p);
        }
        let _ = write!(s, " a99={:.6} valid={}", self.a99, self.valid_pixel_count);
        if !self.a99_exact {
            s.push_str(" a99_source=weighted");
        }
        s
    }
}

/// Absolute errors over pixels where `mask` holds.
pub fn evaluate(pred: &DisparityMap, gt: &DisparityMap, mask: &[bool], thresholds: &[f64]) -> Result<MetricReport> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if mask.len() != gt.values().len() {
        return Err(Error::shape(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            gt.values().len()
        )));
    }
    let mut errors = Vec::with_capacity(mask.len());
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        if !gt.valid()[i] || !pred.valid()[i] {
            return Err(Error::invalid(format!(
                "pixel {i} is masked for evaluation but has no valid disparity"
            )));
        }
        errors.push((pred.values()[i] as f64 - gt.values()[i] as f64).abs());
    }
    MetricReport::from_errors(errors, thresholds)
}

/// Evaluation mask: valid ground truth below `max_disparity`.
pub fn valid_mask(gt: &DisparityMap, max_disparity: usize) -> Vec<bool> {
    let limit = max_disparity as f32;
    gt.values()
        .iter()
        .zip(gt.valid())
        .map(|(&v, &ok)| ok && v < limit)
        .collect()
}

/// [`evaluate`] over the [`valid_mask`] of `gt`.
pub fn evaluate_maps(
    pred: &DisparityMap,
    gt: &DisparityMap,
    max_disparity: usize,
    thresholds: &[f64],
) -> Result<MetricReport> {
    evaluate(pred, gt, &valid_mask(gt, max_disparity), thresholds)
}

/// Pixel-weighted combination. Thresholds missing from any report are
/// dropped.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let total: usize = reports.iter().map(|r| r.valid_pixel_count).sum();
    let n = total as f64;
    let weighted =
        |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(|r| r.valid_pixel_count as f64 * f(r)).sum::<f64>() / n;
    let bad = first
        .bad
        .iter()
        .filter_map(|&(t, _)| {
            let all: Option<Vec<f64>> = reports.iter().map(|r| r.bad(t)).collect();
            all.map(|_| (t, weighted(&|r| r.bad(t).unwrap_or(0.0))))
        })
        .collect();
    let pooled: Option<Vec<f64>> = reports
        .iter()
        .map(|r| r.errors.as_ref())
        .collect::<Option<Vec<_>>>()
        .map(|lists| {
            let mut all: Vec<f64> = lists.into_iter().flatten().copied().collect();
            all.sort_by(f64::total_cmp);
            all
        });
    let (a99, a99_exact) = match &pooled {
        Some(all) => (nearest_rank(all, 99), true),
        None => (weighted(&|r| r.a99), false),
    };
    Ok(MetricReport {
        epe: weighted(&|r| r.epe),
        rmse: weighted(&|r| r.rmse * r.rmse).sqrt(),
        bad,
        a99,
        a99_exact,
        valid_pixel_count: total,
        errors: pooled,
    })
}

/// Aligned plain-text table, one row per labelled report.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<label_w$} {:>10} {:>10}", "image", "epe", "rmse");
    if let Some((_, r)) = rows.first() {
        for (t, _) in &r.bad {
            let _ = write!(out, " {:>9}", format!("bad-{t:.1}"));
        }
    }
    let _ = writeln!(out, " {:>10} {:>9}", "a99", "valid");
    for (label, r) in rows {
        let _ = write!(out, "{label:<label_w$} {:>10.4} {:>10.4}", r.epe, r.rmse);
        for (_, p) in &r.bad {
            let _ = write!(out, " {p:>9.3}");
        }
        let _ = writeln!(out, " {:>10.4} {:>9}", r.a99, r.valid_pixel_count);
    }
    out
}
