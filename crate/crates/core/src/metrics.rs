//! Quality measures for flattened and restored maps and for masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flatten::{fit_line, LineDirection};
use crate::grid::{gradient_magnitude, BitMask, GridError, HeightMap};
use crate::stats;

pub use crate::flatten::tilt_removal_ratio;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("metric region is empty")]
    EmptyRegion,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Per-image measurements; absent entries were not computed for the stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sigma_bg: Option<f64>,
    pub rmse_line: Option<f64>,
    pub mean_abs_grad: Option<f64>,
    pub rho_tilt: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean local SSIM over pixels outside the restoration mask.
    pub ssim_unmasked: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
}

/// Population standard deviation over `background`.
pub fn sigma_bg(map: &HeightMap, background: &BitMask) -> Result<f64, MetricsError> {
    background.ensure_same_shape(map.rows(), map.cols())?;
    let values: Vec<f64> = background.iter_set().map(|(r, c)| map.get(r, c)).collect();
    if values.is_empty() {
        return Err(MetricsError::EmptyRegion);
    }
    Ok(stats::mean_std(&values).1)
}

fn line_sse(map: &HeightMap, direction: LineDirection, order: u8, region: Option<&BitMask>) -> (f64, usize) {
    let (map, region) = match direction {
        LineDirection::Row => (map.clone(), region.cloned()),
        LineDirection::Column => (map.transpose(), region.map(BitMask::transpose)),
    };
    let mut sse = 0.0;
    let mut count = 0usize;
    for r in 0..map.rows() {
        let valid: Option<Vec<bool>> = region.as_ref().map(|m| (0..map.cols()).map(|c| m.get(r, c)).collect());
        let line = map.row(r);
        let Some(fit) = fit_line(line, valid.as_deref(), order) else {
            continue;
        };
        for (c, &v) in line.iter().enumerate() {
            if valid.as_ref().is_none_or(|m| m[c]) {
                let e = v - fit.eval(c as f64);
                sse += e * e;
                count += 1;
            }
        }
    }
    (sse, count)
}

/// Root-mean-square residual of each line against its own order-`order`
/// least-squares fit, pooled over all pixels.
pub fn rmse_line(map: &HeightMap, direction: LineDirection, order: u8) -> f64 {
    let (sse, n) = line_sse(map, direction, order, None);
    (sse / n as f64).sqrt()
}

/// [`rmse_line`] restricted to `region`: lines are fitted on, and residuals
/// taken over, region pixels only.
pub fn rmse_line_masked(
    map: &HeightMap,
    direction: LineDirection,
    order: u8,
    region: &BitMask,
) -> Result<f64, MetricsError> {
    region.ensure_same_shape(map.rows(), map.cols())?;
    let (sse, n) = line_sse(map, direction, order, Some(region));
    if n == 0 {
        return Err(MetricsError::EmptyRegion);
    }
    Ok((sse / n as f64).sqrt())
}

/// Line residual pooled over the row and the column passes. A line flatten
/// leaves residuals along its own axis unchanged, so comparing flatten
/// variants needs both axes.
pub fn rmse_line_both(map: &HeightMap, order: u8, region: &BitMask) -> Result<f64, MetricsError> {
    region.ensure_same_shape(map.rows(), map.cols())?;
    let (a, na) = line_sse(map, LineDirection::Row, order, Some(region));
    let (b, nb) = line_sse(map, LineDirection::Column, order, Some(region));
    if na + nb == 0 {
        return Err(MetricsError::EmptyRegion);
    }
    Ok(((a + b) / (na + nb) as f64).sqrt())
}

/// Mean gradient magnitude over `region`.
pub fn mean_abs_gradient(map: &HeightMap, region: &BitMask) -> Result<f64, MetricsError> {
    region.ensure_same_shape(map.rows(), map.cols())?;
    if region.is_empty() {
        return Err(MetricsError::EmptyRegion);
    }
    let g = gradient_magnitude(map);
    let sum: f64 = region.iter_set().map(|(r, c)| g.get(r, c)).sum();
    Ok(sum / region.count() as f64)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

/// Local SSIM at every pixel: 11×11 Gaussian window (σ 1.5) clipped at the
/// borders with renormalized weights, `L` the joint data range.
pub fn ssim_map(a: &HeightMap, b: &HeightMap) -> Result<Vec<f64>, MetricsError> {
    b.ensure_same_shape(a.rows(), a.cols())?;
    let (rows, cols) = a.shape();
    let (lo_a, hi_a) = a.min_max();
    let (lo_b, hi_b) = b.min_max();
    let range = hi_a.max(hi_b) - lo_a.min(lo_b);
    if range == 0.0 {
        return Ok(vec![1.0; a.len()]);
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let kernel: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..rows {
        let r0 = r.saturating_sub(SSIM_RADIUS);
        let r1 = (r + SSIM_RADIUS).min(rows - 1);
        for c in 0..cols {
            let c0 = c.saturating_sub(SSIM_RADIUS);
            let c1w = (c + SSIM_RADIUS).min(cols - 1);
            let weight = |rr: usize, cc: usize| {
                kernel[rr + SSIM_RADIUS - r] * kernel[cc + SSIM_RADIUS - c]
            };
            let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
            for rr in r0..=r1 {
                for cc in c0..=c1w {
                    let w = weight(rr, cc);
                    wsum += w;
                    ma += w * a.get(rr, cc);
                    mb += w * b.get(rr, cc);
                }
            }
            ma /= wsum;
            mb /= wsum;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for rr in r0..=r1 {
                for cc in c0..=c1w {
                    let w = weight(rr, cc);
                    let da = a.get(rr, cc) - ma;
                    let db = b.get(rr, cc) - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            va /= wsum;
            vb /= wsum;
            cov /= wsum;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            out.push(num / den);
        }
    }
    Ok(out)
}

/// Mean local SSIM over the whole map.
pub fn ssim(a: &HeightMap, b: &HeightMap) -> Result<f64, MetricsError> {
    let local = ssim_map(a, b)?;
    Ok(local.iter().sum::<f64>() / local.len() as f64)
}

/// Mean local SSIM over pixels outside `exclude`.
pub fn ssim_excluding(a: &HeightMap, b: &HeightMap, exclude: &BitMask) -> Result<f64, MetricsError> {
    exclude.ensure_same_shape(a.rows(), a.cols())?;
    let local = ssim_map(a, b)?;
    let kept: Vec<f64> = local
        .iter()
        .zip(exclude.bits())
        .filter(|(_, &m)| !m)
        .map(|(v, _)| *v)
        .collect();
    if kept.is_empty() {
        return Err(MetricsError::EmptyRegion);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks agree perfectly.
pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64, MetricsError> {
    b.ensure_same_shape(a.rows(), a.cols())?;
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |A ∩ B| / (|A| + |B|)`; two empty masks agree perfectly.
pub fn dice(a: &BitMask, b: &BitMask) -> Result<f64, MetricsError> {
    b.ensure_same_shape(a.rows(), a.cols())?;
    let inter = a.intersection_count(b);
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Maps produced along one run of the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct StageMaps<'a> {
    pub original: &'a HeightMap,
    pub flattened: Option<&'a HeightMap>,
    pub restored: Option<&'a HeightMap>,
    /// Artifact mask; its complement is the background.
    pub mask: Option<&'a BitMask>,
    pub truth: Option<&'a BitMask>,
}

/// Metrics of the latest available stage over the background.
///
/// `rho_tilt` needs the flattened map, `ssim` and `ssim_unmasked` compare
/// the restored map against the flattened one, `iou` and `dice` need both
/// mask and truth. Metrics whose region is empty are left out.
pub fn stage_report(stages: &StageMaps<'_>, direction: LineDirection) -> Result<MetricsReport, MetricsError> {
    let (rows, cols) = stages.original.shape();
    for map in [stages.flattened, stages.restored].into_iter().flatten() {
        map.ensure_same_shape(rows, cols)?;
    }
    let background = match stages.mask {
        Some(m) => {
            m.ensure_same_shape(rows, cols)?;
            m.complement()
        }
        None => BitMask::full(rows, cols, crate::grid::MaskStage::Final),
    };
    let latest = stages.restored.or(stages.flattened).unwrap_or(stages.original);
    let mut report = MetricsReport {
        sigma_bg: sigma_bg(latest, &background).ok(),
        rmse_line: rmse_line_masked(latest, direction, 1, &background).ok(),
        mean_abs_grad: mean_abs_gradient(latest, &background).ok(),
        ..Default::default()
    };
    if let Some(flat) = stages.flattened {
        report.rho_tilt = tilt_removal_ratio(stages.original, flat, &background).ok();
        if let Some(restored) = stages.restored {
            report.ssim = Some(ssim(restored, flat)?);
            report.ssim_unmasked = match stages.mask {
                Some(m) => ssim_excluding(restored, flat, m).ok(),
                None => report.ssim,
            };
        }
    }
    if let (Some(m), Some(t)) = (stages.mask, stages.truth) {
        report.iou = Some(iou(m, t)?);
        report.dice = Some(dice(m, t)?);
    }
    Ok(report)
}
