//! Artifact mask generation.
//!
//! Stages, in order: response map, threshold, despike merge, area filter,
//! stripe/blob split, similarity growth of stripe seeds, final union.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    check_window, connected_components, gradient_magnitude, neighbors, window_values, BitMask, ComponentStats,
    Connectivity, GridError, HeightMap, MaskStage, Orientation, ScalarField,
};
use crate::stats;

/// Floor applied to seed standard deviations during growth.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("response estimator `{0}` produced values outside [0, 1]")]
    InvalidResponse(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> MaskError {
    MaskError::InvalidParam {
        field,
        reason: reason.into(),
    }
}

/// Tunables for mask generation and restoration. `None` selects the
/// data-dependent default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub thr: f64,
    pub win: usize,
    pub lam: f64,
    pub min_pix: usize,
    /// Defaults to a quarter of the image.
    pub max_pix: Option<usize>,
    pub ar: f64,
    pub k: f64,
    pub region: usize,
    /// Defaults to the 95th percentile of the gradient magnitude.
    pub grad: Option<f64>,
    pub radius: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            thr: 0.5,
            win: 5,
            lam: 3.0,
            min_pix: 10,
            max_pix: None,
            ar: 3.0,
            k: 2.0,
            region: 7,
            grad: None,
            radius: 3,
        }
    }
}

/// Description of one tunable for help screens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamHelp {
    pub name: &'static str,
    pub description: &'static str,
    pub default: serde_json::Value,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub recommended: [f64; 2],
    pub constraint: &'static str,
}

impl PipelineParams {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(0.0..=1.0).contains(&self.thr) {
            return Err(invalid("thr", format!("{} is outside [0, 1]", self.thr)));
        }
        if self.win < 3 || self.win % 2 == 0 {
            return Err(invalid("win", format!("{} must be odd and >= 3", self.win)));
        }
        if !(self.lam > 0.0 && self.lam.is_finite()) {
            return Err(invalid("lam", format!("{} must be > 0", self.lam)));
        }
        if let Some(max) = self.max_pix {
            if max < self.min_pix {
                return Err(invalid("max_pix", format!("{max} is below min_pix {}", self.min_pix)));
            }
        }
        if !(self.ar >= 1.0 && self.ar.is_finite()) {
            return Err(invalid("ar", format!("{} must be >= 1", self.ar)));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(invalid("k", format!("{} must be > 0", self.k)));
        }
        if self.region < 3 || self.region % 2 == 0 {
            return Err(invalid("region", format!("{} must be odd and >= 3", self.region)));
        }
        if let Some(g) = self.grad {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(invalid("grad", format!("{g} must be >= 0")));
            }
        }
        if self.radius < 1 {
            return Err(invalid("radius", "must be >= 1"));
        }
        Ok(())
    }

    pub fn resolved_max_pix(&self, rows: usize, cols: usize) -> usize {
        self.max_pix.unwrap_or(rows * cols / 4).max(self.min_pix)
    }

    pub fn help() -> Vec<ParamHelp> {
        let d = PipelineParams::default();
        vec![
            ParamHelp {
                name: "thr",
                description: "Response threshold; pixels with response >= thr enter the raw mask.",
                default: d.thr.into(),
                min: Some(0.0),
                max: Some(1.0),
                recommended: [0.3, 0.7],
                constraint: "0 <= thr <= 1",
            },
            ParamHelp {
                name: "win",
                description: "Sliding window size for spike detection.",
                default: d.win.into(),
                min: Some(3.0),
                max: None,
                recommended: [3.0, 9.0],
                constraint: "odd integer >= 3",
            },
            ParamHelp {
                name: "lam",
                description: "Spike threshold in window standard deviations.",
                default: d.lam.into(),
                min: Some(0.0),
                max: None,
                recommended: [2.0, 5.0],
                constraint: "lam > 0",
            },
            ParamHelp {
                name: "min_pix",
                description: "Smallest component area kept by the area filter.",
                default: d.min_pix.into(),
                min: Some(0.0),
                max: None,
                recommended: [5.0, 50.0],
                constraint: "integer >= 0",
            },
            ParamHelp {
                name: "max_pix",
                description: "Largest component area kept; null means a quarter of the image.",
                default: serde_json::Value::Null,
                min: Some(0.0),
                max: None,
                recommended: [1000.0, 100000.0],
                constraint: "integer >= min_pix, or null",
            },
            ParamHelp {
                name: "ar",
                description: "Aspect ratio at or above which a component is treated as a stripe.",
                default: d.ar.into(),
                min: Some(1.0),
                max: None,
                recommended: [2.0, 6.0],
                constraint: "ar >= 1",
            },
            ParamHelp {
                name: "k",
                description: "Similarity growth tolerance in seed standard deviations.",
                default: d.k.into(),
                min: Some(0.0),
                max: None,
                recommended: [1.0, 3.0],
                constraint: "k > 0",
            },
            ParamHelp {
                name: "region",
                description: "Window along the stripe used for local seed statistics.",
                default: d.region.into(),
                min: Some(3.0),
                max: None,
                recommended: [5.0, 15.0],
                constraint: "odd integer >= 3",
            },
            ParamHelp {
                name: "grad",
                description: "Gradient magnitude cap for growth; null means the 95th percentile.",
                default: serde_json::Value::Null,
                min: Some(0.0),
                max: None,
                recommended: [0.0, 10.0],
                constraint: "grad >= 0, or null",
            },
            ParamHelp {
                name: "radius",
                description: "Inpainting neighborhood radius in pixels.",
                default: d.radius.into(),
                min: Some(1.0),
                max: None,
                recommended: [2.0, 7.0],
                constraint: "integer >= 1",
            },
        ]
    }
}

/// Per-pixel artifact likelihood in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ResponseMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn is_valid(&self) -> bool {
        self.values.len() == self.rows * self.cols && self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Source of the response map. Implementations must return values in
/// `[0, 1]` with the map's shape.
pub trait ResponseEstimator: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, map: &HeightMap, params: &PipelineParams) -> ResponseMap;
}

/// Classical default: the larger of a cross-line deviation score and a
/// local spike score.
///
/// The line score compares each pixel with a tilt-invariant prediction from
/// up to `reach` neighbors on each side along the perpendicular line (see
/// [`predict`]), then scales the residual by `scale` robust deviations of
/// that line's residuals. Whole-line offsets
/// therefore score high while smooth slopes score zero.
///
/// The spike score is `|h - median| / (spike_scale * lam * std)` over the
/// `win` window. With `spike_scale = 2` a pixel reaches 0.5 exactly where
/// the despike rule starts flagging it.
#[derive(Debug, Clone)]
pub struct LineDeviationEstimator {
    pub scale: f64,
    pub reach: usize,
    pub spike_scale: f64,
}

impl Default for LineDeviationEstimator {
    fn default() -> Self {
        LineDeviationEstimator {
            scale: 4.5,
            reach: 7,
            spike_scale: 2.0,
        }
    }
}

const MAD_TO_SIGMA: f64 = 1.4826;

impl LineDeviationEstimator {
    /// Scores against predictions along each column (flags horizontal
    /// features), row-major output.
    fn column_scores(&self, map: &HeightMap) -> Vec<f64> {
        let (rows, cols) = map.shape();
        let per_col: Vec<Vec<f64>> = (0..cols)
            .into_par_iter()
            .map(|c| self.line_scores(&map.column(c)))
            .collect();
        let mut out = vec![0.0; rows * cols];
        for (c, scores) in per_col.iter().enumerate() {
            for (r, s) in scores.iter().enumerate() {
                out[r * cols + c] = *s;
            }
        }
        out
    }

    fn line_scores(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let reach = self.reach.max(1);
        let mut left = Vec::with_capacity(reach);
        let mut right = Vec::with_capacity(reach);
        let residuals: Vec<f64> = (0..n)
            .map(|i| {
                left.clear();
                left.extend_from_slice(&x[i.saturating_sub(reach)..i]);
                right.clear();
                right.extend_from_slice(&x[i + 1..(i + 1 + reach).min(n)]);
                match predict(x, i, reach, &mut left, &mut right) {
                    Some(p) => x[i] - p,
                    None => 0.0,
                }
            })
            .collect();
        let center = stats::median(&residuals);
        let spread = (MAD_TO_SIGMA * stats::mad(&residuals, center)).max(SIGMA_FLOOR);
        residuals
            .iter()
            .map(|e| (e - center).abs() / (self.scale * spread))
            .collect()
    }
}

/// Prediction of `x[i]` from the medians of the neighbors on each side.
///
/// The median of `m` evenly spaced samples of a linear trend equals the
/// trend at their centroid, `(m + 1) / 2` steps away, so interpolating the
/// two side medians at those distances is exact on tilted lines. Near a
/// line end the short side is dropped and the long side is extrapolated
/// from two consecutive blocks, so a stripe next to the edge cannot
/// dominate a one- or two-sample median.
fn predict(x: &[f64], i: usize, reach: usize, left: &mut [f64], right: &mut [f64]) -> Option<f64> {
    let (nl, nr) = (left.len(), right.len());
    let n = x.len();
    let two_sided = |left: &mut [f64], right: &mut [f64]| {
        let dl = (left.len() as f64 + 1.0) / 2.0;
        let dr = (right.len() as f64 + 1.0) / 2.0;
        let ml = stats::median_in_place(left);
        let mr = stats::median_in_place(right);
        (ml * dr + mr * dl) / (dl + dr)
    };
    if nl == reach && nr == reach {
        return Some(two_sided(left, right));
    }
    // blocks at distances 1..=reach and reach+1..=2*reach on one side
    let blocks = if nr >= nl && i + 2 * reach < n {
        Some((&x[i + 1..=i + reach], &x[i + reach + 1..=i + 2 * reach]))
    } else if nl > nr && i >= 2 * reach {
        Some((&x[i - reach..i], &x[i - 2 * reach..i - reach]))
    } else {
        None
    };
    match blocks {
        Some((near, far)) => {
            let m_near = stats::median(near);
            let m_far = stats::median(far);
            let d_near = (reach as f64 + 1.0) / 2.0;
            Some(m_near - (m_far - m_near) * d_near / reach as f64)
        }
        None if nl > 0 && nr > 0 => Some(two_sided(left, right)),
        None => None,
    }
}

impl ResponseEstimator for LineDeviationEstimator {
    fn name(&self) -> &str {
        "line-deviation"
    }

    fn estimate(&self, map: &HeightMap, params: &PipelineParams) -> ResponseMap {
        let (rows, cols) = map.shape();
        let vertical = self.column_scores(map);
        let horizontal_t = self.column_scores(&map.transpose());
        let spike = spike_scores(map, params.win, self.spike_scale * params.lam);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = vertical[r * cols + c];
                let h = horizontal_t[c * rows + r];
                let s = spike[r * cols + c];
                values.push(v.max(h).max(s).clamp(0.0, 1.0));
            }
        }
        ResponseMap { rows, cols, values }
    }
}

fn spike_scores(map: &HeightMap, win: usize, lam: f64) -> Vec<f64> {
    let (rows, cols) = map.shape();
    (0..rows * cols)
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let (r, c) = (idx / cols, idx % cols);
            window_values(map, r, c, win, buf);
            let (_, std) = stats::mean_std(buf);
            let med = stats::median_in_place(buf);
            if std == 0.0 {
                0.0
            } else {
                (map.get(r, c) - med).abs() / (lam * std)
            }
        })
        .collect()
}

pub fn response_map(map: &HeightMap, params: &PipelineParams) -> ResponseMap {
    LineDeviationEstimator::default().estimate(map, params)
}

/// Raw mask: `P >= thr`.
pub fn threshold_mask(response: &ResponseMap, thr: f64) -> BitMask {
    let bits = response.values.iter().map(|&p| p >= thr).collect();
    BitMask::from_bits(response.rows, response.cols, bits, MaskStage::Raw).expect("response shape")
}

/// Flags `|h - window_median| > lam * window_std` over clipped windows;
/// flat windows flag nothing.
pub fn detect_spikes(map: &HeightMap, win: usize, lam: f64) -> Result<BitMask, MaskError> {
    check_window(win)?;
    if !(lam > 0.0 && lam.is_finite()) {
        return Err(invalid("lam", format!("{lam} must be > 0")));
    }
    let (rows, cols) = map.shape();
    let bits: Vec<bool> = (0..rows * cols)
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let (r, c) = (idx / cols, idx % cols);
            window_values(map, r, c, win, buf);
            let (_, std) = stats::mean_std(buf);
            let med = stats::median_in_place(buf);
            std > 0.0 && (map.get(r, c) - med).abs() > lam * std
        })
        .collect();
    Ok(BitMask::from_bits(rows, cols, bits, MaskStage::Spike)?)
}

pub fn merge_despike(raw: &BitMask, spike: &BitMask) -> Result<BitMask, MaskError> {
    Ok(raw.union(spike)?.relabel(MaskStage::Spike))
}

/// Components with `min_pix <= area <= max_pix`.
pub fn area_filter_components(
    mask: &BitMask,
    min_pix: usize,
    max_pix: usize,
    connectivity: Connectivity,
) -> Vec<ComponentStats> {
    connected_components(mask, connectivity)
        .into_iter()
        .filter(|c| (min_pix..=max_pix).contains(&c.area))
        .collect()
}

pub fn area_filter(mask: &BitMask, min_pix: usize, max_pix: usize, connectivity: Connectivity) -> BitMask {
    let mut out = BitMask::empty(mask.rows(), mask.cols(), MaskStage::Filtered);
    for comp in area_filter_components(mask, min_pix, max_pix, connectivity) {
        for &(r, c) in &comp.pixel_indices {
            out.set(r, c, true);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Stripe,
    Blob,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedComponent {
    pub stats: ComponentStats,
    pub kind: ComponentKind,
}

/// Stripes have `aspect_ratio >= ar`.
pub fn split_stripes_blobs(components: Vec<ComponentStats>, ar: f64) -> (Vec<ComponentStats>, Vec<ComponentStats>) {
    components.into_iter().partition(|c| c.aspect_ratio >= ar)
}

/// Location and scale estimator for seed statistics during growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedStats {
    /// Mean and population standard deviation.
    Moments,
    /// Median and 1.4826 × median absolute deviation; insensitive to the
    /// background pixels a thresholded seed usually drags along.
    #[default]
    Robust,
}

/// Seed statistics over a sliding window along the seed's long axis,
/// precomputed per axis coordinate.
struct SeedProfile {
    horizontal: bool,
    start: usize,
    end: usize,
    location: Vec<f64>,
    scale: Vec<f64>,
}

impl SeedProfile {
    fn new(map: &HeightMap, seed: &ComponentStats, region: usize, mode: SeedStats) -> Self {
        let horizontal = seed.orientation == Orientation::Horizontal;
        let (start, end) = if horizontal {
            (seed.bbox.min_col, seed.bbox.max_col)
        } else {
            (seed.bbox.min_row, seed.bbox.max_row)
        };
        let len = end - start + 1;
        // Statistics come from the seed's core lines, those at least half as
        // populated as the fullest one, so salt attached to a stripe does
        // not drag the location toward the background.
        let (line_of, line_base, line_len) = if horizontal {
            (0usize, seed.bbox.min_row, seed.bbox.max_row - seed.bbox.min_row + 1)
        } else {
            (1usize, seed.bbox.min_col, seed.bbox.max_col - seed.bbox.min_col + 1)
        };
        let line = |r: usize, c: usize| if line_of == 0 { r } else { c } - line_base;
        let mut per_line = vec![0usize; line_len];
        for &(r, c) in &seed.pixel_indices {
            per_line[line(r, c)] += 1;
        }
        let fullest = per_line.iter().copied().max().unwrap_or(0);
        let core: Vec<(usize, usize)> = seed
            .pixel_indices
            .iter()
            .copied()
            .filter(|&(r, c)| 2 * per_line[line(r, c)] >= fullest)
            .collect();
        // Pixels past a stripe's end get flagged by the other axis and
        // carry background heights; keep the ones that stand out from the
        // lines on either side at least half as much as the typical one.
        let member = seed.to_mask(map.rows(), map.cols(), MaskStage::Raw);
        let contrast: Vec<Option<f64>> = core.iter().map(|&(r, c)| cross_contrast(map, &member, r, c, horizontal)).collect();
        let mut magnitudes: Vec<f64> = contrast.iter().flatten().map(|v| v.abs()).collect();
        let cut = if magnitudes.is_empty() { 0.0 } else { 0.5 * stats::median_in_place(&mut magnitudes) };
        let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); len];
        for (&(r, c), k) in core.iter().zip(&contrast) {
            if k.is_none_or(|v| v.abs() >= cut) {
                let t = if horizontal { c } else { r } - start;
                buckets[t].push(map.get(r, c));
            }
        }
        let half = region / 2;
        let mut location = Vec::with_capacity(len);
        let mut scale = Vec::with_capacity(len);
        let mut window = Vec::new();
        for t in 0..len {
            window.clear();
            let mut reach = half;
            while window.is_empty() {
                for b in &buckets[t.saturating_sub(reach)..=(t + reach).min(len - 1)] {
                    window.extend_from_slice(b);
                }
                reach = reach.max(1) * 2;
            }
            let (mu, sigma) = match mode {
                SeedStats::Moments => stats::mean_std(&window),
                SeedStats::Robust => {
                    let med = stats::median(&window);
                    (med, MAD_TO_SIGMA * stats::mad(&window, med))
                }
            };
            location.push(mu);
            scale.push(sigma);
        }
        SeedProfile {
            horizontal,
            start,
            end,
            location,
            scale,
        }
    }

    /// `(location, scale)` of seed pixels within `region / 2` of the
    /// projection of `(r, c)` clamped onto the seed's extent.
    fn stats_at(&self, r: usize, c: usize) -> (f64, f64) {
        let t = if self.horizontal { c } else { r }.clamp(self.start, self.end) - self.start;
        (self.location[t], self.scale[t])
    }
}

/// Height of `(r, c)` above the mean of the nearest non-seed pixels on the
/// neighboring lines (above and below for horizontal seeds).
fn cross_contrast(map: &HeightMap, member: &BitMask, r: usize, c: usize, horizontal: bool) -> Option<f64> {
    let (rows, cols) = map.shape();
    let (pos, limit) = if horizontal { (r, rows) } else { (c, cols) };
    let at = |p: usize| if horizontal { (p, c) } else { (r, p) };
    let before = (0..pos).rev().map(at).find(|&(rr, cc)| !member.get(rr, cc));
    let after = (pos + 1..limit).map(at).find(|&(rr, cc)| !member.get(rr, cc));
    let refs: Vec<f64> = [before, after].into_iter().flatten().map(|(rr, cc)| map.get(rr, cc)).collect();
    (!refs.is_empty()).then(|| map.get(r, c) - refs.iter().sum::<f64>() / refs.len() as f64)
}

/// Breadth-first growth of a stripe seed over 8-connected neighbors that
/// match the seed's local statistics within `k` deviations and whose
/// gradient magnitude does not exceed `grad`.
pub fn expand_by_similarity(map: &HeightMap, seed: &ComponentStats, k: f64, region: usize, grad: f64) -> BitMask {
    let gradient = gradient_magnitude(map);
    expand_with_gradient(map, &gradient, seed, k, region, grad, SeedStats::default())
}

pub(crate) fn expand_with_gradient(
    map: &HeightMap,
    gradient: &ScalarField,
    seed: &ComponentStats,
    k: f64,
    region: usize,
    grad: f64,
    mode: SeedStats,
) -> BitMask {
    let (rows, cols) = map.shape();
    let mut out = seed.to_mask(rows, cols, MaskStage::Expanded);
    if seed.pixel_indices.is_empty() {
        return out;
    }
    let profile = SeedProfile::new(map, seed, region.max(1), mode);
    let mut tested = vec![false; rows * cols];
    let mut queue: VecDeque<(usize, usize)> = seed.pixel_indices.iter().copied().collect();
    for &(r, c) in &seed.pixel_indices {
        tested[r * cols + c] = true;
    }
    while let Some((r, c)) = queue.pop_front() {
        for (nr, nc) in neighbors(r, c, rows, cols, Connectivity::Eight) {
            let idx = nr * cols + nc;
            if tested[idx] {
                continue;
            }
            tested[idx] = true;
            let (mu, sigma) = profile.stats_at(nr, nc);
            let similar = (map.get(nr, nc) - mu).abs() <= k * sigma.max(SIGMA_FLOOR);
            if similar && gradient.get(nr, nc) <= grad {
                out.set(nr, nc, true);
                queue.push_back((nr, nc));
            }
        }
    }
    out
}

/// Union of grown stripes and blob pixels.
pub fn assemble_final(rows: usize, cols: usize, expanded_stripes: &[BitMask], blobs: &[ComponentStats]) -> Result<BitMask, MaskError> {
    let mut out = BitMask::empty(rows, cols, MaskStage::Final);
    for m in expanded_stripes {
        out = out.union(m)?;
    }
    for b in blobs {
        for &(r, c) in &b.pixel_indices {
            out.set(r, c, true);
        }
    }
    Ok(out.relabel(MaskStage::Final))
}

/// Every intermediate of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBundle {
    pub response: ResponseMap,
    pub raw: BitMask,
    pub spike: BitMask,
    pub filtered: BitMask,
    /// Final mask: grown stripes plus blobs.
    pub expanded: BitMask,
    pub components: Vec<TaggedComponent>,
    pub grad_threshold: f64,
}

impl MaskBundle {
    pub fn stripes(&self) -> impl Iterator<Item = &ComponentStats> {
        self.components.iter().filter(|c| c.kind == ComponentKind::Stripe).map(|c| &c.stats)
    }
}

/// Settings outside the ten tunables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskOptions {
    pub connectivity: Connectivity,
    pub seed_stats: SeedStats,
}

pub fn full_mask_pipeline(map: &HeightMap, params: &PipelineParams) -> Result<MaskBundle, MaskError> {
    full_mask_pipeline_with(map, params, &LineDeviationEstimator::default(), MaskOptions::default())
}

pub fn full_mask_pipeline_with(
    map: &HeightMap,
    params: &PipelineParams,
    estimator: &dyn ResponseEstimator,
    options: MaskOptions,
) -> Result<MaskBundle, MaskError> {
    let connectivity = options.connectivity;
    params.validate()?;
    let (rows, cols) = map.shape();
    let response = estimator.estimate(map, params);
    if response.rows != rows || response.cols != cols || !response.is_valid() {
        return Err(MaskError::InvalidResponse(estimator.name().to_string()));
    }
    let raw = threshold_mask(&response, params.thr);
    let spike = detect_spikes(map, params.win, params.lam)?;
    let merged = merge_despike(&raw, &spike)?;
    let max_pix = params.resolved_max_pix(rows, cols);
    let kept = area_filter_components(&merged, params.min_pix, max_pix, connectivity);
    let mut filtered = BitMask::empty(rows, cols, MaskStage::Filtered);
    for comp in &kept {
        for &(r, c) in &comp.pixel_indices {
            filtered.set(r, c, true);
        }
    }
    let (stripes, blobs) = split_stripes_blobs(kept, params.ar);
    let gradient = gradient_magnitude(map);
    let grad_threshold = params.grad.unwrap_or_else(|| stats::percentile(&gradient.values, 95.0));
    let grown: Vec<BitMask> = stripes
        .par_iter()
        .map(|s| expand_with_gradient(map, &gradient, s, params.k, params.region, grad_threshold, options.seed_stats))
        .collect();
    let expanded = assemble_final(rows, cols, &grown, &blobs)?;
    let mut components: Vec<TaggedComponent> = stripes
        .into_iter()
        .map(|stats| TaggedComponent {
            stats,
            kind: ComponentKind::Stripe,
        })
        .chain(blobs.into_iter().map(|stats| TaggedComponent {
            stats,
            kind: ComponentKind::Blob,
        }))
        .collect();
    components.sort_by_key(|c| (c.stats.bbox.min_row, c.stats.bbox.min_col, c.stats.pixel_indices[0]));
    Ok(MaskBundle {
        response,
        raw,
        spike,
        filtered,
        expanded,
        components,
        grad_threshold,
    })
}
