//! Mask-guided restoration: stripe expansion, directional and fast-marching
//! inpainting, bilinear and kriging baselines, localized smoothing.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{connected_components, BitMask, ComponentStats, Connectivity, GridError, HeightMap, MaskStage, Orientation};
use crate::linalg;
use crate::maskgen::{MaskBundle, PipelineParams};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RestoreError {
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("every pixel is masked; nothing to restore from")]
    AllMasked,
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> RestoreError {
    RestoreError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreMethod {
    #[default]
    Directional,
    FastMarching,
    Bilinear,
    Kriging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintDirection {
    Row,
    Column,
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreConfig {
    pub method: RestoreMethod,
    /// Fast-marching neighborhood radius in pixels.
    pub radius: usize,
    pub smooth_sigma: f64,
    pub full_expand: bool,
    pub variogram: VariogramParams,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig {
            method: RestoreMethod::Directional,
            radius: 3,
            smooth_sigma: 1.5,
            full_expand: true,
            variogram: VariogramParams::default(),
        }
    }
}

impl RestoreConfig {
    pub fn validate(&self) -> Result<(), RestoreError> {
        if self.radius < 1 {
            return Err(invalid("radius", "must be >= 1"));
        }
        if !(self.smooth_sigma > 0.0 && self.smooth_sigma.is_finite()) {
            return Err(invalid("smooth_sigma", format!("{} must be > 0", self.smooth_sigma)));
        }
        self.variogram.validate()
    }
}

/// Exponential variogram `nugget + sill * (1 - exp(-d / range))` for `d > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariogramParams {
    pub nugget: f64,
    /// `None` uses the variance of the unmasked pixels.
    pub sill: Option<f64>,
    pub range: f64,
    pub neighbors: usize,
}

impl Default for VariogramParams {
    fn default() -> Self {
        VariogramParams {
            nugget: 0.0,
            sill: None,
            range: 10.0,
            neighbors: 16,
        }
    }
}

impl VariogramParams {
    pub fn validate(&self) -> Result<(), RestoreError> {
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(invalid("nugget", format!("{} must be >= 0", self.nugget)));
        }
        if let Some(s) = self.sill {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("sill", format!("{s} must be > 0")));
            }
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(invalid("range", format!("{} must be > 0", self.range)));
        }
        if self.neighbors < 4 {
            return Err(invalid("neighbors", format!("{} must be >= 4", self.neighbors)));
        }
        Ok(())
    }

    pub fn gamma(&self, sill: f64, d: f64) -> f64 {
        if d == 0.0 {
            0.0
        } else {
            self.nugget + sill * (1.0 - (-d / self.range).exp())
        }
    }
}

/// Masks whole rows (horizontal) or columns (vertical) spanned by each
/// stripe component, keeping everything already in `mask`.
pub fn expand_stripe_full(mask: &BitMask, components: &[ComponentStats], ar: f64) -> BitMask {
    let (rows, cols) = mask.shape();
    let mut out = mask.clone().relabel(MaskStage::Expanded);
    for comp in components.iter().filter(|c| c.aspect_ratio >= ar) {
        let b = comp.bbox;
        match comp.orientation {
            Orientation::Horizontal => {
                for r in b.min_row..=b.max_row {
                    for c in 0..cols {
                        out.set(r, c, true);
                    }
                }
            }
            Orientation::Vertical => {
                for c in b.min_col..=b.max_col {
                    for r in 0..rows {
                        out.set(r, c, true);
                    }
                }
            }
        }
    }
    out
}

fn valid_mean(map: &HeightMap, mask: &BitMask) -> Result<f64, RestoreError> {
    let values: Vec<f64> = map
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| !m)
        .map(|(v, _)| *v)
        .collect();
    if values.is_empty() {
        return Err(RestoreError::AllMasked);
    }
    Ok(stats::mean_std(&values).0)
}

/// Fill of one masked run along a line, with the run length.
#[derive(Debug, Clone, Copy)]
struct RunFill {
    value: f64,
    run: usize,
}

/// Per-pixel fills along rows of `(values, masked)`, `None` where the run
/// has no valid pixel on either side.
fn line_fills(values: &[f64], masked: &[bool], rows: usize, cols: usize) -> Vec<Option<RunFill>> {
    let mut out = vec![None; rows * cols];
    for r in 0..rows {
        let line = &values[r * cols..(r + 1) * cols];
        let m = &masked[r * cols..(r + 1) * cols];
        let mut c = 0;
        while c < cols {
            if !m[c] {
                c += 1;
                continue;
            }
            let start = c;
            while c < cols && m[c] {
                c += 1;
            }
            let end = c;
            let run = end - start;
            let left = start.checked_sub(1).map(|i| (i, line[i]));
            let right = (end < cols).then(|| (end, line[end]));
            for i in start..end {
                let value = match (left, right) {
                    (Some((a, va)), Some((b, vb))) => va + (vb - va) * ((i - a) as f64 / (b - a) as f64),
                    (Some((_, v)), None) | (None, Some((_, v))) => v,
                    (None, None) => continue,
                };
                out[r * cols + i] = Some(RunFill { value, run });
            }
        }
    }
    out
}

fn transpose<T: Copy>(values: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(values[r * cols + c]);
        }
    }
    out
}

/// Row and column fills in row-major order.
fn axis_fills(map: &HeightMap, mask: &BitMask) -> (Vec<Option<RunFill>>, Vec<Option<RunFill>>) {
    let (rows, cols) = map.shape();
    let by_row = line_fills(map.data(), mask.bits(), rows, cols);
    let by_col_t = line_fills(&transpose(map.data(), rows, cols), &transpose(mask.bits(), rows, cols), cols, rows);
    (by_row, transpose(&by_col_t, cols, rows))
}

/// Fills masked runs by linear interpolation between the nearest valid
/// pixels along the chosen axis, constant extension for one-sided runs.
/// Runs with no valid pixel on the axis use the perpendicular axis, then
/// the mean of valid pixels. `Auto` picks the axis with the shorter run.
pub fn directional_inpaint(map: &HeightMap, mask: &BitMask, direction: InpaintDirection) -> Result<HeightMap, RestoreError> {
    mask.ensure_same_shape(map.rows(), map.cols())?;
    if mask.is_empty() {
        return Ok(map.clone());
    }
    let mean = valid_mean(map, mask)?;
    let (by_row, by_col) = axis_fills(map, mask);
    let mut data = map.data().to_vec();
    for (i, &m) in mask.bits().iter().enumerate() {
        if !m {
            continue;
        }
        let pick = match (direction, by_row[i], by_col[i]) {
            (InpaintDirection::Row, Some(f), _) | (InpaintDirection::Column, _, Some(f)) => Some(f),
            (InpaintDirection::Auto, Some(a), Some(b)) => Some(if b.run < a.run { b } else { a }),
            (_, a, b) => a.or(b),
        };
        data[i] = pick.map_or(mean, |f| f.value);
    }
    Ok(map.with_data(data)?)
}

/// Mean of the row and column fills where both exist, whichever exists
/// otherwise, the valid mean where neither does.
pub fn bilinear_inpaint(map: &HeightMap, mask: &BitMask) -> Result<HeightMap, RestoreError> {
    mask.ensure_same_shape(map.rows(), map.cols())?;
    if mask.is_empty() {
        return Ok(map.clone());
    }
    let mean = valid_mean(map, mask)?;
    let (by_row, by_col) = axis_fills(map, mask);
    let mut data = map.data().to_vec();
    for (i, &m) in mask.bits().iter().enumerate() {
        if m {
            data[i] = match (by_row[i], by_col[i]) {
                (Some(a), Some(b)) => (a.value + b.value) / 2.0,
                (Some(f), None) | (None, Some(f)) => f.value,
                (None, None) => mean,
            };
        }
    }
    Ok(map.with_data(data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flag {
    Known,
    Band,
    Inside,
}

/// Heap entry ordered by smallest `(t, row, col)` first.
#[derive(Debug, Clone, Copy)]
struct Front {
    t: f64,
    r: usize,
    c: usize,
}

impl PartialEq for Front {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Front {}

impl PartialOrd for Front {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Front {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.r.cmp(&self.r))
            .then_with(|| other.c.cmp(&self.c))
    }
}

struct March {
    rows: usize,
    cols: usize,
    flag: Vec<Flag>,
    t: Vec<f64>,
    heap: BinaryHeap<Front>,
}

const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

impl March {
    fn new(mask: &BitMask) -> Result<Self, RestoreError> {
        let (rows, cols) = mask.shape();
        if mask.count() == rows * cols {
            return Err(RestoreError::AllMasked);
        }
        let flag: Vec<Flag> = mask.bits().iter().map(|&m| if m { Flag::Inside } else { Flag::Known }).collect();
        let t: Vec<f64> = mask.bits().iter().map(|&m| if m { f64::INFINITY } else { 0.0 }).collect();
        let mut march = March {
            rows,
            cols,
            flag,
            t,
            heap: BinaryHeap::new(),
        };
        for r in 0..rows {
            for c in 0..cols {
                if !mask.get(r, c) && march.four(r, c).any(|(nr, nc)| mask.get(nr, nc)) {
                    march.flag[r * cols + c] = Flag::Band;
                    march.heap.push(Front { t: 0.0, r, c });
                }
            }
        }
        Ok(march)
    }

    fn at(&self, r: isize, c: isize) -> Option<usize> {
        (r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols).then(|| r as usize * self.cols + c as usize)
    }

    fn four(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        FOUR.iter().filter_map(move |&(dr, dc)| {
            self.at(r as isize + dr, c as isize + dc).map(|i| (i / self.cols, i % self.cols))
        })
    }

    fn settled_t(&self, r: isize, c: isize) -> Option<f64> {
        self.at(r, c).filter(|&i| self.flag[i] != Flag::Inside).map(|i| self.t[i])
    }

    /// Eikonal update from one horizontal and one vertical neighbor.
    fn solve_pair(&self, a: Option<f64>, b: Option<f64>) -> f64 {
        match (a, b) {
            (Some(t1), Some(t2)) => {
                let d = t1 - t2;
                if d.abs() >= 1.0 {
                    1.0 + t1.min(t2)
                } else {
                    let s = (t1 + t2 + (2.0 - d * d).sqrt()) / 2.0;
                    s.max(t1).max(t2)
                }
            }
            (Some(t), None) | (None, Some(t)) => 1.0 + t,
            (None, None) => f64::INFINITY,
        }
    }

    fn arrival(&self, r: usize, c: usize) -> f64 {
        let (r, c) = (r as isize, c as isize);
        let mut best = f64::INFINITY;
        for dr in [-1, 1] {
            for dc in [-1, 1] {
                best = best.min(self.solve_pair(self.settled_t(r + dr, c), self.settled_t(r, c + dc)));
            }
        }
        best
    }

    /// Gradient of `t` at `(r, c)` from settled neighbors.
    fn t_gradient(&self, r: usize, c: usize) -> (f64, f64) {
        let (ri, ci) = (r as isize, c as isize);
        let here = self.t[r * self.cols + c];
        let diff = |minus: Option<f64>, plus: Option<f64>| match (minus, plus) {
            (Some(m), Some(p)) => (p - m) / 2.0,
            (Some(m), None) => here - m,
            (None, Some(p)) => p - here,
            (None, None) => 0.0,
        };
        (
            diff(self.settled_t(ri - 1, ci), self.settled_t(ri + 1, ci)),
            diff(self.settled_t(ri, ci - 1), self.settled_t(ri, ci + 1)),
        )
    }
}

/// Gradient at `(r, c)` from a least-squares plane through the pixels
/// outside the hole within `radius`; single-pixel differences would carry
/// the full noise into every extrapolation.
fn value_gradient(march: &March, values: &[f64], r: usize, c: usize, radius: usize) -> (f64, f64) {
    let rad = radius as isize;
    let mut pts = Vec::new();
    for dr in -rad..=rad {
        for dc in -rad..=rad {
            if let Some(i) = march.at(r as isize + dr, c as isize + dc).filter(|&i| march.t[i] == 0.0) {
                pts.push((dr as f64, dc as f64, values[i]));
            }
        }
    }
    let n = pts.len() as f64;
    // heights relative to the first sample keep constant patches exactly flat
    let v0 = pts.first().map_or(0.0, |p| p.2);
    for p in &mut pts {
        p.2 -= v0;
    }
    let (mr, mc, mv) = pts
        .iter()
        .fold((0.0, 0.0, 0.0), |(a, b, v), p| (a + p.0 / n, b + p.1 / n, v + p.2 / n));
    let (mut srr, mut scc, mut src, mut srv, mut scv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(pr, pc, v) in &pts {
        let (dr, dc, dv) = (pr - mr, pc - mc, v - mv);
        srr += dr * dr;
        scc += dc * dc;
        src += dr * dc;
        srv += dr * dv;
        scv += dc * dv;
    }
    let det = srr * scc - src * src;
    if det <= 1e-9 * (srr * scc).max(1e-300) {
        // collinear support: slope along the one axis that has spread
        return (if srr > 0.0 { srv / srr } else { 0.0 }, if scc > 0.0 { scv / scc } else { 0.0 });
    }
    ((srv * scc - scv * src) / det, (scv * srr - srv * src) / det)
}

/// Telea estimate at `(r, c)`: first-order extrapolations from settled
/// pixels within `radius`, weighted by direction, distance and level.
/// Returns the value and the same weighted mean of the contributing
/// gradients. Filled pixels carry that transported gradient instead of a
/// finite difference of filled values, which compounds noise across wide
/// holes.
fn telea_value(
    march: &March,
    values: &[f64],
    grads: &mut [Option<(f64, f64)>],
    r: usize,
    c: usize,
    radius: usize,
) -> (f64, (f64, f64)) {
    let (gr, gc) = march.t_gradient(r, c);
    let norm = (gr * gr + gc * gc).sqrt();
    let t_here = march.t[r * march.cols + c];
    let rad = radius as isize;
    let mut reference = None;
    let (mut acc, mut wsum, mut acc_r, mut acc_c) = (0.0, 0.0, 0.0, 0.0);
    for dr in -rad..=rad {
        for dc in -rad..=rad {
            let d2 = (dr * dr + dc * dc) as f64;
            if d2 == 0.0 || d2 > (radius * radius) as f64 {
                continue;
            }
            let Some(i) = march.at(r as isize + dr, c as isize + dc) else {
                continue;
            };
            if march.flag[i] == Flag::Inside {
                continue;
            }
            let (qr, qc) = (i / march.cols, i % march.cols);
            // p - q
            let (vr, vc) = (-dr as f64, -dc as f64);
            let dist = d2.sqrt();
            let dir = if norm > 0.0 {
                ((vr * gr + vc * gc) / (dist * norm)).abs().max(1e-6)
            } else {
                1.0
            };
            let dst = 1.0 / d2;
            let lev = 1.0 / (1.0 + (march.t[i] - t_here).abs());
            let w = dir * dst * lev;
            let (ir, ic) = *grads[i].get_or_insert_with(|| value_gradient(march, values, qr, qc, radius));
            let base = *reference.get_or_insert(values[i]);
            acc += w * (values[i] - base + ir * vr + ic * vc);
            acc_r += w * ir;
            acc_c += w * ic;
            wsum += w;
        }
    }
    match reference {
        Some(base) => (base + acc / wsum, (acc_r / wsum, acc_c / wsum)),
        None => (values[r * march.cols + c], (0.0, 0.0)),
    }
}

/// Order in which the fast-marching front settles masked pixels.
pub fn fmm_fill_order(mask: &BitMask) -> Result<Vec<(usize, usize)>, RestoreError> {
    let mut order = Vec::with_capacity(mask.count());
    let mut values = vec![0.0; mask.bits().len()];
    march_inpaint(mask, &mut values, 1, |r, c| order.push((r, c)))?;
    Ok(order)
}

fn march_inpaint(
    mask: &BitMask,
    values: &mut [f64],
    radius: usize,
    mut on_fill: impl FnMut(usize, usize),
) -> Result<(), RestoreError> {
    let mut march = March::new(mask)?;
    let cols = march.cols;
    let mut grads: Vec<Option<(f64, f64)>> = vec![None; values.len()];
    while let Some(Front { r, c, .. }) = march.heap.pop() {
        let i = r * cols + c;
        if march.flag[i] == Flag::Known {
            continue;
        }
        march.flag[i] = Flag::Known;
        let next: Vec<(usize, usize)> = march.four(r, c).collect();
        for (nr, nc) in next {
            let j = nr * cols + nc;
            if march.flag[j] != Flag::Inside {
                continue;
            }
            let t = march.arrival(nr, nc);
            march.t[j] = t;
            let (value, grad) = telea_value(&march, values, &mut grads, nr, nc, radius);
            values[j] = value;
            grads[j] = Some(grad);
            march.flag[j] = Flag::Band;
            march.heap.push(Front { t, r: nr, c: nc });
            on_fill(nr, nc);
        }
    }
    Ok(())
}

/// Telea fast-marching inpainting.
pub fn fmm_inpaint(map: &HeightMap, mask: &BitMask, radius: usize) -> Result<HeightMap, RestoreError> {
    mask.ensure_same_shape(map.rows(), map.cols())?;
    if radius < 1 {
        return Err(invalid("radius", "must be >= 1"));
    }
    if mask.is_empty() {
        return Ok(map.clone());
    }
    let mut values = map.data().to_vec();
    march_inpaint(mask, &mut values, radius, |_, _| {})?;
    Ok(map.with_data(values)?)
}

/// Ordinary kriging weights for `points` (row, col) predicting `target`;
/// `None` when the system is singular.
pub fn kriging_weights(points: &[(f64, f64)], target: (f64, f64), vp: &VariogramParams, sill: f64) -> Option<Vec<f64>> {
    let n = points.len();
    let m = n + 1;
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    let dist = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    for i in 0..n {
        for j in 0..n {
            a[i * m + j] = vp.gamma(sill, dist(points[i], points[j]));
        }
        a[i * m + n] = 1.0;
        a[n * m + i] = 1.0;
        b[i] = vp.gamma(sill, dist(points[i], target));
    }
    b[n] = 1.0;
    let x = linalg::solve(&a, m, &b)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(x[..n].to_vec())
}

/// The `k` unmasked pixels nearest to `(r, c)`, ties by raster order.
fn nearest_valid(mask: &BitMask, r: usize, c: usize, k: usize) -> Vec<(usize, usize)> {
    let (rows, cols) = mask.shape();
    let mut found: Vec<(usize, (usize, usize))> = Vec::new();
    let max_ring = rows.max(cols);
    for ring in 0..=max_ring {
        // every pixel of this ring is at least `ring` away
        if found.len() >= k {
            found.sort_unstable();
            if found[k - 1].0 <= ring * ring {
                break;
            }
        }
        let (r0, r1) = (r as isize - ring as isize, r as isize + ring as isize);
        let (c0, c1) = (c as isize - ring as isize, c as isize + ring as isize);
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                if rr != r0 && rr != r1 && cc != c0 && cc != c1 {
                    continue;
                }
                if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                    continue;
                }
                let (ru, cu) = (rr as usize, cc as usize);
                if !mask.get(ru, cu) {
                    let d2 = (rr - r as isize).pow(2) + (cc - c as isize).pow(2);
                    found.push((d2 as usize, (ru, cu)));
                }
            }
        }
    }
    found.sort_unstable();
    found.truncate(k);
    found.into_iter().map(|(_, p)| p).collect()
}

/// Ordinary kriging from the nearest unmasked pixels; singular systems
/// fall back to inverse-distance weights.
pub fn kriging_inpaint(map: &HeightMap, mask: &BitMask, vp: &VariogramParams) -> Result<HeightMap, RestoreError> {
    mask.ensure_same_shape(map.rows(), map.cols())?;
    vp.validate()?;
    if mask.is_empty() {
        return Ok(map.clone());
    }
    let valid: Vec<f64> = map
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| !m)
        .map(|(v, _)| *v)
        .collect();
    if valid.is_empty() {
        return Err(RestoreError::AllMasked);
    }
    let sill = vp.sill.unwrap_or_else(|| {
        let sd = stats::mean_std(&valid).1;
        (sd * sd).max(1e-12)
    });
    let cols = map.cols();
    let targets: Vec<(usize, usize)> = mask.iter_set().collect();
    let filled: Vec<f64> = targets
        .par_iter()
        .map(|&(r, c)| {
            let near = nearest_valid(mask, r, c, vp.neighbors);
            let points: Vec<(f64, f64)> = near.iter().map(|&(a, b)| (a as f64, b as f64)).collect();
            let values: Vec<f64> = near.iter().map(|&(a, b)| map.get(a, b)).collect();
            let weights = kriging_weights(&points, (r as f64, c as f64), vp, sill).unwrap_or_else(|| {
                log::warn!("kriging system singular at ({r}, {c}); using inverse-distance weights");
                let raw: Vec<f64> = points
                    .iter()
                    .map(|p| 1.0 / ((p.0 - r as f64).powi(2) + (p.1 - c as f64).powi(2)))
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|w| w / total).collect()
            });
            weights.iter().zip(&values).map(|(w, v)| w * v).sum()
        })
        .collect();
    let mut data = map.data().to_vec();
    for (&(r, c), v) in targets.iter().zip(filled) {
        data[r * cols + c] = v;
    }
    Ok(map.with_data(data)?)
}

/// Replaces each masked pixel by the Gaussian-weighted mean of its
/// footprint (truncated at 3σ, clipped at borders); unmasked pixels are
/// copied unchanged.
pub fn localized_gaussian_smooth(map: &HeightMap, mask: &BitMask, sigma: f64) -> Result<HeightMap, RestoreError> {
    mask.ensure_same_shape(map.rows(), map.cols())?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("smooth_sigma", format!("{sigma} must be > 0")));
    }
    let (rows, cols) = map.shape();
    let half = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let d = i as f64 - half as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let targets: Vec<(usize, usize)> = mask.iter_set().collect();
    let smoothed: Vec<f64> = targets
        .par_iter()
        .map(|&(r, c)| {
            let center = map.get(r, c);
            let (mut acc, mut wsum) = (0.0, 0.0);
            for rr in r.saturating_sub(half)..=(r + half).min(rows - 1) {
                for cc in c.saturating_sub(half)..=(c + half).min(cols - 1) {
                    let w = kernel[rr + half - r] * kernel[cc + half - c];
                    acc += w * (map.get(rr, cc) - center);
                    wsum += w;
                }
            }
            center + acc / wsum
        })
        .collect();
    let mut data = map.data().to_vec();
    for (&(r, c), v) in targets.iter().zip(smoothed) {
        data[r * cols + c] = v;
    }
    Ok(map.with_data(data)?)
}

/// Expansion, inpainting and smoothing driven by a mask bundle. With the
/// directional method, expanded stripe lines go to fast marching and the
/// remaining mask pixels to directional fill.
pub fn restore_pipeline(
    map: &HeightMap,
    bundle: &MaskBundle,
    cfg: &RestoreConfig,
    params: &PipelineParams,
) -> Result<HeightMap, RestoreError> {
    restore_with_mask(map, &bundle.expanded, cfg, params.ar)
}

/// Pixels a restoration may change, and the expanded stripe lines within
/// them. Without `full_expand` the first is `mask` itself.
pub fn working_masks(mask: &BitMask, cfg: &RestoreConfig, ar: f64) -> Result<(BitMask, BitMask), RestoreError> {
    let (rows, cols) = mask.shape();
    if !cfg.full_expand {
        return Ok((mask.clone(), BitMask::empty(rows, cols, MaskStage::Expanded)));
    }
    let components = connected_components(mask, Connectivity::Eight);
    let lines = expand_stripe_full(&BitMask::empty(rows, cols, MaskStage::Expanded), &components, ar);
    Ok((mask.union(&lines)?.relabel(MaskStage::Final), lines))
}

/// [`restore_pipeline`] on a bare final mask.
pub fn restore_with_mask(map: &HeightMap, mask: &BitMask, cfg: &RestoreConfig, ar: f64) -> Result<HeightMap, RestoreError> {
    cfg.validate()?;
    mask.ensure_same_shape(map.rows(), map.cols())?;
    if mask.is_empty() {
        return Ok(map.clone());
    }
    let (work, stripe_lines) = working_masks(mask, cfg, ar)?;
    let filled = match cfg.method {
        RestoreMethod::Directional => {
            let direct = directional_inpaint(map, &work, InpaintDirection::Auto)?;
            if stripe_lines.is_empty() {
                direct
            } else {
                fmm_inpaint(&direct, &stripe_lines, cfg.radius)?
            }
        }
        RestoreMethod::FastMarching => fmm_inpaint(map, &work, cfg.radius)?,
        RestoreMethod::Bilinear => bilinear_inpaint(map, &work)?,
        RestoreMethod::Kriging => kriging_inpaint(map, &work, &cfg.variogram)?,
    };
    localized_gaussian_smooth(&filled, &work, cfg.smooth_sigma)
}
