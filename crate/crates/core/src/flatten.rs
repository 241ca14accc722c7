//! Baseline removal: mask-aware line-by-line polynomial flattening, global
//! polynomial surfaces, and the tilt-removal ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BitMask, GridError, HeightMap, MaskStage};
use crate::linalg;

pub const MAX_LINE_ORDER: u8 = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlattenError {
    #[error("polynomial order {0} is not supported (max {MAX_LINE_ORDER})")]
    InvalidOrder(u8),
    #[error("no usable pixels on any {direction} line")]
    DegenerateLine { direction: LineDirection, line: usize },
    #[error("least-squares system is singular")]
    Singular,
    #[error("background region is empty")]
    EmptyBackground,
    #[error("pre-flatten background plane has zero slope")]
    ZeroPreTilt,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Axis along which scan lines are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineDirection {
    Row,
    Column,
}

impl std::fmt::Display for LineDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LineDirection::Row => "row",
            LineDirection::Column => "column",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlattenDirection {
    Row,
    Column,
    Both,
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlattenConfig {
    pub direction: FlattenDirection,
    pub order: u8,
    pub mask_aware: bool,
    /// Inclusive `[r0, c0, r1, c1]` rectangles excluded from fitting.
    pub exclusion: Vec<[usize; 4]>,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        FlattenConfig {
            direction: FlattenDirection::Auto,
            order: 1,
            mask_aware: true,
            exclusion: Vec::new(),
        }
    }
}

impl FlattenConfig {
    pub fn validate(&self) -> Result<(), FlattenError> {
        if self.order > MAX_LINE_ORDER {
            return Err(FlattenError::InvalidOrder(self.order));
        }
        Ok(())
    }

    /// Line axis used for line-residual metrics: the fitted axis, rows for
    /// `Both`, and the axis `Auto` would pick on `map`.
    pub fn metric_direction(&self, map: &HeightMap, exclusion: Option<&BitMask>) -> LineDirection {
        match self.direction {
            FlattenDirection::Row | FlattenDirection::Both => LineDirection::Row,
            FlattenDirection::Column => LineDirection::Column,
            FlattenDirection::Auto => choose_direction(map, exclusion),
        }
    }
}

/// Polynomial in the scaled abscissa `t = (x - center) / half_width`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LineFit {
    coeffs: Vec<f64>,
    center: f64,
    half_width: f64,
}

impl LineFit {
    pub(crate) fn eval(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.half_width;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// Coefficients of the same polynomial in powers of the raw index `x`.
    pub(crate) fn raw_coefficients(&self) -> Vec<f64> {
        let n = self.coeffs.len();
        let mut out = vec![0.0; n];
        let s = 1.0 / self.half_width;
        let shift = -self.center * s;
        // expand sum a_k (s x + shift)^k
        let mut binom = vec![1.0; n];
        for (k, &a) in self.coeffs.iter().enumerate() {
            if k > 0 {
                for j in (1..k).rev() {
                    binom[j] += binom[j - 1];
                }
                binom[k] = 1.0;
            }
            for (j, slot) in out.iter_mut().enumerate().take(k + 1) {
                *slot += a * binom[j] * s.powi(j as i32) * shift.powi((k - j) as i32);
            }
        }
        out
    }
}

/// Least-squares fit over `valid` positions. The order drops stepwise while
/// fewer than `order + 1` positions are valid; `None` when none are.
pub(crate) fn fit_line(values: &[f64], valid: Option<&[bool]>, order: u8) -> Option<LineFit> {
    let n = values.len();
    let center = (n as f64 - 1.0) / 2.0;
    let half_width = center.max(1.0);
    let points: Vec<(f64, f64)> = (0..n)
        .filter(|&i| valid.is_none_or(|v| v[i]))
        .map(|i| ((i as f64 - center) / half_width, values[i]))
        .collect();
    if points.is_empty() {
        return None;
    }
    let mut order = (order as usize).min(points.len() - 1);
    loop {
        let cols = order + 1;
        let coeffs = if cols == 1 {
            Some(vec![points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64])
        } else {
            let mut a = Vec::with_capacity(points.len() * cols);
            for &(t, _) in &points {
                let mut p = 1.0;
                for _ in 0..cols {
                    a.push(p);
                    p *= t;
                }
            }
            let b: Vec<f64> = points.iter().map(|p| p.1).collect();
            linalg::least_squares(&a, points.len(), cols, &b)
        };
        match coeffs {
            Some(coeffs) => {
                return Some(LineFit {
                    coeffs,
                    center,
                    half_width,
                })
            }
            None if order > 0 => order -= 1,
            None => return None,
        }
    }
}

/// Fits `sum c_k x^k` to the valid samples of one scan line (`x` = pixel
/// index) and returns `c_0..c_order`.
///
/// Fewer valid samples than `order + 1` lower the order; zero valid samples
/// is a [`FlattenError::DegenerateLine`].
pub fn fit_line_baseline(values: &[f64], valid: &[bool], order: u8) -> Result<Vec<f64>, FlattenError> {
    if order > MAX_LINE_ORDER {
        return Err(FlattenError::InvalidOrder(order));
    }
    let fit = fit_line(values, Some(valid), order).ok_or(FlattenError::DegenerateLine {
        direction: LineDirection::Row,
        line: 0,
    })?;
    let mut raw = fit.raw_coefficients();
    raw.resize(order as usize + 1, 0.0);
    Ok(raw)
}

/// Subtracts a per-line polynomial baseline from every pixel.
///
/// Excluded pixels never influence a fit but are still corrected. A line
/// without any usable pixel borrows the baseline of the nearest preceding
/// fitted line (or the nearest following one at the start of the scan).
pub fn flatten_lines(
    map: &HeightMap,
    direction: LineDirection,
    order: u8,
    exclusion: Option<&BitMask>,
) -> Result<HeightMap, FlattenError> {
    if order > MAX_LINE_ORDER {
        return Err(FlattenError::InvalidOrder(order));
    }
    if let Some(ex) = exclusion {
        ex.ensure_same_shape(map.rows(), map.cols())?;
    }
    match direction {
        LineDirection::Row => flatten_rows(map, order, exclusion),
        LineDirection::Column => {
            let ex_t = exclusion.map(BitMask::transpose);
            let out = flatten_rows(&map.transpose(), order, ex_t.as_ref()).map_err(|e| match e {
                FlattenError::DegenerateLine { line, .. } => FlattenError::DegenerateLine {
                    direction: LineDirection::Column,
                    line,
                },
                other => other,
            })?;
            Ok(out.transpose())
        }
    }
}

fn flatten_rows(map: &HeightMap, order: u8, exclusion: Option<&BitMask>) -> Result<HeightMap, FlattenError> {
    let (rows, cols) = map.shape();
    let fits: Vec<Option<LineFit>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let valid: Option<Vec<bool>> =
                exclusion.map(|ex| (0..cols).map(|c| !ex.get(r, c)).collect());
            fit_line(map.row(r), valid.as_deref(), order)
        })
        .collect();
    let first = fits.iter().position(Option::is_some).ok_or(FlattenError::DegenerateLine {
        direction: LineDirection::Row,
        line: 0,
    })?;
    if first > 0 {
        log::debug!("rows 0..{first} have no usable pixels; using row {first} baseline");
    }
    let mut out = Vec::with_capacity(map.len());
    let mut current = fits[first].as_ref().expect("first fitted line");
    for (r, fit) in fits.iter().enumerate() {
        if let Some(f) = fit {
            current = f;
        }
        for (c, &v) in map.row(r).iter().enumerate() {
            out.push(v - current.eval(c as f64));
        }
    }
    Ok(map.with_data(out)?)
}

/// Least-squares plane `z = a + sx * col + sy * row` over the pixels not in
/// `exclusion`; returns `(a, sx, sy)`.
pub fn fit_plane(map: &HeightMap, exclusion: Option<&BitMask>) -> Result<(f64, f64, f64), FlattenError> {
    let (rows, cols) = map.shape();
    let cr = (rows as f64 - 1.0) / 2.0;
    let cc = (cols as f64 - 1.0) / 2.0;
    let (mut n, mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
    let (mut sxx, mut syy, mut sxy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in 0..rows {
        let y = r as f64 - cr;
        for c in 0..cols {
            if exclusion.is_some_and(|ex| ex.get(r, c)) {
                continue;
            }
            let x = c as f64 - cc;
            let z = map.get(r, c);
            n += 1.0;
            sx += x;
            sy += y;
            sz += z;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            sxz += x * z;
            syz += y * z;
        }
    }
    if n == 0.0 {
        return Err(FlattenError::EmptyBackground);
    }
    // center the accumulators on the included pixels
    let (mx, my, mz) = (sx / n, sy / n, sz / n);
    let vxx = sxx / n - mx * mx;
    let vyy = syy / n - my * my;
    let vxy = sxy / n - mx * my;
    let vxz = sxz / n - mx * mz;
    let vyz = syz / n - my * mz;
    let det = vxx * vyy - vxy * vxy;
    let scale = (vxx * vyy).max(f64::MIN_POSITIVE);
    if det.abs() <= 1e-12 * scale {
        return Err(FlattenError::Singular);
    }
    let slope_x = (vxz * vyy - vyz * vxy) / det;
    let slope_y = (vyz * vxx - vxz * vxy) / det;
    let intercept = mz - slope_x * (mx + cc) - slope_y * (my + cr);
    Ok((intercept, slope_x, slope_y))
}

/// Picks the line axis carrying the dominant background slope; ties go to
/// rows. Falls back to all pixels when the exclusion leaves too few.
pub fn choose_direction(map: &HeightMap, exclusion: Option<&BitMask>) -> LineDirection {
    let plane = fit_plane(map, exclusion).or_else(|_| fit_plane(map, None));
    match plane {
        Ok((_, sx, sy)) if sy.abs() > sx.abs() => LineDirection::Column,
        _ => LineDirection::Row,
    }
}

/// Mask-aware, direction-adaptive flattening.
///
/// With `mask_aware` the fit exclusion is the union of `artifact_mask`,
/// `user_exclusion` and the configured rectangles; otherwise every pixel is
/// fitted. `Both` runs a row pass followed by a column pass.
pub fn smart_flatten(
    map: &HeightMap,
    config: &FlattenConfig,
    artifact_mask: Option<&BitMask>,
    user_exclusion: Option<&BitMask>,
) -> Result<HeightMap, FlattenError> {
    config.validate()?;
    let exclusion = if config.mask_aware {
        let (rows, cols) = map.shape();
        let mut ex = BitMask::from_rects(rows, cols, &config.exclusion, MaskStage::UserExclusion);
        for m in [artifact_mask, user_exclusion].into_iter().flatten() {
            ex = ex.union(m)?;
        }
        (!ex.is_empty()).then_some(ex)
    } else {
        None
    };
    let ex = exclusion.as_ref();
    match config.direction {
        FlattenDirection::Row => flatten_lines(map, LineDirection::Row, config.order, ex),
        FlattenDirection::Column => flatten_lines(map, LineDirection::Column, config.order, ex),
        FlattenDirection::Both => {
            let rows = flatten_lines(map, LineDirection::Row, config.order, ex)?;
            flatten_lines(&rows, LineDirection::Column, config.order, ex)
        }
        FlattenDirection::Auto => {
            let dir = choose_direction(map, ex);
            flatten_lines(map, dir, config.order, ex)
        }
    }
}

fn poly2d_terms(order: u8) -> Vec<(i32, i32)> {
    let mut terms = Vec::new();
    for total in 0..=order as i32 {
        for py in 0..=total {
            terms.push((total - py, py));
        }
    }
    terms
}

/// Subtracts one least-squares surface of total degree `<= order`.
pub fn flatten_global_poly(map: &HeightMap, order: u8) -> Result<HeightMap, FlattenError> {
    flatten_global_poly_masked(map, order, None)
}

/// [`flatten_global_poly`] fitted only on pixels outside `exclusion`.
pub fn flatten_global_poly_masked(
    map: &HeightMap,
    order: u8,
    exclusion: Option<&BitMask>,
) -> Result<HeightMap, FlattenError> {
    if order > 5 {
        return Err(FlattenError::InvalidOrder(order));
    }
    let (rows, cols) = map.shape();
    if let Some(ex) = exclusion {
        ex.ensure_same_shape(rows, cols)?;
    }
    let terms = poly2d_terms(order);
    let cr = (rows as f64 - 1.0) / 2.0;
    let cc = (cols as f64 - 1.0) / 2.0;
    let (hr, hc) = (cr.max(1.0), cc.max(1.0));
    let basis = |r: usize, c: usize, out: &mut Vec<f64>| {
        let x = (c as f64 - cc) / hc;
        let y = (r as f64 - cr) / hr;
        for &(px, py) in &terms {
            out.push(x.powi(px) * y.powi(py));
        }
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if exclusion.is_some_and(|ex| ex.get(r, c)) {
                continue;
            }
            basis(r, c, &mut a);
            b.push(map.get(r, c));
        }
    }
    if b.is_empty() {
        return Err(FlattenError::EmptyBackground);
    }
    let coeffs = linalg::least_squares(&a, b.len(), terms.len(), &b).ok_or(FlattenError::Singular)?;
    let mut row_basis = Vec::with_capacity(terms.len());
    let mut out = Vec::with_capacity(map.len());
    for r in 0..rows {
        for c in 0..cols {
            row_basis.clear();
            basis(r, c, &mut row_basis);
            let fitted: f64 = row_basis.iter().zip(&coeffs).map(|(p, k)| p * k).sum();
            out.push(map.get(r, c) - fitted);
        }
    }
    Ok(map.with_data(out)?)
}

/// `1 - |grad post| / |grad pre|` of background plane fits.
pub fn tilt_removal_ratio(pre: &HeightMap, post: &HeightMap, background: &BitMask) -> Result<f64, FlattenError> {
    post.ensure_same_shape(pre.rows(), pre.cols())?;
    background.ensure_same_shape(pre.rows(), pre.cols())?;
    if background.is_empty() {
        return Err(FlattenError::EmptyBackground);
    }
    let outside = background.complement();
    let (_, ax, ay) = fit_plane(pre, Some(&outside))?;
    let (_, bx, by) = fit_plane(post, Some(&outside))?;
    let pre_norm = ax.hypot(ay);
    if pre_norm == 0.0 {
        return Err(FlattenError::ZeroPreTilt);
    }
    Ok(1.0 - bx.hypot(by) / pre_norm)
}
