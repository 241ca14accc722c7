//! Grid types shared by every stage: height maps, bit masks, connected
//! components and the small neighborhood primitives built on them.
//!
//! Windows and gradients are clipped at the image border, never reflected:
//! AFM edges are real data. All standard deviations use the population
//! (divide-by-N) form so `lam * sigma` thresholds are reproducible.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("data length {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("grid must be at least 2x2, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("scan size must be positive, got ({x}, {y})")]
    InvalidScanSize { x: f64, y: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("window size must be odd and >= 3, got {0}")]
    InvalidWindow(usize),
    #[error("pixel ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("mask stage cannot move backwards from {from} to {to}")]
    StageRegression { from: MaskStage, to: MaskStage },
}

/// Rectangular grid of calibrated heights in nanometers.
///
/// Construction validates shape, finiteness and scan size; there is no way
/// to store a NaN or infinity in a `HeightMap`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    scan_size_x: f64,
    scan_size_y: f64,
    source_id: String,
}

impl HeightMap {
    /// Builds a map with a 1 µm × 1 µm scan size and an empty source id.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if rows < 2 || cols < 2 {
            return Err(GridError::TooSmall { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(GridError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            rows,
            cols,
            data,
            scan_size_x: 1.0,
            scan_size_y: 1.0,
            source_id: String::new(),
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Result<Self, GridError> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn with_scan_size(mut self, x_um: f64, y_um: f64) -> Result<Self, GridError> {
        if !(x_um > 0.0 && y_um > 0.0 && x_um.is_finite() && y_um.is_finite()) {
            return Err(GridError::InvalidScanSize { x: x_um, y: y_um });
        }
        self.scan_size_x = x_um;
        self.scan_size_y = y_um;
        Ok(self)
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Same metadata, new samples. The data must have the same length.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, GridError> {
        let mut out = Self::new(self.rows, self.cols, data)?;
        out.scan_size_x = self.scan_size_x;
        out.scan_size_y = self.scan_size_y;
        out.source_id = self.source_id.clone();
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn scan_size_x(&self) -> f64 {
        self.scan_size_x
    }

    pub fn scan_size_y(&self) -> f64 {
        self.scan_size_y
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Rows become columns; scan sizes swap with them.
    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
            scan_size_x: self.scan_size_y,
            scan_size_y: self.scan_size_x,
            source_id: self.source_id.clone(),
        }
    }

    pub fn ensure_same_shape(&self, rows: usize, cols: usize) -> Result<(), GridError> {
        if self.shape() != (rows, cols) {
            return Err(GridError::ShapeMismatch {
                left: self.shape(),
                right: (rows, cols),
            });
        }
        Ok(())
    }
}

/// Dense row-major grid of reals, used for gradients and response maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Pipeline stage of a [`BitMask`]. Declaration order is the pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStage {
    Raw,
    Spike,
    Filtered,
    Seed,
    Expanded,
    Final,
    UserExclusion,
    Background,
}

impl fmt::Display for MaskStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MaskStage::Raw => "raw",
            MaskStage::Spike => "spike",
            MaskStage::Filtered => "filtered",
            MaskStage::Seed => "seed",
            MaskStage::Expanded => "expanded",
            MaskStage::Final => "final",
            MaskStage::UserExclusion => "user_exclusion",
            MaskStage::Background => "background",
        };
        f.write_str(name)
    }
}

/// Per-pixel boolean grid aligned with a [`HeightMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    stage: MaskStage,
}

impl BitMask {
    pub fn empty(rows: usize, cols: usize, stage: MaskStage) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
            stage,
        }
    }

    pub fn full(rows: usize, cols: usize, stage: MaskStage) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
            stage,
        }
    }

    pub fn from_bits(
        rows: usize,
        cols: usize,
        bits: Vec<bool>,
        stage: MaskStage,
    ) -> Result<Self, GridError> {
        if bits.len() != rows * cols {
            return Err(GridError::LengthMismatch {
                rows,
                cols,
                len: bits.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            bits,
            stage,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        stage: MaskStage,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            bits,
            stage,
        }
    }

    /// Mask covering the given inclusive rectangles `[r0, c0, r1, c1]`,
    /// clamped to the grid. Corners may be given in either order.
    pub fn from_rects(rows: usize, cols: usize, rects: &[[usize; 4]], stage: MaskStage) -> Self {
        let mut mask = Self::empty(rows, cols, stage);
        for &[a, b, c, d] in rects {
            let (r0, r1) = (a.min(c), a.max(c).min(rows.saturating_sub(1)));
            let (c0, c1) = (b.min(d), b.max(d).min(cols.saturating_sub(1)));
            if r0 >= rows || c0 >= cols {
                continue;
            }
            for r in r0..=r1 {
                for cc in c0..=c1 {
                    mask.set(r, cc, true);
                }
            }
        }
        mask
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn stage(&self) -> MaskStage {
        self.stage
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.cols + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set pixels in raster order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / cols, i % cols))
    }

    /// Moves the mask to a later pipeline stage. Moving backwards is an error.
    pub fn advance(mut self, stage: MaskStage) -> Result<Self, GridError> {
        if stage < self.stage {
            return Err(GridError::StageRegression {
                from: self.stage,
                to: stage,
            });
        }
        self.stage = stage;
        Ok(self)
    }

    /// Relabels without the forward-only check; for masks that start a new
    /// lineage (e.g. a user exclusion turned into a background mask).
    pub fn relabel(mut self, stage: MaskStage) -> Self {
        self.stage = stage;
        self
    }

    pub fn ensure_same_shape(&self, rows: usize, cols: usize) -> Result<(), GridError> {
        if self.shape() != (rows, cols) {
            return Err(GridError::ShapeMismatch {
                left: self.shape(),
                right: (rows, cols),
            });
        }
        Ok(())
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask, GridError> {
        other.ensure_same_shape(self.rows, self.cols)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(BitMask {
            rows: self.rows,
            cols: self.cols,
            bits,
            stage: self.stage.max(other.stage),
        })
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Pixelwise NOT, labeled as a background mask.
    pub fn complement(&self) -> BitMask {
        BitMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|&b| !b).collect(),
            stage: MaskStage::Background,
        }
    }

    pub fn transpose(&self) -> BitMask {
        BitMask::from_fn(self.cols, self.rows, self.stage, |r, c| self.get(c, r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity::Eight
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Neighbors of `(r, c)` inside a `rows × cols` grid.
pub(crate) fn neighbors(
    r: usize,
    c: usize,
    rows: usize,
    cols: usize,
    connectivity: Connectivity,
) -> impl Iterator<Item = (usize, usize)> {
    connectivity.offsets().iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols)
            .then_some((nr as usize, nc as usize))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    /// Member pixels in raster order.
    pub pixel_indices: Vec<(usize, usize)>,
    pub area: usize,
    pub bbox: BBox,
    /// `max(w, h) / min(w, h)` of the bounding box, always `>= 1`.
    pub aspect_ratio: f64,
    /// Longer bounding-box side; ties are horizontal.
    pub orientation: Orientation,
}

impl ComponentStats {
    /// Builds stats from a non-empty pixel list; duplicates are dropped.
    pub fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Self {
        assert!(!pixels.is_empty(), "component must contain a pixel");
        pixels.sort_unstable();
        pixels.dedup();
        let mut bbox = BBox {
            min_row: usize::MAX,
            min_col: usize::MAX,
            max_row: 0,
            max_col: 0,
        };
        for &(r, c) in &pixels {
            bbox.min_row = bbox.min_row.min(r);
            bbox.min_col = bbox.min_col.min(c);
            bbox.max_row = bbox.max_row.max(r);
            bbox.max_col = bbox.max_col.max(c);
        }
        let (w, h) = (bbox.width(), bbox.height());
        let aspect_ratio = w.max(h) as f64 / w.min(h) as f64;
        let orientation = if w >= h {
            Orientation::Horizontal
        } else {
            Orientation::Vertical
        };
        Self {
            area: pixels.len(),
            pixel_indices: pixels,
            bbox,
            aspect_ratio,
            orientation,
        }
    }

    pub fn to_mask(&self, rows: usize, cols: usize, stage: MaskStage) -> BitMask {
        let mut mask = BitMask::empty(rows, cols, stage);
        for &(r, c) in &self.pixel_indices {
            mask.set(r, c, true);
        }
        mask
    }
}

/// Labels connected regions of set bits.
///
/// Output order is by `(min_row, min_col)` of the bounding box, then by the
/// first member pixel in raster order.
pub fn connected_components(mask: &BitMask, connectivity: Connectivity) -> Vec<ComponentStats> {
    let (rows, cols) = mask.shape();
    let mut visited = vec![false; rows * cols];
    let mut out: Vec<(usize, ComponentStats)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back((start / cols, start % cols));
        let mut pixels = Vec::new();
        while let Some((r, c)) = queue.pop_front() {
            pixels.push((r, c));
            for (nr, nc) in neighbors(r, c, rows, cols, connectivity) {
                let idx = nr * cols + nc;
                if mask.bits[idx] && !visited[idx] {
                    visited[idx] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        out.push((start, ComponentStats::from_pixels(pixels)));
    }
    out.sort_by_key(|(first, comp)| (comp.bbox.min_row, comp.bbox.min_col, *first));
    out.into_iter().map(|(_, comp)| comp).collect()
}

/// Central differences in the interior, one-sided differences at borders,
/// unit pixel spacing.
pub fn gradient_magnitude(map: &HeightMap) -> ScalarField {
    let (rows, cols) = map.shape();
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let gx = if c == 0 {
                map.get(r, 1) - map.get(r, 0)
            } else if c == cols - 1 {
                map.get(r, c) - map.get(r, c - 1)
            } else {
                (map.get(r, c + 1) - map.get(r, c - 1)) / 2.0
            };
            let gy = if r == 0 {
                map.get(1, c) - map.get(0, c)
            } else if r == rows - 1 {
                map.get(r, c) - map.get(r - 1, c)
            } else {
                (map.get(r + 1, c) - map.get(r - 1, c)) / 2.0
            };
            values.push(gx.hypot(gy));
        }
    }
    ScalarField { rows, cols, values }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

pub(crate) fn check_window(size: usize) -> Result<(), GridError> {
    if size < 3 || size % 2 == 0 {
        return Err(GridError::InvalidWindow(size));
    }
    Ok(())
}

/// Values of the `size × size` window centred on `(row, col)`, clipped.
pub(crate) fn window_values(map: &HeightMap, row: usize, col: usize, size: usize, out: &mut Vec<f64>) {
    let half = size / 2;
    out.clear();
    let r0 = row.saturating_sub(half);
    let r1 = (row + half).min(map.rows() - 1);
    let c0 = col.saturating_sub(half);
    let c1 = (col + half).min(map.cols() - 1);
    for r in r0..=r1 {
        out.extend_from_slice(&map.row(r)[c0..=c1]);
    }
}

/// Median, mean and population std over the clipped `size × size` window.
pub fn neighborhood_stats(
    map: &HeightMap,
    center: (usize, usize),
    size: usize,
) -> Result<WindowStats, GridError> {
    check_window(size)?;
    let (row, col) = center;
    if row >= map.rows() || col >= map.cols() {
        return Err(GridError::OutOfBounds {
            row,
            col,
            rows: map.rows(),
            cols: map.cols(),
        });
    }
    let mut values = Vec::with_capacity(size * size);
    window_values(map, row, col, size, &mut values);
    Ok(stats_of(&mut values))
}

pub(crate) fn stats_of(values: &mut [f64]) -> WindowStats {
    let (mean, std) = stats::mean_std(values);
    let median = stats::median_in_place(values);
    WindowStats { median, mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: usize, cols: usize, set: &[(usize, usize)]) -> BitMask {
        let mut m = BitMask::empty(rows, cols, MaskStage::Raw);
        for &(r, c) in set {
            m.set(r, c, true);
        }
        m
    }

    #[test]
    fn rejects_invalid_maps() {
        assert!(matches!(
            HeightMap::new(1, 3, vec![0.0; 3]),
            Err(GridError::TooSmall { .. })
        ));
        assert!(matches!(
            HeightMap::new(2, 2, vec![0.0; 3]),
            Err(GridError::LengthMismatch { .. })
        ));
        assert!(matches!(
            HeightMap::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(GridError::NonFinite { index: 1 })
        ));
        let m = HeightMap::constant(2, 2, 0.0).unwrap();
        assert!(m.with_scan_size(0.0, 1.0).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let m = HeightMap::constant(5, 6, 3.5).unwrap();
        assert!(gradient_magnitude(&m).values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_of_column_plane_is_slope() {
        let m = HeightMap::from_fn(6, 7, |_, c| 3.0 * c as f64).unwrap();
        let g = gradient_magnitude(&m);
        for r in 1..5 {
            for c in 1..6 {
                assert_eq!(g.get(r, c), 3.0);
            }
        }
    }

    #[test]
    fn gradient_spike_matches_stencil() {
        let mut data = vec![0.0; 9];
        data[4] = 9.0;
        let m = HeightMap::new(3, 3, data.clone()).unwrap();
        let g = gradient_magnitude(&m);
        // stencil evaluated by hand: left/right/up/down neighbours of the
        // centre are all zero, so the central differences vanish there
        let at = |r: usize, c: usize| data[r * 3 + c];
        let gx = (at(1, 2) - at(1, 0)) / 2.0;
        let gy = (at(2, 1) - at(0, 1)) / 2.0;
        assert_eq!(g.get(1, 1), (gx * gx + gy * gy).sqrt());
        // corner uses one-sided differences: (0,1)-(0,0) and (1,0)-(0,0)
        assert_eq!(g.get(0, 0), 0.0);
        // edge pixel (0,1): gx central over row 0 = 0, gy one-sided = 9
        assert_eq!(g.get(0, 1), 9.0);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = mask_from(3, 3, &[(0, 0), (1, 1)]);
        let eight = connected_components(&m, Connectivity::Eight);
        assert_eq!(eight.len(), 1);
        assert_eq!(eight[0].area, 2);
        let four = connected_components(&m, Connectivity::Four);
        assert_eq!(four.len(), 2);
        assert!(four.iter().all(|c| c.area == 1));
    }

    #[test]
    fn rectangle_component_stats() {
        // width 10, height 2
        let m = BitMask::from_fn(6, 14, MaskStage::Raw, |r, c| (2..4).contains(&r) && (1..11).contains(&c));
        let comps = connected_components(&m, Connectivity::Eight);
        assert_eq!(comps.len(), 1);
        let c = &comps[0];
        assert_eq!(c.area, 20);
        assert_eq!(c.aspect_ratio, 5.0);
        assert_eq!(c.orientation, Orientation::Horizontal);
        assert_eq!(
            c.bbox,
            BBox {
                min_row: 2,
                min_col: 1,
                max_row: 3,
                max_col: 10
            }
        );
        let t = connected_components(&m.transpose(), Connectivity::Eight);
        assert_eq!(t[0].orientation, Orientation::Vertical);
        assert_eq!(t[0].aspect_ratio, 5.0);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = BitMask::empty(4, 4, MaskStage::Raw);
        assert!(connected_components(&m, Connectivity::Four).is_empty());
    }

    #[test]
    fn components_are_ordered_by_bbox_corner() {
        let m = mask_from(6, 6, &[(4, 0), (0, 5), (0, 3), (2, 2)]);
        let comps = connected_components(&m, Connectivity::Four);
        let corners: Vec<_> = comps.iter().map(|c| (c.bbox.min_row, c.bbox.min_col)).collect();
        assert_eq!(corners, vec![(0, 3), (0, 5), (2, 2), (4, 0)]);
    }

    #[test]
    fn window_stats_examples() {
        let zeros = HeightMap::constant(5, 5, 0.0).unwrap();
        let s = neighborhood_stats(&zeros, (2, 2), 3).unwrap();
        assert_eq!((s.median, s.mean, s.std), (0.0, 0.0, 0.0));

        let mut data = vec![0.0; 25];
        data[12] = 9.0;
        let spike = HeightMap::new(5, 5, data).unwrap();
        let s = neighborhood_stats(&spike, (2, 2), 3).unwrap();
        assert_eq!(s.median, 0.0);
        assert_eq!(s.mean, 1.0);
        assert!((s.std - 8f64.sqrt()).abs() < 1e-12);

        let corner = HeightMap::new(3, 3, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = neighborhood_stats(&corner, (0, 0), 3).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn window_size_validation() {
        let m = HeightMap::constant(4, 4, 0.0).unwrap();
        assert_eq!(neighborhood_stats(&m, (1, 1), 4), Err(GridError::InvalidWindow(4)));
        assert_eq!(neighborhood_stats(&m, (1, 1), 1), Err(GridError::InvalidWindow(1)));
    }

    #[test]
    fn stage_only_moves_forward() {
        let m = BitMask::empty(2, 2, MaskStage::Filtered);
        assert!(m.clone().advance(MaskStage::Expanded).is_ok());
        assert!(matches!(
            m.advance(MaskStage::Raw),
            Err(GridError::StageRegression { .. })
        ));
    }

    #[test]
    fn rects_are_clamped() {
        let m = BitMask::from_rects(4, 4, &[[2, 2, 9, 9]], MaskStage::UserExclusion);
        assert_eq!(m.count(), 4);
        assert!(m.get(3, 3));
    }
}
