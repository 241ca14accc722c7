//! Ground-truth surfaces and controlled artifact injection.
//!
//! Every injector is deterministic under its seed and reports the exact set
//! of pixels it modified, so masks and restorations can be scored against a
//! known truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BitMask, GridError, HeightMap, MaskStage, Orientation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("line index {index} out of range (limit {limit})")]
    LineOutOfRange { index: usize, limit: usize },
    #[error("cannot place {requested} isolated spikes; only {placed} fit")]
    SpikesInfeasible { requested: usize, placed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub row: f64,
    pub col: f64,
    pub sigma: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RippleParams {
    /// Amplitude relative to local height.
    pub alpha: f64,
    /// Cycles per pixel.
    pub freq: f64,
    /// Degrees.
    pub theta: f64,
    /// Radians.
    pub phi: f64,
}

impl RippleParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.alpha >= 0.0) {
            return Err(SynthError::InvalidParameter("alpha must be >= 0"));
        }
        if !(self.freq > 0.0) {
            return Err(SynthError::InvalidParameter("freq must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    StripeRows,
    StripeCols,
    Spikes,
    TrackingLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    #[serde(skip)]
    pub truth_mask: Option<BitMask>,
    pub kind: InjectionKind,
    pub amplitude: f64,
    pub seed: u64,
    /// Line indices (stripes) or flat pixel indices (spikes).
    pub locations: Vec<usize>,
}

impl InjectionRecord {
    pub fn mask(&self) -> &BitMask {
        self.truth_mask.as_ref().expect("injection record carries its mask")
    }
}

/// Plane plus optional Gaussian bumps.
pub fn make_surface(
    rows: usize,
    cols: usize,
    slope_x: f64,
    slope_y: f64,
    offset: f64,
    bumps: &[Bump],
) -> Result<HeightMap, SynthError> {
    Ok(HeightMap::from_fn(rows, cols, |r, c| {
        let mut z = slope_x * c as f64 + slope_y * r as f64 + offset;
        for b in bumps {
            let d2 = (r as f64 - b.row).powi(2) + (c as f64 - b.col).powi(2);
            z += b.height * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        z
    })?)
}

/// Offsets whole rows or columns by `amplitude` plus uniform jitter of
/// `±jitter * amplitude`.
pub fn inject_stripes(
    map: &HeightMap,
    lines: &[usize],
    orientation: Orientation,
    amplitude: f64,
    jitter: f64,
    seed: u64,
) -> Result<(HeightMap, InjectionRecord), SynthError> {
    let len = match orientation {
        Orientation::Horizontal => map.cols(),
        Orientation::Vertical => map.rows(),
    };
    let segments: Vec<(usize, usize, usize)> = lines.iter().map(|&l| (l, 0, len - 1)).collect();
    inject_stripe_segments(map, &segments, orientation, amplitude, jitter, seed)
}

/// Like [`inject_stripes`] for `(line, start, end)` segments (inclusive).
pub fn inject_stripe_segments(
    map: &HeightMap,
    segments: &[(usize, usize, usize)],
    orientation: Orientation,
    amplitude: f64,
    jitter: f64,
    seed: u64,
) -> Result<(HeightMap, InjectionRecord), SynthError> {
    if !(0.0..1.0).contains(&jitter) {
        return Err(SynthError::InvalidParameter("jitter must be in [0, 1)"));
    }
    let (rows, cols) = map.shape();
    let (line_limit, len) = match orientation {
        Orientation::Horizontal => (rows, cols),
        Orientation::Vertical => (cols, rows),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = map.data().to_vec();
    let mut mask = BitMask::empty(rows, cols, MaskStage::Raw);
    let mut locations = Vec::new();
    for &(line, start, end) in segments {
        if line >= line_limit {
            return Err(SynthError::LineOutOfRange {
                index: line,
                limit: line_limit,
            });
        }
        if start > end || end >= len {
            return Err(SynthError::LineOutOfRange { index: end, limit: len });
        }
        locations.push(line);
        for t in start..=end {
            let (r, c) = match orientation {
                Orientation::Horizontal => (line, t),
                Orientation::Vertical => (t, line),
            };
            if mask.get(r, c) {
                continue;
            }
            let noise = if jitter > 0.0 {
                rng.random_range(-jitter..=jitter) * amplitude
            } else {
                0.0
            };
            data[r * cols + c] += amplitude + noise;
            mask.set(r, c, true);
        }
    }
    let kind = match orientation {
        Orientation::Horizontal => InjectionKind::StripeRows,
        Orientation::Vertical => InjectionKind::StripeCols,
    };
    let record = InjectionRecord {
        truth_mask: Some(mask),
        kind,
        amplitude,
        seed,
        locations,
    };
    Ok((map.with_data(data)?, record))
}

/// Adds `count` single-pixel spikes of `±amplitude`, pairwise Chebyshev
/// distance greater than `isolation` and at least `isolation / 2` (min 1)
/// away from the border.
pub fn inject_spikes(
    map: &HeightMap,
    count: usize,
    amplitude: f64,
    isolation: usize,
    seed: u64,
) -> Result<(HeightMap, InjectionRecord), SynthError> {
    let (rows, cols) = map.shape();
    let margin = (isolation / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    if rows > 2 * margin && cols > 2 * margin {
        for r in margin..rows - margin {
            for c in margin..cols - margin {
                candidates.push((r, c));
            }
        }
    }
    candidates.shuffle(&mut rng);
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
    for (r, c) in candidates {
        if placed.len() == count {
            break;
        }
        if placed.iter().all(|&(pr, pc)| pr.abs_diff(r).max(pc.abs_diff(c)) > isolation) {
            placed.push((r, c));
        }
    }
    if placed.len() < count {
        return Err(SynthError::SpikesInfeasible {
            requested: count,
            placed: placed.len(),
        });
    }
    let mut data = map.data().to_vec();
    let mut mask = BitMask::empty(rows, cols, MaskStage::Raw);
    let mut locations = Vec::with_capacity(count);
    for &(r, c) in &placed {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        data[r * cols + c] += sign * amplitude;
        mask.set(r, c, true);
        locations.push(r * cols + c);
    }
    let record = InjectionRecord {
        truth_mask: Some(mask),
        kind: InjectionKind::Spikes,
        amplitude,
        seed,
        locations,
    };
    Ok((map.with_data(data)?, record))
}

fn sin_cos_deg(theta: f64) -> (f64, f64) {
    // exact values on the axes so 0° and 90° ripples are transposes
    let t = theta.rem_euclid(360.0);
    if t == 0.0 {
        (0.0, 1.0)
    } else if t == 90.0 {
        (1.0, 0.0)
    } else if t == 180.0 {
        (0.0, -1.0)
    } else if t == 270.0 {
        (-1.0, 0.0)
    } else {
        t.to_radians().sin_cos()
    }
}

/// `z + alpha * |z| * sin(2π f (i sinθ + j cosθ) + φ)` with `i` the row and
/// `j` the column. Zero-height pixels receive no ripple.
pub fn add_ripple(map: &HeightMap, params: &RippleParams) -> Result<HeightMap, SynthError> {
    params.validate()?;
    let (s, c) = sin_cos_deg(params.theta);
    let cols = map.cols();
    let data = map
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &z)| {
            let (i, j) = ((idx / cols) as f64, (idx % cols) as f64);
            let phase = 2.0 * std::f64::consts::PI * params.freq * (i * s + j * c) + params.phi;
            z + params.alpha * z.abs() * phase.sin()
        })
        .collect();
    Ok(map.with_data(data)?)
}

/// Independent Gaussian noise of standard deviation `sigma`.
pub fn add_noise(map: &HeightMap, sigma: f64, seed: u64) -> Result<HeightMap, SynthError> {
    let normal = Normal::new(0.0, sigma).map_err(|_| SynthError::InvalidParameter("sigma must be finite and >= 0"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = map.data().iter().map(|z| z + normal.sample(&mut rng)).collect();
    Ok(map.with_data(data)?)
}

/// Rows where the tip lost contact: the surface content is replaced by the
/// row mean shifted by `amplitude`, plus uniform jitter of
/// `±jitter * |amplitude|`.
pub fn inject_tracking_loss(
    map: &HeightMap,
    rows: &[usize],
    amplitude: f64,
    jitter: f64,
    seed: u64,
) -> Result<(HeightMap, InjectionRecord), SynthError> {
    if !(0.0..1.0).contains(&jitter) {
        return Err(SynthError::InvalidParameter("jitter must be in [0, 1)"));
    }
    let cols = map.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = map.data().to_vec();
    let mut mask = BitMask::empty(map.rows(), cols, MaskStage::Raw);
    for &r in rows {
        if r >= map.rows() {
            return Err(SynthError::LineOutOfRange {
                index: r,
                limit: map.rows(),
            });
        }
        let mean = map.row(r).iter().sum::<f64>() / cols as f64;
        for c in 0..cols {
            let noise = if jitter > 0.0 {
                rng.random_range(-jitter..=jitter) * amplitude.abs()
            } else {
                0.0
            };
            data[r * cols + c] = mean + amplitude + noise;
            mask.set(r, c, true);
        }
    }
    let record = InjectionRecord {
        truth_mask: Some(mask),
        kind: InjectionKind::TrackingLoss,
        amplitude,
        seed,
        locations: rows.to_vec(),
    };
    Ok((map.with_data(data)?, record))
}

/// Double-tip image: the mean of the map and a copy shifted `shift` pixels
/// along the fast-scan axis, edge pixels repeated.
pub fn duplicate_tip(map: &HeightMap, shift: usize) -> Result<HeightMap, SynthError> {
    if shift == 0 || shift >= map.cols() {
        return Err(SynthError::InvalidParameter("shift must be in 1..cols"));
    }
    Ok(HeightMap::from_fn(map.rows(), map.cols(), |r, c| {
        (map.get(r, c) + map.get(r, c.saturating_sub(shift))) / 2.0
    })?)
}

/// Per-line Gaussian offsets, mimicking slow-scan drift between lines.
pub fn add_line_offsets(map: &HeightMap, orientation: Orientation, sigma: f64, seed: u64) -> Result<HeightMap, SynthError> {
    let normal = Normal::new(0.0, sigma).map_err(|_| SynthError::InvalidParameter("sigma must be finite and >= 0"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = map.shape();
    let n = match orientation {
        Orientation::Horizontal => rows,
        Orientation::Vertical => cols,
    };
    let offsets: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let data = map
        .data()
        .iter()
        .enumerate()
        .map(|(idx, z)| {
            let line = match orientation {
                Orientation::Horizontal => idx / cols,
                Orientation::Vertical => idx % cols,
            };
            z + offsets[line]
        })
        .collect();
    Ok(map.with_data(data)?)
}

/// Flat substrate carrying worm-like filaments about `strand_height` tall.
pub fn dna_like_surface(rows: usize, cols: usize, strands: usize, strand_height: f64, seed: u64) -> Result<HeightMap, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0f64; rows * cols];
    let width = 1.5f64;
    let reach = (3.0 * width).ceil() as isize;
    for _ in 0..strands {
        let mut y = rng.random_range(0.0..rows as f64);
        let mut x = rng.random_range(0.0..cols as f64);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let length = rng.random_range(60..160);
        for _ in 0..length {
            let (cy, cx) = (y.round() as isize, x.round() as isize);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (r, c) = (cy + dy, cx + dx);
                    if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                        continue;
                    }
                    let d2 = (r as f64 - y).powi(2) + (c as f64 - x).powi(2);
                    let h = strand_height * (-d2 / (2.0 * width * width)).exp();
                    let slot = &mut z[r as usize * cols + c as usize];
                    *slot = slot.max(h);
                }
            }
            heading += rng.random_range(-0.15..0.15);
            y += heading.sin();
            x += heading.cos();
            if y < 0.0 || x < 0.0 || y >= rows as f64 || x >= cols as f64 {
                break;
            }
        }
    }
    Ok(HeightMap::new(rows, cols, z)?)
}

/// One generated image with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub name: String,
    /// Surface before artifact injection (noise included).
    pub clean: HeightMap,
    pub map: HeightMap,
    /// Union of all injection masks.
    pub truth: BitMask,
    pub records: Vec<InjectionRecord>,
}

impl SynthSample {
    fn new(name: String, clean: HeightMap, map: HeightMap, records: Vec<InjectionRecord>) -> Result<Self, SynthError> {
        let mut truth = BitMask::empty(map.rows(), map.cols(), MaskStage::Final);
        for rec in &records {
            truth = truth.union(rec.mask())?;
        }
        Ok(SynthSample {
            name,
            clean,
            map,
            truth,
            records,
        })
    }
}

/// Tilted, bumpy, noisy background.
pub fn random_background(rows: usize, cols: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<HeightMap, SynthError> {
    let bumps: Vec<Bump> = (0..rng.random_range(2..6))
        .map(|_| Bump {
            row: rng.random_range(0.0..rows as f64),
            col: rng.random_range(0.0..cols as f64),
            sigma: rng.random_range(5.0..10.0),
            height: rng.random_range(2.0..6.0),
        })
        .collect();
    let surface = make_surface(
        rows,
        cols,
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-20.0..20.0),
        &bumps,
    )?;
    add_noise(&surface, noise, rng.random())
}

fn distinct_lines(rng: &mut ChaCha8Rng, limit: usize, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..limit).collect();
    all.shuffle(rng);
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Background with full-line stripes of one orientation plus isolated
/// spikes; the mask-quality corpus.
pub fn stripes_and_spikes_sample(name: &str, rows: usize, cols: usize, seed: u64) -> Result<SynthSample, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = 0.5;
    let clean = random_background(rows, cols, noise, &mut rng)?;
    let orientation = if rng.random::<bool>() {
        Orientation::Horizontal
    } else {
        Orientation::Vertical
    };
    let limit = match orientation {
        Orientation::Horizontal => rows,
        Orientation::Vertical => cols,
    };
    let n_lines = rng.random_range(3..7);
    let lines = distinct_lines(&mut rng, limit, n_lines);
    let amplitude = rng.random_range(10.0..20.0) * noise * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let (striped, stripes) = inject_stripes(&clean, &lines, orientation, amplitude, 0.1, rng.random())?;
    let (map, spikes) = inject_spikes(&striped, rng.random_range(3..8), 15.0 * noise, 6, rng.random())?;
    SynthSample::new(name.to_string(), clean, map, vec![stripes, spikes])
}

/// Named corpus recipes for the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Stripes,
    Spikes,
    Ripple40,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Stripes => "stripes",
            Preset::Spikes => "spikes",
            Preset::Ripple40 => "ripple40",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stripes" => Ok(Preset::Stripes),
            "spikes" => Ok(Preset::Spikes),
            "ripple40" => Ok(Preset::Ripple40),
            other => Err(format!("unknown preset `{other}` (expected stripes, spikes or ripple40)")),
        }
    }
}

/// Ripple stress-test defaults: 40% amplitude at 0.01 cycles per pixel.
pub fn ripple40(theta: f64) -> RippleParams {
    RippleParams {
        alpha: 0.40,
        freq: 0.01,
        theta,
        phi: 0.0,
    }
}

/// Filament surface on a raw piezo offset and tilt, before any ripple.
pub fn ripple_base(rows: usize, cols: usize, seed: u64) -> Result<HeightMap, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dna = dna_like_surface(rows, cols, 8, 2.0, rng.random())?;
    let plane = make_surface(
        rows,
        cols,
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(40.0..60.0),
        &[],
    )?;
    let sum: Vec<f64> = dna.data().iter().zip(plane.data()).map(|(a, b)| a + b).collect();
    add_noise(&dna.with_data(sum)?, 0.1, rng.random())
}

pub fn generate_preset(preset: Preset, count: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>, SynthError> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed.wrapping_add(i as u64);
        let name = format!("{}_{i:03}", preset.name());
        let sample = match preset {
            Preset::Stripes => stripes_and_spikes_sample(&name, size, size, s)?,
            Preset::Spikes => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let clean = random_background(size, size, 0.5, &mut rng)?;
                let (map, rec) = inject_spikes(&clean, 10, 7.5, 6, rng.random())?;
                SynthSample::new(name, clean, map, vec![rec])?
            }
            Preset::Ripple40 => {
                let clean = ripple_base(size, size, s)?;
                let theta = if i % 2 == 0 { 0.0 } else { 90.0 };
                let map = add_ripple(&clean, &ripple40(theta))?;
                SynthSample {
                    name,
                    truth: BitMask::empty(size, size, MaskStage::Final),
                    clean,
                    map,
                    records: Vec::new(),
                }
            }
        };
        out.push(sample);
    }
    Ok(out)
}
