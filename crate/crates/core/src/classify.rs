//! Gate separating clean scans from defective ones, with the evaluation
//! metrics used to score it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flatten::{flatten_lines, LineDirection};
use crate::grid::HeightMap;
use crate::maskgen::{detect_spikes, PipelineParams};
use crate::stats;
use crate::synth::{self, make_surface, Bump, SynthError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifyError {
    #[error("predicted has {predicted} labels but truth has {truth}")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("no labels to evaluate")]
    Empty,
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("malformed threshold file: {0}")]
    Parse(String),
    #[error("unsupported threshold file version {0:?}")]
    UnsupportedVersion(String),
    #[error("invalid threshold {field}: {value}")]
    InvalidThreshold { field: &'static str, value: f64 },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    Good,
    NotTracking,
    TipContamination,
    ImagingArtifacts,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::Good,
        DefectClass::NotTracking,
        DefectClass::TipContamination,
        DefectClass::ImagingArtifacts,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Good => "good",
            DefectClass::NotTracking => "not_tracking",
            DefectClass::TipContamination => "tip_contamination",
            DefectClass::ImagingArtifacts => "imaging_artifacts",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectClass {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DefectClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ClassifyError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Mean `1 - r` over consecutive row pairs, `r` the Pearson correlation.
    pub row_decorrelation: f64,
    /// Fraction of pixels flagged by the despike rule.
    pub spike_density: f64,
    /// Twice the largest normalized autocorrelation of the fast-axis
    /// derivative at lags of 2 or more, clamped to [-1, 1].
    pub duplication_score: f64,
    /// Standard deviation of row-flattened residuals.
    pub roughness: f64,
}

/// Pearson correlation with `r = 1` for two constant rows and `r = 0` when
/// exactly one is constant.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    match (saa == 0.0, sbb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
    }
}

fn row_decorrelation(map: &HeightMap) -> f64 {
    let pairs = map.rows() - 1;
    let total: f64 = (0..pairs).map(|r| 1.0 - pearson(map.row(r), map.row(r + 1))).sum();
    total / pairs as f64
}

const MIN_LAG: usize = 2;
const MAX_LAG: usize = 16;

fn duplication_score(residual: &HeightMap) -> f64 {
    let (rows, cols) = residual.shape();
    if cols < MIN_LAG + 2 {
        return 0.0;
    }
    let diffs: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            let row = residual.row(r);
            let d: Vec<f64> = row.windows(2).map(|w| w[1] - w[0]).collect();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.into_iter().map(|x| x - m).collect()
        })
        .collect();
    let energy: f64 = diffs.iter().flatten().map(|x| x * x).sum();
    if energy == 0.0 {
        return 0.0;
    }
    let max_lag = MAX_LAG.min((cols - 1) / 2).max(MIN_LAG);
    let mut best = f64::NEG_INFINITY;
    for lag in MIN_LAG..=max_lag {
        let acc: f64 = diffs
            .iter()
            .map(|d| d.iter().zip(&d[lag..]).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        best = best.max(acc / energy);
    }
    (2.0 * best).clamp(-1.0, 1.0)
}

pub fn extract_features(map: &HeightMap, params: &PipelineParams) -> FeatureVector {
    let spikes = detect_spikes(map, params.win, params.lam).map(|m| m.count()).unwrap_or(0);
    let residual = flatten_lines(map, LineDirection::Row, 1, None).unwrap_or_else(|_| map.clone());
    FeatureVector {
        row_decorrelation: row_decorrelation(map),
        spike_density: spikes as f64 / map.len() as f64,
        duplication_score: duplication_score(&residual),
        roughness: stats::mean_std(residual.data()).1,
    }
}

pub const THRESHOLDS_VERSION: &str = "1";

/// Cut-points of the rule classifier; a defect fires when its feature
/// reaches the cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub version: String,
    pub row_decorrelation: f64,
    pub duplication_score: f64,
    pub spike_density: f64,
}

/// Shipped cut-points: [`calibrate`] on `labeled_corpus(200, 64, 1)`, rounded.
impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            version: THRESHOLDS_VERSION.to_string(),
            row_decorrelation: 0.17,
            duplication_score: 0.57,
            spike_density: 0.0057,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.version != THRESHOLDS_VERSION {
            return Err(ClassifyError::UnsupportedVersion(self.version.clone()));
        }
        for (field, value) in [
            ("row_decorrelation", self.row_decorrelation),
            ("duplication_score", self.duplication_score),
            ("spike_density", self.spike_density),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ClassifyError::InvalidThreshold { field, value });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifyError> {
        let t: Thresholds = serde_json::from_str(text).map_err(|e| ClassifyError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

const GOOD_SCORE_CAP: f64 = 1e6;

/// Per-class scores: defect scores are feature / cut (fires at >= 1); the
/// Good score is the reciprocal of the largest defect score, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub good: f64,
    pub not_tracking: f64,
    pub tip_contamination: f64,
    pub imaging_artifacts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: DefectClass,
    pub scores: ClassScores,
    pub features: FeatureVector,
}

pub fn classify(features: &FeatureVector, thresholds: &Thresholds) -> Classification {
    let ratio = |v: f64, cut: f64| (v / cut).max(0.0);
    let not_tracking = ratio(features.row_decorrelation, thresholds.row_decorrelation);
    let tip_contamination = ratio(features.duplication_score, thresholds.duplication_score);
    let imaging_artifacts = ratio(features.spike_density, thresholds.spike_density);
    let worst = not_tracking.max(tip_contamination).max(imaging_artifacts);
    let label = [
        (DefectClass::NotTracking, not_tracking),
        (DefectClass::TipContamination, tip_contamination),
        (DefectClass::ImagingArtifacts, imaging_artifacts),
    ]
    .into_iter()
    .find(|&(_, s)| s >= 1.0)
    .map_or(DefectClass::Good, |(c, _)| c);
    Classification {
        label,
        scores: ClassScores {
            good: if worst > 0.0 { (1.0 / worst).min(GOOD_SCORE_CAP) } else { GOOD_SCORE_CAP },
            not_tracking,
            tip_contamination,
            imaging_artifacts,
        },
        features: *features,
    }
}

/// A pluggable gate; the rule baseline is the default implementation.
pub trait Classifier: Send + Sync {
    fn name(&self) -> &str;
    fn classify(&self, map: &HeightMap, params: &PipelineParams) -> Classification;
}

#[derive(Debug, Clone, Default)]
pub struct RuleClassifier {
    pub thresholds: Thresholds,
}

impl Classifier for RuleClassifier {
    fn name(&self) -> &str {
        "rules"
    }

    fn classify(&self, map: &HeightMap, params: &PipelineParams) -> Classification {
        classify(&extract_features(map, params), &self.thresholds)
    }
}

/// One-vs-rest cut for a single feature maximizing accuracy over the
/// labeled samples.
fn best_cut(samples: &[(f64, bool)]) -> f64 {
    let mut values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut best = (0usize, values.last().copied().unwrap_or(1.0));
    for w in values.windows(2) {
        let cut = (w[0] + w[1]) / 2.0;
        let correct = samples.iter().filter(|&&(v, positive)| (v >= cut) == positive).count();
        if correct > best.0 {
            best = (correct, cut);
        }
    }
    best.1
}

/// Fits the three cut-points on labeled feature vectors.
pub fn calibrate(samples: &[(FeatureVector, DefectClass)]) -> Thresholds {
    let column = |f: fn(&FeatureVector) -> f64, class: DefectClass| -> Vec<(f64, bool)> {
        samples.iter().map(|(fv, c)| (f(fv), *c == class)).collect()
    };
    let positive = |v: f64| if v > 0.0 { v } else { f64::MIN_POSITIVE };
    Thresholds {
        version: THRESHOLDS_VERSION.to_string(),
        row_decorrelation: positive(best_cut(&column(|f| f.row_decorrelation, DefectClass::NotTracking))),
        duplication_score: positive(best_cut(&column(|f| f.duplication_score, DefectClass::TipContamination))),
        spike_density: positive(best_cut(&column(|f| f.spike_density, DefectClass::ImagingArtifacts))),
    }
}

/// Tilted, bumpy scan with a pronounced fast-axis slope, as raw data
/// usually has.
fn labeled_base(size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<HeightMap, ClassifyError> {
    let bumps: Vec<Bump> = (0..rng.random_range(2..6))
        .map(|_| Bump {
            row: rng.random_range(0.0..size as f64),
            col: rng.random_range(0.0..size as f64),
            sigma: rng.random_range(3.0..8.0),
            height: rng.random_range(2.0..6.0),
        })
        .collect();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let surface = make_surface(
        size,
        size,
        sign * rng.random_range(0.1..0.2),
        rng.random_range(-0.1..0.1),
        rng.random_range(-20.0..20.0),
        &bumps,
    )?;
    Ok(synth::add_noise(&surface, noise, rng.random())?)
}

/// One labeled image of the given class.
pub fn labeled_sample(class: DefectClass, size: usize, seed: u64) -> Result<HeightMap, ClassifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = 0.3;
    let base = labeled_base(size, noise, &mut rng)?;
    Ok(match class {
        DefectClass::Good => base,
        DefectClass::NotTracking => {
            let spread = stats::mean_std(base.data()).1;
            let target = (size as f64 * rng.random_range(0.2..0.4)).round() as usize;
            let bands = rng.random_range(1..=3usize);
            let mut lines = Vec::new();
            for b in 0..bands {
                let len = target / bands + usize::from(b < target % bands);
                let start = rng.random_range(0..size - len);
                lines.extend(start..start + len);
            }
            lines.sort_unstable();
            lines.dedup();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let amplitude = sign * rng.random_range(5.0..10.0) * spread;
            synth::inject_tracking_loss(&base, &lines, amplitude, 0.1, rng.random())?.0
        }
        DefectClass::TipContamination => {
            let doubled = synth::duplicate_tip(&base, rng.random_range(3..=8))?;
            synth::add_noise(&doubled, 0.1 * noise, rng.random())?
        }
        DefectClass::ImagingArtifacts => {
            let count = (size * size) as f64 * rng.random_range(0.01..0.02);
            let amplitude = rng.random_range(8.0..15.0) * noise;
            synth::inject_spikes(&base, count as usize, amplitude, 2, rng.random())?.0
        }
    })
}

/// Balanced labeled corpus cycling through the four classes.
pub fn labeled_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<(HeightMap, DefectClass)>, ClassifyError> {
    (0..count)
        .map(|i| {
            let class = DefectClass::ALL[i % 4];
            let map = labeled_sample(class, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            Ok((map.with_source_id(format!("{class}-{i:04}")), class))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: DefectClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// `confusion[truth][predicted]` in [`DefectClass::ALL`] order.
    pub confusion: [[usize; 4]; 4],
    /// Classes present in the truth or the predictions.
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub fn evaluate(predicted: &[DefectClass], truth: &[DefectClass]) -> Result<ClassificationReport, ClassifyError> {
    if predicted.len() != truth.len() {
        return Err(ClassifyError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let mut confusion = [[0usize; 4]; 4];
    for (p, t) in predicted.iter().zip(truth) {
        confusion[t.index()][p.index()] += 1;
    }
    let total = truth.len();
    let trace: usize = (0..4).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::new();
    for class in DefectClass::ALL {
        let k = class.index();
        let support: usize = confusion[k].iter().sum();
        let predicted_k: usize = (0..4).map(|t| confusion[t][k]).sum();
        if support == 0 && predicted_k == 0 {
            continue;
        }
        let tp = confusion[k][k] as f64;
        let precision = if predicted_k == 0 { 0.0 } else { tp / predicted_k as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class,
            precision,
            recall,
            f1,
            support,
        });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64;
    let weighted_f1 = per_class.iter().map(|m| m.f1 * (m.support as f64 / total as f64)).sum::<f64>();
    Ok(ClassificationReport {
        confusion,
        per_class,
        accuracy: trace as f64 / total as f64,
        macro_f1,
        weighted_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_features() {
        let f = extract_features(&HeightMap::constant(16, 16, 2.0).unwrap(), &PipelineParams::default());
        assert_eq!(f.row_decorrelation, 0.0);
        assert_eq!(f.spike_density, 0.0);
        assert_eq!(f.duplication_score, 0.0);
    }

    #[test]
    fn tie_priority() {
        let t = Thresholds::default();
        let f = FeatureVector {
            row_decorrelation: 1.0,
            spike_density: 1.0,
            duplication_score: 1.0,
            roughness: 0.0,
        };
        assert_eq!(classify(&f, &t).label, DefectClass::NotTracking);
        let f = FeatureVector {
            row_decorrelation: 0.0,
            ..f
        };
        assert_eq!(classify(&f, &t).label, DefectClass::TipContamination);
    }

    #[test]
    fn label_names_round_trip() {
        for c in DefectClass::ALL {
            assert_eq!(c.name().parse::<DefectClass>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
    }

    #[test]
    fn threshold_file_versioned() {
        let json = serde_json::to_string(&Thresholds::default()).unwrap();
        assert_eq!(Thresholds::from_json(&json).unwrap(), Thresholds::default());
        let bad = json.replace("\"1\"", "\"0\"");
        assert!(matches!(Thresholds::from_json(&bad), Err(ClassifyError::UnsupportedVersion(_))));
    }
}
