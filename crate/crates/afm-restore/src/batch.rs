//! Directory batch runner: classify, then mask, flatten, restore and export
//! each defective image.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use afm_core::classify::{DefectClass, RuleClassifier};
use afm_core::metrics::MetricsReport;
use afm_core::spm_io::{read_any, to_grayscale, write_mask_txt, write_txt_matrix};
use afm_core::HeightMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::error::{Stage, StageError};
use crate::stages;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BatchError + '_ {
    move |source| BatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub stage: Stage,
    pub status: JobStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    /// Input file name.
    pub file: String,
    /// Output base name; files are `<name>.txt`, `<name>.png` and so on.
    pub name: String,
    pub status: JobStatus,
    pub label: Option<DefectClass>,
    /// False when the gate exported the input unchanged.
    pub restored: bool,
    pub metrics: Option<MetricsReport>,
    pub jobs: Vec<JobResult>,
    pub error: Option<StageError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub total: usize,
    pub ok: usize,
    pub failed: usize,
    pub exported_unchanged: usize,
    pub images: Vec<ImageResult>,
    /// Per-metric mean and std over restored images.
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl BatchReport {
    pub fn has_errors(&self) -> bool {
        self.failed > 0
    }
}

/// Regular, non-hidden files of `dir` in name order.
pub fn list_inputs(dir: &Path) -> Result<Vec<PathBuf>, BatchError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// File stems, falling back to the full file name when stems collide.
fn output_names(files: &[PathBuf]) -> Vec<String> {
    let stem = |p: &PathBuf| p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for f in files {
        *counts.entry(stem(f)).or_default() += 1;
    }
    files
        .iter()
        .map(|f| {
            let s = stem(f);
            if counts[&s] > 1 {
                f.file_name().unwrap_or_default().to_string_lossy().replace('.', "_")
            } else {
                s
            }
        })
        .collect()
}

pub fn run_batch(input_dir: &Path, output_dir: &Path, cfg: &RunConfig) -> Result<BatchReport, BatchError> {
    std::fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let files = list_inputs(input_dir)?;
    let names = output_names(&files);
    let classifier = RuleClassifier {
        thresholds: cfg.thresholds.clone(),
    };
    let mut images = Vec::with_capacity(files.len());
    for (file, name) in files.iter().zip(names) {
        let started = std::time::Instant::now();
        let result = process_file(file, &name, output_dir, cfg, &classifier);
        log::info!(
            "{}: {:?} in {:.0} ms",
            result.file,
            result.status,
            started.elapsed().as_secs_f64() * 1e3
        );
        images.push(result);
    }
    let report = summarize(images);
    let path = output_dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(report)
}

fn summarize(images: Vec<ImageResult>) -> BatchReport {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in images.iter().filter_map(|i| i.metrics.as_ref()) {
        if let Ok(serde_json::Value::Object(obj)) = serde_json::to_value(m) {
            for (k, v) in obj {
                if let Some(x) = v.as_f64() {
                    columns.entry(k).or_default().push(x);
                }
            }
        }
    }
    let aggregate = columns
        .into_iter()
        .filter_map(|(k, v)| MeanStd::of(&v).map(|s| (k, s)))
        .collect();
    let failed = images.iter().filter(|i| i.status == JobStatus::Error).count();
    BatchReport {
        total: images.len(),
        ok: images.len() - failed,
        failed,
        exported_unchanged: images
            .iter()
            .filter(|i| i.status == JobStatus::Ok && !i.restored)
            .count(),
        images,
        aggregate,
    }
}

struct Run<'a> {
    jobs: Vec<JobResult>,
    out: &'a Path,
    name: &'a str,
}

impl Run<'_> {
    fn ok(&mut self, stage: Stage, detail: impl Into<String>) {
        self.jobs.push(JobResult {
            stage,
            status: JobStatus::Ok,
            detail: detail.into(),
        });
    }

    fn write(&self, suffix: &str, bytes: &[u8]) -> Result<(), StageError> {
        let path = self.out.join(format!("{}{suffix}", self.name));
        std::fs::write(&path, bytes).map_err(|e| StageError {
            stage: Stage::Export,
            name: "Io".into(),
            field: None,
            detail: format!("{}: {e}", path.display()),
        })
    }

    fn export_map(&self, map: &HeightMap) -> Result<(), StageError> {
        self.write(".txt", write_txt_matrix(map).as_bytes())?;
        let gray = to_grayscale(map);
        let img = image::GrayImage::from_raw(gray.cols as u32, gray.rows as u32, gray.pixels)
            .expect("grayscale buffer matches its size");
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| StageError {
                stage: Stage::Export,
                name: "Image".into(),
                field: None,
                detail: e.to_string(),
            })?;
        self.write(".png", &png)
    }
}

fn process_file(file: &Path, name: &str, out: &Path, cfg: &RunConfig, classifier: &RuleClassifier) -> ImageResult {
    let mut run = Run {
        jobs: Vec::new(),
        out,
        name,
    };
    let mut label = None;
    let mut restored = false;
    let mut metrics = None;
    let outcome = (|| -> Result<(), StageError> {
        let bytes = std::fs::read(file).map_err(|e| StageError {
            stage: Stage::Load,
            name: "Io".into(),
            field: None,
            detail: e.to_string(),
        })?;
        let map = read_any(&bytes).map_err(|e| StageError::new(Stage::Load, &e))?;
        run.ok(Stage::Load, format!("{}x{}", map.rows(), map.cols()));

        if cfg.classify {
            let c = stages::classify(&map, classifier, &cfg.params);
            label = Some(c.label);
            run.ok(Stage::Classify, c.label.to_string());
            if c.label == DefectClass::Good {
                run.export_map(&map)?;
                run.ok(Stage::Export, "unchanged");
                return Ok(());
            }
        }

        let bundle = stages::mask(&map, &cfg.params, cfg.mask_options())?;
        run.ok(Stage::Mask, format!("{} pixels", bundle.expanded.count()));
        let flat = stages::flatten(&map, &cfg.flatten, Some(&bundle), &[])?;
        run.ok(Stage::Flatten, "");
        let fixed = stages::restore(&flat, &bundle, &cfg.restore, &cfg.params)?;
        let region = stages::restored_region(&bundle, &cfg.restore, &cfg.params)?;
        run.ok(Stage::Restore, format!("{} pixels", region.count()));
        let report = stages::metrics(&map, Some(&flat), Some(&fixed), Some(&region), &cfg.flatten)?;
        run.ok(Stage::Metrics, "");

        run.export_map(&fixed)?;
        run.write(".raw_mask.txt", write_mask_txt(&bundle.raw).as_bytes())?;
        run.write(".mask.txt", write_mask_txt(&region).as_bytes())?;
        let json = serde_json::to_string_pretty(&report).expect("metrics serialize");
        run.write(".metrics.json", json.as_bytes())?;
        run.ok(Stage::Export, "restored");
        restored = true;
        metrics = Some(report);
        Ok(())
    })();

    let file_name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let error = outcome.err();
    if let Some(e) = &error {
        log::warn!("{file_name}: {e}");
        run.jobs.push(JobResult {
            stage: e.stage,
            status: JobStatus::Error,
            detail: e.detail.clone(),
        });
    }
    ImageResult {
        file: file_name,
        name: name.to_string(),
        status: if error.is_some() { JobStatus::Error } else { JobStatus::Ok },
        label,
        restored,
        metrics,
        jobs: run.jobs,
        error,
    }
}
