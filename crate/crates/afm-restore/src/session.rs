//! In-memory editing sessions with revision counting and optional
//! directory persistence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use afm_core::classify::{Classification, RuleClassifier};
use afm_core::flatten::{FlattenConfig, FlattenDirection};
use afm_core::maskgen::{MaskBundle, MaskOptions, PipelineParams};
use afm_core::metrics::MetricsReport;
use afm_core::restore::RestoreConfig;
use afm_core::spm_io::{read_txt_matrix, write_txt_matrix};
use afm_core::{BitMask, HeightMap};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::error::{Stage, StageError};
use crate::stages;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("unknown image `{0}`")]
    NotFound(String),
    #[error("a run is in progress for this image")]
    Busy,
    #[error("stale revision {got}, current is {current}")]
    StaleRevision { current: u64, got: u64 },
    #[error("stage `{0}` has not been computed")]
    MissingStage(&'static str),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("persistence: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeightStage {
    #[default]
    Original,
    Flattened,
    Restored,
}

impl HeightStage {
    pub fn name(self) -> &'static str {
        match self {
            HeightStage::Original => "original",
            HeightStage::Flattened => "flattened",
            HeightStage::Restored => "restored",
        }
    }
}

/// Flatten settings accepted from clients; exclusions come from the
/// session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlattenRequest {
    pub direction: FlattenDirection,
    pub order: u8,
    pub mask_aware: bool,
}

impl Default for FlattenRequest {
    fn default() -> Self {
        let d = FlattenConfig::default();
        FlattenRequest {
            direction: d.direction,
            order: d.order,
            mask_aware: d.mask_aware,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub image_id: String,
    pub original: HeightMap,
    pub flattened: Option<HeightMap>,
    pub restored: Option<HeightMap>,
    pub bundle: Option<MaskBundle>,
    /// Pixels the last restoration was allowed to change.
    pub restored_region: Option<BitMask>,
    pub params: PipelineParams,
    pub mask_options: MaskOptions,
    pub flatten_cfg: FlattenConfig,
    pub restore_cfg: RestoreConfig,
    pub user_exclusions: Vec<[usize; 4]>,
    pub classification: Option<Classification>,
    pub metrics: MetricsReport,
    pub revision: u64,
}

impl Session {
    pub fn new(image_id: String, original: HeightMap, defaults: &RunConfig) -> Self {
        let mut s = Session {
            image_id,
            original,
            flattened: None,
            restored: None,
            bundle: None,
            restored_region: None,
            params: defaults.params.clone(),
            mask_options: defaults.mask_options(),
            flatten_cfg: defaults.flatten.clone(),
            restore_cfg: defaults.restore.clone(),
            user_exclusions: Vec::new(),
            classification: None,
            metrics: MetricsReport::default(),
            revision: 0,
        };
        s.metrics = s.compute_metrics().unwrap_or_default();
        s
    }

    pub fn height(&self, stage: HeightStage) -> Option<&HeightMap> {
        match stage {
            HeightStage::Original => Some(&self.original),
            HeightStage::Flattened => self.flattened.as_ref(),
            HeightStage::Restored => self.restored.as_ref(),
        }
    }

    /// Latest computed stage.
    pub fn latest(&self) -> (HeightStage, &HeightMap) {
        if let Some(m) = &self.restored {
            (HeightStage::Restored, m)
        } else if let Some(m) = &self.flattened {
            (HeightStage::Flattened, m)
        } else {
            (HeightStage::Original, &self.original)
        }
    }

    fn compute_metrics(&self) -> Result<MetricsReport, StageError> {
        let region = self.restored_region.as_ref().or(self.bundle.as_ref().map(|b| &b.expanded));
        stages::metrics(
            &self.original,
            self.flattened.as_ref(),
            self.restored.as_ref(),
            region,
            &self.flatten_cfg,
        )
    }

    fn commit(&mut self) -> Result<(), SessionError> {
        self.metrics = self.compute_metrics()?;
        self.revision += 1;
        Ok(())
    }

    fn clear_from_flatten(&mut self) {
        self.flattened = None;
        self.clear_restore();
    }

    fn clear_restore(&mut self) {
        self.restored = None;
        self.restored_region = None;
    }

    pub fn classify(&mut self, classifier: &RuleClassifier) -> Result<Classification, SessionError> {
        let c = stages::classify(&self.original, classifier, &self.params);
        self.classification = Some(c.clone());
        self.commit()?;
        Ok(c)
    }

    /// Recomputes the mask bundle; downstream stages are dropped.
    pub fn run_mask(&mut self, params: PipelineParams, options: MaskOptions) -> Result<&MaskBundle, SessionError> {
        let bundle = stages::mask(&self.original, &params, options)?;
        self.params = params;
        self.mask_options = options;
        self.bundle = Some(bundle);
        self.clear_from_flatten();
        self.commit()?;
        Ok(self.bundle.as_ref().expect("bundle just stored"))
    }

    /// Replaces the user exclusions, clamped to the image; downstream stages
    /// are dropped.
    pub fn set_exclusions(&mut self, rects: &[[usize; 4]]) -> Result<&[[usize; 4]], SessionError> {
        let (rows, cols) = self.original.shape();
        let mut clamped = Vec::with_capacity(rects.len());
        for (i, &[r0, c0, r1, c1]) in rects.iter().enumerate() {
            if r0 > r1 || c0 > c1 {
                return Err(StageError::invalid(Stage::Exclusions, "rects", format!("rectangle {i} has r0 > r1 or c0 > c1")).into());
            }
            if r0 >= rows || c0 >= cols {
                continue;
            }
            clamped.push([r0, c0, r1.min(rows - 1), c1.min(cols - 1)]);
        }
        self.user_exclusions = clamped;
        self.clear_from_flatten();
        self.commit()?;
        Ok(&self.user_exclusions)
    }

    pub fn run_flatten(&mut self, req: FlattenRequest) -> Result<&HeightMap, SessionError> {
        let cfg = FlattenConfig {
            direction: req.direction,
            order: req.order,
            mask_aware: req.mask_aware,
            exclusion: Vec::new(),
        };
        let flat = stages::flatten(&self.original, &cfg, self.bundle.as_ref(), &self.user_exclusions)?;
        self.flatten_cfg = cfg;
        self.flattened = Some(flat);
        self.clear_restore();
        self.commit()?;
        Ok(self.flattened.as_ref().expect("flattened just stored"))
    }

    pub fn run_restore(&mut self, cfg: RestoreConfig) -> Result<&HeightMap, SessionError> {
        let flat = self.flattened.as_ref().ok_or(SessionError::MissingStage("flattened"))?;
        let bundle = self.bundle.as_ref().ok_or(SessionError::MissingStage("mask"))?;
        let fixed = stages::restore(flat, bundle, &cfg, &self.params)?;
        let region = stages::restored_region(bundle, &cfg, &self.params)?;
        self.restore_cfg = cfg;
        self.restored = Some(fixed);
        self.restored_region = Some(region);
        self.commit()?;
        Ok(self.restored.as_ref().expect("restored just stored"))
    }
}

/// Session settings written next to the height maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    image_id: String,
    revision: u64,
    params: PipelineParams,
    mask_options: MaskOptions,
    has_mask: bool,
    flatten: Option<FlattenConfig>,
    restore: Option<RestoreConfig>,
    user_exclusions: Vec<[usize; 4]>,
    classification: Option<Classification>,
}

pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    defaults: RunConfig,
    classifier: RuleClassifier,
    persist_dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn new(defaults: RunConfig) -> Self {
        let classifier = RuleClassifier {
            thresholds: defaults.thresholds.clone(),
        };
        SessionStore {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            defaults,
            classifier,
            persist_dir: None,
        }
    }

    /// Store saving every mutation under `dir`, seeded with the sessions
    /// already there.
    pub fn with_persistence(defaults: RunConfig, dir: &Path) -> Result<Self, SessionError> {
        let mut store = SessionStore::new(defaults);
        std::fs::create_dir_all(dir).map_err(|e| SessionError::Persist(e.to_string()))?;
        store.persist_dir = Some(dir.to_path_buf());
        let mut max_id = 0;
        let entries = std::fs::read_dir(dir).map_err(|e| SessionError::Persist(e.to_string()))?;
        for entry in entries.flatten() {
            if !entry.path().join("session.json").is_file() {
                continue;
            }
            match store.load_session(&entry.path()) {
                Ok(s) => {
                    max_id = max_id.max(id_number(&s.image_id));
                    store.sessions.write().insert(s.image_id.clone(), Arc::new(Mutex::new(s)));
                }
                Err(e) => log::warn!("skipping {}: {e}", entry.path().display()),
            }
        }
        store.next_id.store(max_id + 1, Ordering::SeqCst);
        Ok(store)
    }

    pub fn defaults(&self) -> &RunConfig {
        &self.defaults
    }

    pub fn classifier(&self) -> &RuleClassifier {
        &self.classifier
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn create(&self, map: HeightMap) -> Result<String, SessionError> {
        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        let id = format!("img-{n:06}");
        let session = Session::new(id.clone(), map, &self.defaults);
        self.persist(&session)?;
        self.sessions.write().insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    fn slot(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    /// Runs `f` on a consistent snapshot, waiting for a running mutation.
    pub fn read<R>(&self, id: &str, f: impl FnOnce(&Session) -> R) -> Result<R, SessionError> {
        let slot = self.slot(id)?;
        let guard = slot.lock();
        Ok(f(&guard))
    }

    /// Runs a mutation, rejecting it while another one holds the session or
    /// when `expected` is not the current revision. A failed mutation leaves
    /// the session unchanged.
    pub fn mutate<R>(
        &self,
        id: &str,
        expected: Option<u64>,
        f: impl FnOnce(&mut Session) -> Result<R, SessionError>,
    ) -> Result<R, SessionError> {
        let slot = self.slot(id)?;
        let mut guard = slot.try_lock().ok_or(SessionError::Busy)?;
        if let Some(got) = expected {
            if got != guard.revision {
                return Err(SessionError::StaleRevision {
                    current: guard.revision,
                    got,
                });
            }
        }
        let mut work = guard.clone();
        let out = f(&mut work)?;
        self.persist(&work)?;
        *guard = work;
        Ok(out)
    }

    fn persist(&self, s: &Session) -> Result<(), SessionError> {
        let Some(root) = &self.persist_dir else {
            return Ok(());
        };
        let err = |e: std::io::Error| SessionError::Persist(e.to_string());
        let dir = root.join(&s.image_id);
        std::fs::create_dir_all(&dir).map_err(err)?;
        let record = SessionRecord {
            image_id: s.image_id.clone(),
            revision: s.revision,
            params: s.params.clone(),
            mask_options: s.mask_options,
            has_mask: s.bundle.is_some(),
            flatten: s.flattened.as_ref().map(|_| s.flatten_cfg.clone()),
            restore: s.restored.as_ref().map(|_| s.restore_cfg.clone()),
            user_exclusions: s.user_exclusions.clone(),
            classification: s.classification.clone(),
        };
        std::fs::write(dir.join("original.txt"), write_txt_matrix(&s.original)).map_err(err)?;
        for (stage, map) in [("flattened", &s.flattened), ("restored", &s.restored)] {
            let path = dir.join(format!("{stage}.txt"));
            match map {
                Some(m) => std::fs::write(&path, write_txt_matrix(m)).map_err(err)?,
                None if path.exists() => std::fs::remove_file(&path).map_err(err)?,
                None => {}
            }
        }
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        std::fs::write(dir.join("session.json"), json).map_err(err)?;
        Ok(())
    }

    /// Rebuilds a saved session. Masks are recomputed from the stored
    /// parameters, which reproduces them exactly.
    fn load_session(&self, dir: &Path) -> Result<Session, SessionError> {
        let perr = |e: &dyn std::fmt::Display| SessionError::Persist(e.to_string());
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|e| perr(&e));
        let record: SessionRecord = serde_json::from_str(&read("session.json")?).map_err(|e| perr(&e))?;
        let original = read_txt_matrix(&read("original.txt")?).map_err(|e| perr(&e))?;
        let mut s = Session::new(record.image_id.clone(), original, &self.defaults);
        s.params = record.params;
        s.mask_options = record.mask_options;
        s.user_exclusions = record.user_exclusions;
        s.classification = record.classification;
        if record.has_mask {
            s.bundle = Some(stages::mask(&s.original, &s.params, s.mask_options)?);
        }
        if let Some(cfg) = record.flatten {
            s.flatten_cfg = cfg;
            s.flattened = Some(read_txt_matrix(&read("flattened.txt")?).map_err(|e| perr(&e))?);
        }
        if let Some(cfg) = record.restore {
            let bundle = s.bundle.as_ref().ok_or(SessionError::MissingStage("mask"))?;
            s.restored_region = Some(stages::restored_region(bundle, &cfg, &s.params)?);
            s.restore_cfg = cfg;
            s.restored = Some(read_txt_matrix(&read("restored.txt")?).map_err(|e| perr(&e))?);
        }
        s.metrics = s.compute_metrics()?;
        s.revision = record.revision;
        Ok(s)
    }
}

fn id_number(id: &str) -> u64 {
    id.strip_prefix("img-").and_then(|n| n.parse().ok()).unwrap_or(0)
}
