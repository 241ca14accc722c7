//! Thin wrappers over the library stages that tag failures with their stage.

use afm_core::classify::{Classification, Classifier};
use afm_core::flatten::{smart_flatten, FlattenConfig};
use afm_core::maskgen::{full_mask_pipeline_with, LineDeviationEstimator, MaskBundle, MaskError, MaskOptions, PipelineParams};
use afm_core::metrics::{stage_report, MetricsReport, StageMaps};
use afm_core::restore::{restore_pipeline, working_masks, RestoreConfig};
use afm_core::{BitMask, HeightMap};

use crate::error::{Stage, StageError};

pub fn classify(map: &HeightMap, classifier: &dyn Classifier, params: &PipelineParams) -> Classification {
    classifier.classify(map, params)
}

pub fn mask(map: &HeightMap, params: &PipelineParams, options: MaskOptions) -> Result<MaskBundle, StageError> {
    full_mask_pipeline_with(map, params, &LineDeviationEstimator::default(), options).map_err(mask_error)
}

pub fn mask_error(e: MaskError) -> StageError {
    let err = StageError::new(Stage::Mask, &e);
    match e {
        MaskError::InvalidParam { field, .. } => err.with_field(field),
        _ => err,
    }
}

/// Smart flatten with `rects` added to the configured exclusions and the
/// expanded mask as artifact mask.
pub fn flatten(
    map: &HeightMap,
    config: &FlattenConfig,
    bundle: Option<&MaskBundle>,
    rects: &[[usize; 4]],
) -> Result<HeightMap, StageError> {
    let mut cfg = config.clone();
    cfg.exclusion.extend_from_slice(rects);
    smart_flatten(map, &cfg, bundle.map(|b| &b.expanded), None).map_err(|e| {
        let err = StageError::new(Stage::Flatten, &e);
        match e {
            afm_core::flatten::FlattenError::InvalidOrder(_) => err.with_field("order"),
            _ => err,
        }
    })
}

pub fn restore(
    flattened: &HeightMap,
    bundle: &MaskBundle,
    config: &RestoreConfig,
    params: &PipelineParams,
) -> Result<HeightMap, StageError> {
    restore_pipeline(flattened, bundle, config, params).map_err(|e| {
        let err = StageError::new(Stage::Restore, &e);
        match e {
            afm_core::restore::RestoreError::InvalidConfig { field, .. } => err.with_field(field),
            _ => err,
        }
    })
}

/// Pixels the restoration may change: the expanded mask, widened to full
/// stripe lines when `full_expand` is set.
pub fn restored_region(bundle: &MaskBundle, config: &RestoreConfig, params: &PipelineParams) -> Result<BitMask, StageError> {
    working_masks(&bundle.expanded, config, params.ar)
        .map(|(work, _)| work)
        .map_err(|e| StageError::new(Stage::Restore, &e))
}

/// Metrics over the background of whichever stages exist.
pub fn metrics(
    original: &HeightMap,
    flattened: Option<&HeightMap>,
    restored: Option<&HeightMap>,
    region: Option<&BitMask>,
    flatten_cfg: &FlattenConfig,
) -> Result<MetricsReport, StageError> {
    let direction = flatten_cfg.metric_direction(original, region);
    stage_report(
        &StageMaps {
            original,
            flattened,
            restored,
            mask: region,
            truth: None,
        },
        direction,
    )
    .map_err(|e| StageError::new(Stage::Metrics, &e))
}
