//! Per-mask feature computation: view selection → 2D mask → crops →
//! embeddings → mean pooling.

mod provider;
mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use provider::{
    check_rows, EmbeddingProvider, PrecomputedCrop, PrecomputedManifest, PrecomputedProvider, PrecomputedText,
    ProviderError,
};
pub use store::{load_store, manifest_path as store_manifest_path, save_store, FeatureStatus, MaskFeatureStore, MaskRecord, StoreManifest, STORE_FORMAT_VERSION};

use crate::mask2d::{
    self, derive_seed, multiscale_crops, project_mask_pixels, select_2d_mask, tight_bbox, CropBox, CropRecord,
    Mask2dError, Segmenter,
};
use crate::npy::Matrix;
use crate::proposals::{InstanceMask3D, InstanceMaskSet, MaskProvenance};
use crate::scene::Scene;
use crate::visibility::{self, select_topk_views, InvalidDepthPolicy, OcclusionParams, VisibilityTable};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("segmentation failed for every attempted view ({attempted})")]
    Segmentation { attempted: usize },
    #[error("{source} ({} crop embeddings completed before the failure)", checkpoint.records.len())]
    Provider { source: ProviderError, checkpoint: Box<EmbeddingCheckpoint> },
    #[error(transparent)]
    Format(#[from] crate::error::FormatError),
    #[error("{0}")]
    Inconsistent(String),
}

/// Knobs of the feature computation. Defaults reproduce the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// Views per mask; `None` (written `"all"`) uses every frame with
    /// nonzero visibility.
    #[serde(with = "k_view_serde")]
    pub k_view: Option<usize>,
    pub k_threshold: f64,
    pub invalid_depth: InvalidDepthPolicy,
    pub k_rounds: usize,
    pub k_sample: usize,
    /// Crop levels `L` when `multiscale` is on.
    pub levels: usize,
    pub k_exp: f64,
    /// Refine each view with the segmenter; otherwise box the projected points.
    pub use_segmenter: bool,
    pub multiscale: bool,
    /// L2-normalize crop embeddings before averaging.
    pub normalize_crops: bool,
    pub batch_size: usize,
    pub master_seed: u64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            k_view: Some(visibility::DEFAULT_K_VIEW),
            k_threshold: visibility::DEFAULT_K_THRESHOLD,
            invalid_depth: InvalidDepthPolicy::NotVisible,
            k_rounds: mask2d::DEFAULT_K_ROUNDS,
            k_sample: mask2d::DEFAULT_K_SAMPLE,
            levels: mask2d::DEFAULT_LEVELS,
            k_exp: mask2d::DEFAULT_K_EXP,
            use_segmenter: true,
            multiscale: true,
            normalize_crops: false,
            batch_size: DEFAULT_BATCH_SIZE,
            master_seed: 0,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::Parameter(m.into()));
        if self.k_view == Some(0) {
            return bad("k_view must be at least 1");
        }
        if !(self.k_threshold >= 0.0 && self.k_threshold.is_finite()) {
            return bad("k_threshold must be a non-negative number");
        }
        if self.k_rounds == 0 || self.k_sample == 0 {
            return bad("k_rounds and k_sample must be at least 1");
        }
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if !(self.k_exp >= 0.0 && self.k_exp.is_finite()) {
            return bad("k_exp must be a non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn occlusion(&self) -> OcclusionParams {
        OcclusionParams { k_threshold: self.k_threshold, invalid_depth: self.invalid_depth }
    }

    pub fn effective_levels(&self) -> usize {
        if self.multiscale {
            self.levels
        } else {
            1
        }
    }
}

mod k_view_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(k) => Repr::Count(*k),
            None => Repr::Word("all".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(k) => Ok(Some(k)),
            Repr::Word(w) if w == "all" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("k_view must be a count or \"all\", got {w:?}"))),
        }
    }
}

/// Parameters plus the identities of the models that produced a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub params: FeatureParams,
    pub segmenter: Option<String>,
    pub provider: String,
}

impl ParamSnapshot {
    /// Human-readable list of fields that differ.
    pub fn differences(&self, other: &ParamSnapshot) -> Vec<String> {
        let a = serde_json::to_value(self).expect("snapshot serializes");
        let b = serde_json::to_value(other).expect("snapshot serializes");
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let null = serde_json::Value::Null;
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                diff_values(&path, x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} vs {b}")),
        _ => {}
    }
}

/// One selected view of a mask and the crops derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub frame_index: usize,
    /// Position of the frame in the scene's (subsampled) frame list.
    pub frame_position: usize,
    pub visibility_score: f32,
    /// Score of the selected 2D mask; `None` when boxes come from projected points.
    pub segmenter_score: Option<f32>,
    pub crops: Vec<CropBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedView {
    pub frame_index: usize,
    pub reason: String,
}

/// Crop plan for one mask: usable views and the ones skipped on the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub mask_id: usize,
    pub proposal: MaskProvenance,
    pub views: Vec<ViewPlan>,
    pub skipped: Vec<SkippedView>,
}

impl MaskPlan {
    pub fn num_crops(&self) -> usize {
        self.views.iter().map(|v| v.crops.len()).sum()
    }
}

fn plan_mask(
    mask: &InstanceMask3D,
    row: usize,
    scene: &Scene,
    table: &VisibilityTable,
    params: &FeatureParams,
    segmenter: Option<&dyn Segmenter>,
) -> Result<(MaskPlan, usize, usize), FeatureError> {
    let selection = select_topk_views(table, row, params.k_view).map_err(|e| FeatureError::Parameter(e.to_string()))?;
    let occlusion = params.occlusion();
    let levels = params.effective_levels();
    let mut plan = MaskPlan { mask_id: mask.id, proposal: mask.provenance, views: Vec::new(), skipped: Vec::new() };
    let (mut attempted, mut seg_failed) = (0, 0);
    for &pos in &selection.frames {
        let frame = &scene.frames[pos];
        let mut skip = |reason: String| {
            log::warn!("mask {}: skipping frame {}: {reason}", mask.id, frame.index);
            plan.skipped.push(SkippedView { frame_index: frame.index, reason });
        };
        let pixels = match project_mask_pixels(mask, frame, &scene.cloud, &occlusion) {
            Ok(p) => p,
            Err(e) => {
                skip(e.to_string());
                continue;
            }
        };
        let (b1, seg_score) = match (params.use_segmenter, segmenter) {
            (true, Some(seg)) => {
                attempted += 1;
                let seed = derive_seed(params.master_seed, mask.id, frame.index);
                let best = match select_2d_mask(
                    &pixels,
                    seg,
                    &frame.color,
                    frame.index,
                    mask.id,
                    params.k_rounds,
                    params.k_sample,
                    seed,
                ) {
                    Ok(m) => m,
                    Err(e @ Mask2dError::AllRoundsFailed { .. }) => {
                        seg_failed += 1;
                        skip(e.to_string());
                        continue;
                    }
                    Err(e) => {
                        skip(e.to_string());
                        continue;
                    }
                };
                match tight_bbox(&best) {
                    Ok(b) => (b, Some(best.score)),
                    Err(_) => {
                        skip("no 2D mask scored above zero".into());
                        continue;
                    }
                }
            }
            (true, None) => return Err(FeatureError::Parameter("use_segmenter is set but no segmenter was given".into())),
            (false, _) => match tight_bbox(&pixels) {
                Ok(b) => (b, None),
                Err(e) => {
                    skip(e.to_string());
                    continue;
                }
            },
        };
        let crops = multiscale_crops(b1, levels, params.k_exp, frame.color.width, frame.color.height);
        plan.views.push(ViewPlan {
            frame_index: frame.index,
            frame_position: pos,
            visibility_score: table.score(row, pos),
            segmenter_score: seg_score,
            crops,
        });
    }
    Ok((plan, attempted, seg_failed))
}

/// Selects views, refines 2D masks and derives crop boxes for every mask.
/// Runs in parallel over masks; the result does not depend on scheduling.
pub fn plan_crops(
    scene: &Scene,
    masks: &InstanceMaskSet,
    table: &VisibilityTable,
    params: &FeatureParams,
    segmenter: Option<&dyn Segmenter>,
) -> Result<Vec<MaskPlan>, FeatureError> {
    params.validate()?;
    if table.num_masks() != masks.len() || table.num_frames() != scene.frames.len() {
        return Err(FeatureError::Inconsistent(format!(
            "visibility table is {}x{} for {} masks and {} frames",
            table.num_masks(),
            table.num_frames(),
            masks.len(),
            scene.frames.len()
        )));
    }
    let results: Vec<(MaskPlan, usize, usize)> = masks
        .masks
        .par_iter()
        .enumerate()
        .map(|(row, m)| plan_mask(m, row, scene, table, params, segmenter))
        .collect::<Result<_, _>>()?;
    let attempted: usize = results.iter().map(|r| r.1).sum();
    let failed: usize = results.iter().map(|r| r.2).sum();
    if attempted > 0 && failed == attempted {
        return Err(FeatureError::Segmentation { attempted });
    }
    Ok(results.into_iter().map(|r| r.0).collect())
}

/// Flat list of crop records in plan order (mask, view, level).
pub fn crop_records(plans: &[MaskPlan], scene: &Scene) -> Vec<CropRecord> {
    plans
        .iter()
        .flat_map(|p| {
            p.views.iter().flat_map(move |v| {
                let image = &scene.frames[v.frame_position].color.path;
                v.crops.iter().map(move |b| CropRecord::new(p.mask_id, v.frame_index, b, image))
            })
        })
        .collect()
}

/// Embeddings gathered before a provider failure.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCheckpoint {
    pub records: Vec<CropRecord>,
    pub embeddings: Vec<Vec<f32>>,
}

/// Entrywise mean of the crop embeddings; `None` for an empty list.
pub fn aggregate_mask_feature(crop_embeddings: &[Vec<f32>]) -> Option<Vec<f32>> {
    let first = crop_embeddings.first()?;
    let mut acc = vec![0.0f64; first.len()];
    for e in crop_embeddings {
        assert_eq!(e.len(), acc.len(), "crop embeddings must share dimensionality");
        for (a, v) in acc.iter_mut().zip(e) {
            *a += *v as f64;
        }
    }
    let n = crop_embeddings.len() as f64;
    Some(acc.into_iter().map(|a| (a / n) as f32).collect())
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| (*x as f64 / norm) as f32).collect()
}

/// Embeds every planned crop (in batches) and pools them per mask.
pub fn embed_plans(
    scene: &Scene,
    plans: &[MaskPlan],
    params: &FeatureParams,
    provider: &dyn EmbeddingProvider,
    snapshot: ParamSnapshot,
) -> Result<MaskFeatureStore, FeatureError> {
    params.validate()?;
    let dim = provider.dim();
    let records = crop_records(plans, scene);
    let mut embeddings: Vec<Vec<f32>> = Vec::with_capacity(records.len());
    for batch in records.chunks(params.batch_size) {
        let rows = provider.embed_crops(batch).and_then(|rows| {
            check_rows(&rows, batch.len(), dim)?;
            Ok(rows)
        });
        match rows {
            Ok(rows) => embeddings.extend(rows),
            Err(source) => {
                let done = embeddings.len();
                return Err(FeatureError::Provider {
                    source,
                    checkpoint: Box::new(EmbeddingCheckpoint { records: records[..done].to_vec(), embeddings }),
                });
            }
        }
    }
    let mut out = Vec::with_capacity(plans.len());
    let mut offset = 0;
    for plan in plans {
        let n = plan.num_crops();
        let mut crops = &embeddings[offset..offset + n];
        offset += n;
        let normalized: Vec<Vec<f32>>;
        if params.normalize_crops {
            normalized = crops.iter().map(|e| l2_normalized(e)).collect();
            crops = &normalized;
        }
        let (status, feature) = match aggregate_mask_feature(crops) {
            Some(f) => (FeatureStatus::Valid, f),
            None => (FeatureStatus::Featureless, vec![0.0; dim]),
        };
        out.push(MaskRecord { mask_id: plan.mask_id, status, feature, plan: plan.clone() });
    }
    let featureless = out.iter().filter(|r| r.status == FeatureStatus::Featureless).count();
    if featureless > 0 {
        log::warn!("{featureless} of {} mask(s) have no usable view and are featureless", out.len());
    }
    Ok(MaskFeatureStore { scene_id: scene.id.clone(), dim, records: out, snapshot, masks_file: None, point_cloud: None })
}

/// Full feature computation for a scene: plans crops, embeds them and pools.
pub fn compute_mask_features(
    scene: &Scene,
    masks: &InstanceMaskSet,
    table: &VisibilityTable,
    params: &FeatureParams,
    segmenter: Option<&dyn Segmenter>,
    provider: &dyn EmbeddingProvider,
) -> Result<MaskFeatureStore, FeatureError> {
    let plans = plan_crops(scene, masks, table, params, segmenter)?;
    let snapshot = ParamSnapshot {
        params: params.clone(),
        segmenter: params.use_segmenter.then(|| segmenter.map(|s| s.describe())).flatten(),
        provider: provider.describe(),
    };
    embed_plans(scene, &plans, params, provider, snapshot)
}

/// Mean of the member rows of a per-point feature matrix.
pub fn aggregate_pointfeatures_baseline(per_point: &Matrix<f32>, mask: &InstanceMask3D) -> Result<Vec<f32>, FeatureError> {
    if per_point.rows() != mask.num_points() {
        return Err(FeatureError::Inconsistent(format!(
            "{} feature rows for {} scene points",
            per_point.rows(),
            mask.num_points()
        )));
    }
    let rows: Vec<Vec<f32>> = mask.indices().iter().map(|&i| per_point.row(i as usize).to_vec()).collect();
    aggregate_mask_feature(&rows).ok_or_else(|| FeatureError::Inconsistent(format!("mask {} is empty", mask.id)))
}

/// Feature store built from per-point features instead of image crops.
pub fn baseline_store(per_point: &Matrix<f32>, masks: &InstanceMaskSet, source: &str) -> Result<MaskFeatureStore, FeatureError> {
    let records = masks
        .masks
        .iter()
        .map(|m| {
            Ok(MaskRecord {
                mask_id: m.id,
                status: FeatureStatus::Valid,
                feature: aggregate_pointfeatures_baseline(per_point, m)?,
                plan: MaskPlan { mask_id: m.id, proposal: m.provenance, views: Vec::new(), skipped: Vec::new() },
            })
        })
        .collect::<Result<Vec<_>, FeatureError>>()?;
    Ok(MaskFeatureStore {
        scene_id: masks.scene_id.clone(),
        dim: per_point.cols(),
        records,
        snapshot: ParamSnapshot { params: FeatureParams::default(), segmenter: None, provider: format!("per-point:{source}") },
        masks_file: None,
        point_cloud: None,
    })
}
