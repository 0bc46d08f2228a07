//! End-to-end run for one scene: load, split proposals, visibility, crop
//! planning, embedding, store. Visibility tables and crop plans are cached
//! under keys derived from the content they depend on.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{read_json, write_json, FormatError};
use crate::features::{
    embed_plans, plan_crops, save_store, EmbeddingCheckpoint, EmbeddingProvider, FeatureError, FeatureParams, MaskFeatureStore,
    MaskPlan, ParamSnapshot, PrecomputedProvider, ProviderError,
};
use crate::mask2d::{CropRecord, Segmenter};
use crate::npy::{read_npy, write_npy, Matrix};
use crate::proposals::{self, ingest_proposals, split_all, write_mask_set, InstanceMaskSet};
use crate::scene::{load_scene, Scene, SceneError, SceneLayoutConfig};
use crate::sidecar::{SidecarClient, SidecarEmbeddingProvider, SidecarSegmenter};
use crate::synthetic::{LabelImageSegmenter, SyntheticAssets, SyntheticProvider};
use crate::visibility::{build_visibility_table, VisibilityError, VisibilityTable};

pub const DEFAULT_TARGET_RATE_HZ: f64 = 3.0;
pub const DEFAULT_EMBEDDING_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("proposals: {0}")]
    Proposals(#[from] proposals::ProposalError),
    #[error("visibility: {0}")]
    Visibility(#[from] VisibilityError),
    #[error("features: {0}")]
    Features(FeatureError),
    #[error("model: {0}")]
    Model(String),
    #[error("output: {0}")]
    Output(FormatError),
}

impl PipelineError {
    /// Process exit code for the failing stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Scene(_) | Self::Proposals(_) => 3,
            Self::Visibility(_) => 4,
            Self::Features(FeatureError::Provider { .. } | FeatureError::Segmentation { .. }) | Self::Model(_) => 5,
            Self::Features(_) => 4,
            Self::Output(_) => 6,
        }
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        Self::Features(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// Scene layout TOML.
    pub layout: PathBuf,
    /// Directory the layout's patterns are relative to; defaults to the
    /// layout file's directory.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_target_rate")]
    pub target_rate_hz: f64,
}

fn default_target_rate() -> f64 {
    DEFAULT_TARGET_RATE_HZ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSection {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub split: bool,
    #[serde(default = "default_eps")]
    pub dbscan_eps: f64,
    #[serde(default = "default_min_points")]
    pub dbscan_min_points: usize,
}

fn yes() -> bool {
    true
}

fn default_eps() -> f64 {
    proposals::DEFAULT_DBSCAN_EPS
}

fn default_min_points() -> usize {
    proposals::DEFAULT_DBSCAN_MIN_POINTS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    Sidecar,
    Synthetic,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Sidecar,
    Precomputed,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarSection {
    pub request_dir: PathBuf,
    pub response_dir: PathBuf,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_encoder")]
    pub encoder: String,
    #[serde(default = "default_segmenter_model")]
    pub segmenter: String,
}

fn default_timeout() -> f64 {
    crate::sidecar::DEFAULT_TIMEOUT.as_secs_f64()
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

fn default_encoder() -> String {
    "clip-vit-l-14-336".into()
}

fn default_segmenter_model() -> String {
    "sam-vit-h".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub segmenter: SegmenterKind,
    pub provider: ProviderKind,
    /// Embedding matrix for the precomputed provider.
    #[serde(default)]
    pub precomputed: Option<PathBuf>,
    #[serde(default)]
    pub sidecar: Option<SidecarSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Feature store `.npy`; the manifest, provenance and mask files go next to it.
    pub store: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

/// Everything needed to run one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneSection,
    pub proposals: ProposalSection,
    #[serde(default)]
    pub features: FeatureParams,
    pub models: ModelSection,
    pub output: OutputSection,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Like [`from_file`](Self::from_file), with `section.key = value`
    /// overrides applied first. Values are parsed as TOML, falling back to
    /// a plain string.
    pub fn from_file_with_overrides(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text.parse().map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let mut config: Self = table.try_into().map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.scene.layout);
        if let Some(r) = &mut self.scene.root {
            fix(r);
        }
        fix(&mut self.proposals.path);
        if let Some(p) = &mut self.models.precomputed {
            fix(p);
        }
        if let Some(s) = &mut self.models.sidecar {
            fix(&mut s.request_dir);
            fix(&mut s.response_dir);
        }
        fix(&mut self.output.store);
        if let Some(c) = &mut self.output.cache_dir {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.features.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.features.use_segmenter && self.models.segmenter == SegmenterKind::None {
            return Err(PipelineError::Config("features.use_segmenter is set but models.segmenter = \"none\"".into()));
        }
        let needs_sidecar = self.models.segmenter == SegmenterKind::Sidecar || self.models.provider == ProviderKind::Sidecar;
        if needs_sidecar && self.models.sidecar.is_none() {
            return Err(PipelineError::Config("sidecar models selected but [models.sidecar] is missing".into()));
        }
        if self.models.provider == ProviderKind::Precomputed && self.models.precomputed.is_none() {
            return Err(PipelineError::Config("precomputed provider selected but models.precomputed is missing".into()));
        }
        if !(self.scene.target_rate_hz > 0.0) {
            return Err(PipelineError::Config("scene.target_rate_hz must be positive".into()));
        }
        Ok(())
    }

    pub fn scene_root(&self) -> PathBuf {
        self.scene.root.clone().unwrap_or_else(|| self.scene.layout.parent().unwrap_or(Path::new("")).to_path_buf())
    }
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), PipelineError> {
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut current = table;
    for part in sections {
        let entry = current.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("override {key}: {part} is not a section")))?;
    }
    current.insert(last.to_string(), parsed);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(text: &str) -> Result<(String, String), PipelineError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {text:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Mask file written next to a store.
pub fn masks_path(store: &Path) -> PathBuf {
    let stem = store.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    store.with_file_name(format!("{stem}.masks.npy"))
}

struct ContentHasher(Sha256);

impl ContentHasher {
    fn new(tag: &str) -> Self {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        Self(h)
    }

    fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    fn f64s(&mut self, v: &[f64]) -> &mut Self {
        let b: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.bytes(&b)
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Key of a visibility table: geometry, frames, masks and occlusion settings.
pub fn visibility_key(scene: &Scene, masks: &InstanceMaskSet, params: &FeatureParams) -> String {
    let mut h = ContentHasher::new("visibility/v1");
    let pts: Vec<u8> = scene.cloud.points().iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    h.bytes(&pts);
    for f in &scene.frames {
        h.bytes(&(f.index as u64).to_le_bytes());
        let k = &f.intrinsics;
        h.f64s(&[k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64]);
        h.f64s(&f.pose.rotation.concat());
        h.f64s(&f.pose.translation);
        let d: Vec<u8> = f.depth.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        h.bytes(&d);
    }
    h.bytes(&(masks.num_points as u64).to_le_bytes());
    for m in &masks.masks {
        let idx: Vec<u8> = m.indices().iter().flat_map(|v| v.to_le_bytes()).collect();
        h.bytes(&idx);
    }
    h.f64s(&[params.k_threshold]);
    h.bytes(format!("{:?}", params.invalid_depth).as_bytes());
    h.finish()
}

/// Key of a crop plan: the visibility key plus everything that shapes crops.
pub fn plan_key(visibility_key: &str, scene: &Scene, params: &FeatureParams, segmenter: Option<&str>) -> String {
    let mut h = ContentHasher::new("plan/v1");
    h.bytes(visibility_key.as_bytes());
    for f in &scene.frames {
        let k = &f.color_intrinsics;
        h.f64s(&[k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64]);
        h.bytes(f.color.path.to_string_lossy().as_bytes());
    }
    let shaping = FeatureParams { batch_size: 0, normalize_crops: false, ..params.clone() };
    h.bytes(serde_json::to_string(&shaping).expect("params serialize").as_bytes());
    h.bytes(segmenter.unwrap_or("").as_bytes());
    h.finish()
}

/// Serves crops embedded by an interrupted run before asking `inner`.
pub struct ResumingProvider<'a> {
    inner: &'a dyn EmbeddingProvider,
    known: HashMap<CropRecord, Vec<f32>>,
}

impl<'a> ResumingProvider<'a> {
    pub fn new(inner: &'a dyn EmbeddingProvider, checkpoint: Option<EmbeddingCheckpoint>) -> Self {
        let known = checkpoint.map(|c| c.records.into_iter().zip(c.embeddings).collect()).unwrap_or_default();
        Self { inner, known }
    }
}

impl EmbeddingProvider for ResumingProvider<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let missing: Vec<CropRecord> = crops.iter().filter(|c| !self.known.contains_key(*c)).cloned().collect();
        let fresh = if missing.is_empty() { Vec::new() } else { self.inner.embed_crops(&missing)? };
        crate::features::check_rows(&fresh, missing.len(), self.dim())?;
        let mut fresh = fresh.into_iter();
        Ok(crops
            .iter()
            .map(|c| self.known.get(c).cloned().unwrap_or_else(|| fresh.next().expect("one fresh row per missing crop")))
            .collect())
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.inner.embed_text(texts)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

fn checkpoint_paths(cache: &Path, key: &str) -> (PathBuf, PathBuf) {
    (cache.join(format!("checkpoint-{key}.jsonl")), cache.join(format!("checkpoint-{key}.npy")))
}

fn load_checkpoint(cache: &Path, key: &str) -> Option<EmbeddingCheckpoint> {
    let (manifest, npy) = checkpoint_paths(cache, key);
    if !manifest.exists() {
        return None;
    }
    let records = crate::mask2d::read_crop_manifest(&manifest).ok()?;
    let m: Matrix<f32> = read_npy(&npy).ok()?;
    if m.rows() != records.len() {
        return None;
    }
    log::info!("resuming from {} embedded crops in {}", records.len(), manifest.display());
    Some(EmbeddingCheckpoint { embeddings: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(), records })
}

fn save_checkpoint(cache: &Path, key: &str, c: &EmbeddingCheckpoint, dim: usize) -> Result<(), FormatError> {
    let (manifest, npy) = checkpoint_paths(cache, key);
    write_npy(&npy, &Matrix::from_rows(&c.embeddings, dim)?)?;
    crate::mask2d::write_crop_manifest(&manifest, &c.records)
}

/// Models resolved from a config.
pub struct Models {
    pub segmenter: Option<Box<dyn Segmenter>>,
    pub provider: Box<dyn EmbeddingProvider>,
}

pub fn build_models(config: &PipelineConfig, scene: &Scene) -> Result<Models, PipelineError> {
    let model_err = |e: FormatError| PipelineError::Model(e.to_string());
    let mut assets: Option<SyntheticAssets> = None;
    let mut synthetic = || -> Result<SyntheticAssets, PipelineError> {
        if assets.is_none() {
            assets = Some(SyntheticAssets::load(&config.scene_root(), scene).map_err(model_err)?);
        }
        Ok(assets.clone().expect("just loaded"))
    };
    let client = |s: &SidecarSection| -> Result<SidecarClient, PipelineError> {
        Ok(SidecarClient::new(&s.request_dir, &s.response_dir)
            .map_err(model_err)?
            .with_timeout(Duration::from_secs_f64(s.timeout_s), crate::sidecar::DEFAULT_POLL_INTERVAL))
    };
    let sidecar = config.models.sidecar.as_ref();
    let segmenter: Option<Box<dyn Segmenter>> = match config.models.segmenter {
        SegmenterKind::None => None,
        SegmenterKind::Synthetic => Some(Box::new(LabelImageSegmenter { assets: synthetic()? })),
        SegmenterKind::Sidecar => {
            let s = sidecar.expect("validated");
            Some(Box::new(SidecarSegmenter::new(client(s)?, &s.segmenter)))
        }
    };
    let provider: Box<dyn EmbeddingProvider> = match config.models.provider {
        ProviderKind::Synthetic => Box::new(SyntheticProvider::new(synthetic()?)),
        ProviderKind::Precomputed => {
            let path = config.models.precomputed.as_ref().expect("validated");
            Box::new(PrecomputedProvider::load(path).map_err(model_err)?)
        }
        ProviderKind::Sidecar => {
            let s = sidecar.expect("validated");
            Box::new(SidecarEmbeddingProvider::new(client(s)?, s.embedding_dim, &s.encoder))
        }
    };
    Ok(Models { segmenter, provider })
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub store: MaskFeatureStore,
    pub masks: InstanceMaskSet,
    pub store_path: PathBuf,
    /// Stages served from the cache.
    pub cache_hits: Vec<String>,
}

/// Loads the scene described by `config`, subsampled to the target rate.
pub fn load_config_scene(config: &PipelineConfig) -> Result<Scene, PipelineError> {
    let layout = SceneLayoutConfig::from_file(&config.scene.layout)?;
    let scene = load_scene(&config.scene_root(), &layout)?;
    let total = scene.frames.len();
    let scene = scene.subsample_frames(layout.source_rate_hz, config.scene.target_rate_hz)?;
    log::info!("scene {}: {} points, {} of {total} frames", scene.id, scene.num_points(), scene.frames.len());
    Ok(scene)
}

/// Runs the pipeline with models from the config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let scene = load_config_scene(config)?;
        let models = build_models(config, &scene)?;
        run_with_models(config, &scene, models.segmenter.as_deref(), models.provider.as_ref())
    })
}

/// Runs the pipeline on an already loaded scene with the given models.
pub fn run_with_models(
    config: &PipelineConfig,
    scene: &Scene,
    segmenter: Option<&dyn Segmenter>,
    provider: &dyn EmbeddingProvider,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let params = &config.features;
    let mut cache_hits = Vec::new();
    let raw = ingest_proposals(&config.proposals.path, &scene.id, scene.num_points())?;
    let masks = if config.proposals.split {
        let split = split_all(&raw, &scene.cloud, config.proposals.dbscan_eps, config.proposals.dbscan_min_points)?;
        log::info!("{} proposals split into {} masks", raw.len(), split.len());
        split
    } else {
        raw
    };

    let cache = match &config.output.cache_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::Output(FormatError::io(dir, e)))?;
            Some(dir.as_path())
        }
        None => None,
    };
    let vis_key = visibility_key(scene, &masks, params);
    let vis_path = cache.map(|c| c.join(format!("visibility-{vis_key}.npy")));
    let table = match vis_path.as_deref().filter(|p| p.exists()).map(VisibilityTable::load) {
        Some(Ok((table, manifest))) if manifest.cache_key.as_deref() == Some(vis_key.as_str()) => {
            log::info!("visibility: cache hit ({})", &vis_key[..12]);
            cache_hits.push("visibility".to_string());
            table
        }
        _ => {
            let table = build_visibility_table(&masks, scene, &params.occlusion());
            if let Some(p) = &vis_path {
                table.save(p, &scene.id, Some(&vis_key), params.k_threshold)?;
            }
            table
        }
    };

    let seg_name = if params.use_segmenter { segmenter.map(|s| s.describe()) } else { None };
    let key = plan_key(&vis_key, scene, params, seg_name.as_deref());
    let plan_path = cache.map(|c| c.join(format!("plan-{key}.json")));
    let cached: Option<Vec<MaskPlan>> = plan_path.as_deref().filter(|p| p.exists()).and_then(|p| read_json(p).ok());
    let plans = match cached {
        Some(plans) if plans.len() == masks.len() => {
            log::info!("crop plan: cache hit ({})", &key[..12]);
            cache_hits.push("plan".to_string());
            plans
        }
        _ => {
            let plans = plan_crops(scene, &masks, &table, params, segmenter)?;
            if let Some(p) = &plan_path {
                write_json(p, &plans).map_err(PipelineError::Output)?;
            }
            plans
        }
    };

    let snapshot = ParamSnapshot { params: params.clone(), segmenter: seg_name, provider: provider.describe() };
    let embed_key = format!("{key}-{}", &ContentHasher::new(&provider.describe()).finish()[..16]);
    let resume = cache.and_then(|c| load_checkpoint(c, &embed_key));
    let resuming = ResumingProvider::new(provider, resume);
    let mut store = match embed_plans(scene, &plans, params, &resuming, snapshot) {
        Ok(store) => store,
        Err(FeatureError::Provider { source, checkpoint }) => {
            if let Some(c) = cache {
                if let Err(e) = save_checkpoint(c, &embed_key, &checkpoint, provider.dim()) {
                    log::warn!("could not save embedding checkpoint: {e}");
                } else {
                    log::warn!("saved {} embedded crops for resumption", checkpoint.records.len());
                }
            }
            return Err(FeatureError::Provider { source, checkpoint }.into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(c) = cache {
        let (a, b) = checkpoint_paths(c, &embed_key);
        let _ = std::fs::remove_file(a);
        let _ = std::fs::remove_file(b);
    }

    let store_path = config.output.store.clone();
    if let Some(dir) = store_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Output(FormatError::io(dir, e)))?;
    }
    let mpath = masks_path(&store_path);
    write_mask_set(&mpath, &masks, None, None)?;
    store.masks_file = mpath.file_name().map(PathBuf::from);
    let layout = SceneLayoutConfig::from_file(&config.scene.layout)?;
    let cloud = config.scene_root().join(&layout.point_cloud);
    store.point_cloud = Some(std::path::absolute(&cloud).unwrap_or(cloud));
    save_store(&store, &store_path).map_err(PipelineError::Output)?;
    log::info!(
        "wrote {} mask features ({} featureless) to {}",
        store.len(),
        store.num_featureless(),
        store_path.display()
    );
    Ok(PipelineOutput { store, masks, store_path, cache_hits })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[scene]
layout = "scene/layout.toml"

[proposals]
path = "scene/proposals.npy"

[models]
segmenter = "synthetic"
provider = "synthetic"

[output]
store = "out/features.npy"
"#;

    #[test]
    fn defaults_and_resolution() {
        let mut c = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.features, FeatureParams::default());
        assert_eq!(c.scene.target_rate_hz, 3.0);
        assert!(c.proposals.split);
        assert_eq!(c.proposals.dbscan_eps, 0.95);
        assert_eq!(c.proposals.dbscan_min_points, 1);
        c.resolve_paths(Path::new("/data/run"));
        assert_eq!(c.scene.layout, Path::new("/data/run/scene/layout.toml"));
        assert_eq!(c.scene_root(), Path::new("/data/run/scene"));
        c.validate().unwrap();
        let again = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn config_errors() {
        assert!(PipelineConfig::from_toml_str(&format!("{MINIMAL}\nbogus = 1")).is_err());
        let mut c = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        c.models.segmenter = SegmenterKind::None;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        c.features.use_segmenter = false;
        c.validate().unwrap();
        c.models.provider = ProviderKind::Sidecar;
        assert!(c.validate().is_err());
        let all = MINIMAL.replace("[models]", "[features]\nk_view = \"all\"\n\n[models]");
        assert_eq!(PipelineConfig::from_toml_str(&all).unwrap().features.k_view, None);
    }

    #[test]
    fn overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let ov: Vec<(String, String)> = ["features.k_view=all", "features.master_seed = 9", "workers=3", "models.provider=precomputed", "models.precomputed=e.npy"]
            .iter()
            .map(|s| parse_override(s).unwrap())
            .collect();
        let c = PipelineConfig::from_file_with_overrides(&path, &ov).unwrap();
        assert_eq!(c.features.k_view, None);
        assert_eq!(c.features.master_seed, 9);
        assert_eq!(c.workers, 3);
        assert_eq!(c.models.precomputed.as_deref(), Some(dir.path().join("e.npy").as_path()));
        assert!(parse_override("novalue").is_err());
        let bad = [parse_override("workers.x=1").unwrap()];
        assert!(PipelineConfig::from_file_with_overrides(&path, &bad).is_err());
    }

    #[test]
    fn masks_file_name() {
        assert_eq!(masks_path(Path::new("out/features.npy")), Path::new("out/features.masks.npy"));
    }
}
