//! Text queries against a feature store: ranking, closed-vocabulary labels
//! and similarity heatmaps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{read_json, write_json, FormatError};
use crate::features::{EmbeddingProvider, MaskFeatureStore, ProviderError};
use crate::npy::{read_npy, write_npy, Matrix};
use crate::ply::{write_point_cloud, PlyEncoding};
use crate::proposals::InstanceMaskSet;
use crate::scene::PointCloud;

/// Prompt template for class names.
pub const DEFAULT_TEMPLATE: &str = "a {} in a scene";

/// Label given to masks without a feature.
pub const UNASSIGNED: &str = "unassigned";

/// Color of points outside every mask in heatmap exports.
pub const UNMASKED_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("cannot compare against a zero vector")]
    ZeroVector,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Inconsistent(String),
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32, QueryError> {
    if a.len() != b.len() {
        return Err(QueryError::Dimension(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(QueryError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMask {
    pub mask_id: usize,
    /// Row of the mask in the store.
    pub row: usize,
    pub similarity: f32,
}

/// Cosine similarity of every feature-bearing mask against `query`, highest
/// first with ties broken by ascending mask id.
pub fn rank_instances(store: &MaskFeatureStore, query: &[f32], top_n: Option<usize>) -> Result<Vec<RankedMask>, QueryError> {
    if top_n == Some(0) {
        return Err(QueryError::Parameter("top_n must be at least 1".into()));
    }
    if query.len() != store.dim {
        return Err(QueryError::Dimension(query.len(), store.dim));
    }
    if query.iter().all(|v| *v == 0.0) {
        return Err(QueryError::ZeroVector);
    }
    let mut out = Vec::new();
    for (row, r) in store.records.iter().enumerate() {
        if !r.is_valid() {
            continue;
        }
        let similarity = match cosine_similarity(&r.feature, query) {
            Ok(s) => s,
            Err(QueryError::ZeroVector) => {
                log::warn!("mask {} has a zero feature; skipped", r.mask_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        out.push(RankedMask { mask_id: r.mask_id, row, similarity });
    }
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.mask_id.cmp(&b.mask_id)));
    if let Some(n) = top_n {
        out.truncate(n);
    }
    Ok(out)
}

pub fn apply_template(template: &str, label: &str) -> String {
    template.replace("{}", label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelTableManifest {
    template: String,
    labels: Vec<String>,
    #[serde(default)]
    provider: Option<String>,
}

/// Text embeddings of a fixed label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    pub template: String,
    pub labels: Vec<String>,
    pub embeddings: Matrix<f32>,
    pub provider: Option<String>,
}

impl LabelEmbeddingTable {
    pub fn new(template: &str, labels: Vec<String>, embeddings: Matrix<f32>) -> Result<Self, QueryError> {
        if labels.len() != embeddings.rows() {
            return Err(QueryError::Inconsistent(format!("{} labels for {} embeddings", labels.len(), embeddings.rows())));
        }
        if labels.is_empty() {
            return Err(QueryError::Parameter("empty label vocabulary".into()));
        }
        Ok(Self { template: template.into(), labels, embeddings, provider: None })
    }

    /// Embeds `template` filled with each label.
    pub fn from_provider(provider: &dyn EmbeddingProvider, labels: &[String], template: &str) -> Result<Self, QueryError> {
        let prompts: Vec<String> = labels.iter().map(|l| apply_template(template, l)).collect();
        let rows = provider.embed_text(&prompts)?;
        crate::features::check_rows(&rows, prompts.len(), provider.dim())?;
        let embeddings = Matrix::from_rows(&rows, provider.dim())?;
        let mut table = Self::new(template, labels.to_vec(), embeddings)?;
        table.provider = Some(provider.describe());
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn npy_path(json: &Path) -> PathBuf {
        json.with_extension("npy")
    }

    /// Writes `<stem>.json` (template, labels) and `<stem>.npy` (embeddings).
    pub fn save(&self, json: &Path) -> Result<(), FormatError> {
        write_npy(&Self::npy_path(json), &self.embeddings)?;
        let m = LabelTableManifest { template: self.template.clone(), labels: self.labels.clone(), provider: self.provider.clone() };
        write_json(json, &m)
    }

    pub fn load(json: &Path) -> Result<Self, FormatError> {
        let m: LabelTableManifest = read_json(json)?;
        let embeddings: Matrix<f32> = read_npy(&Self::npy_path(json))?;
        if embeddings.rows() != m.labels.len() {
            return Err(FormatError::Shape(format!("{} labels, {} embedding rows", m.labels.len(), embeddings.rows())).in_file(json));
        }
        Ok(Self { template: m.template, labels: m.labels, embeddings, provider: m.provider })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAssignment {
    pub mask_id: usize,
    pub label: String,
    /// Index into the vocabulary; `None` for unassigned masks.
    pub label_index: Option<usize>,
    pub similarity: Option<f32>,
}

/// Labels each mask with its most similar vocabulary entry (first label on
/// ties). Featureless masks are `unassigned`.
pub fn assign_classes(store: &MaskFeatureStore, table: &LabelEmbeddingTable) -> Result<Vec<ClassAssignment>, QueryError> {
    if table.dim() != store.dim {
        return Err(QueryError::Dimension(table.dim(), store.dim));
    }
    store
        .records
        .iter()
        .map(|r| {
            let unassigned = ClassAssignment { mask_id: r.mask_id, label: UNASSIGNED.into(), label_index: None, similarity: None };
            if !r.is_valid() {
                return Ok(unassigned);
            }
            let mut best: Option<(usize, f32)> = None;
            for l in 0..table.labels.len() {
                let s = match cosine_similarity(&r.feature, table.embeddings.row(l)) {
                    Ok(s) => s,
                    Err(QueryError::ZeroVector) => continue,
                    Err(e) => return Err(e),
                };
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((l, s));
                }
            }
            Ok(match best {
                Some((l, s)) => ClassAssignment { mask_id: r.mask_id, label: table.labels[l].clone(), label_index: Some(l), similarity: Some(s) },
                None => unassigned,
            })
        })
        .collect()
}

/// Jet colormap: dark blue at 0, dark red at 1.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let channel = |offset: f64| (1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0);
    let to_u8 = |v: f64| (v * 255.0).round() as u8;
    [to_u8(channel(3.0)), to_u8(channel(2.0)), to_u8(channel(1.0))]
}

/// Per-point colors for a ranking: each point takes the color of the most
/// similar ranked mask containing it (similarities min-max normalized over the
/// ranking); points in no ranked mask are gray.
pub fn similarity_colors(num_points: usize, masks: &InstanceMaskSet, ranking: &[RankedMask]) -> Result<Vec<[u8; 3]>, QueryError> {
    if masks.num_points != num_points {
        return Err(QueryError::Inconsistent(format!("masks cover {} points, cloud has {num_points}", masks.num_points)));
    }
    let lo = ranking.iter().map(|r| r.similarity).fold(f32::INFINITY, f32::min);
    let hi = ranking.iter().map(|r| r.similarity).fold(f32::NEG_INFINITY, f32::max);
    let normalize = |s: f32| if hi > lo { ((s - lo) / (hi - lo)) as f64 } else { 1.0 };
    let mut best: Vec<Option<f32>> = vec![None; num_points];
    for r in ranking {
        let mask = masks
            .masks
            .iter()
            .find(|m| m.id == r.mask_id)
            .ok_or_else(|| QueryError::Inconsistent(format!("mask {} not in mask file", r.mask_id)))?;
        for &i in mask.indices() {
            let slot = &mut best[i as usize];
            if slot.is_none_or(|s| r.similarity > s) {
                *slot = Some(r.similarity);
            }
        }
    }
    Ok(best.into_iter().map(|s| s.map_or(UNMASKED_GRAY, |s| jet(normalize(s)))).collect())
}

pub fn export_similarity_ply(
    path: &Path,
    cloud: &PointCloud,
    masks: &InstanceMaskSet,
    ranking: &[RankedMask],
) -> Result<(), QueryError> {
    let colors = similarity_colors(cloud.len(), masks, ranking)?;
    let colored = cloud.with_colors(colors).map_err(|e| QueryError::Inconsistent(e.to_string()))?;
    write_point_cloud(path, &colored, PlyEncoding::BinaryLittleEndian)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureParams, FeatureStatus, MaskPlan, MaskRecord, ParamSnapshot};
    use crate::proposals::{InstanceMask3D, MaskProvenance};

    fn store(features: &[(&[f32], bool)]) -> MaskFeatureStore {
        let dim = features[0].0.len();
        let records = features
            .iter()
            .enumerate()
            .map(|(i, (f, valid))| MaskRecord {
                mask_id: i,
                status: if *valid { FeatureStatus::Valid } else { FeatureStatus::Featureless },
                feature: f.to_vec(),
                plan: MaskPlan { mask_id: i, proposal: MaskProvenance { proposal_id: i, cluster: None }, views: vec![], skipped: vec![] },
            })
            .collect();
        MaskFeatureStore {
            scene_id: "s".into(),
            dim,
            records,
            snapshot: ParamSnapshot { params: FeatureParams::default(), segmenter: None, provider: "t".into() },
            masks_file: None,
            point_cloud: None,
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-6);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(QueryError::ZeroVector)));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(QueryError::Dimension(1, 2))));
    }

    #[test]
    fn ranking_order_ties_and_featureless() {
        let s = store(&[(&[0.0, 1.0], true), (&[1.0, 0.0], true), (&[0.0, 0.0], false), (&[2.0, 0.0], true)]);
        let r = rank_instances(&s, &[1.0, 0.0], None).unwrap();
        let ids: Vec<usize> = r.iter().map(|x| x.mask_id).collect();
        assert_eq!(ids, vec![1, 3, 0]);
        assert_eq!(rank_instances(&s, &[1.0, 0.0], Some(1)).unwrap().len(), 1);
        assert!(rank_instances(&s, &[0.0, 0.0], None).is_err());
        assert!(rank_instances(&s, &[1.0], None).is_err());
    }

    #[test]
    fn class_assignment() {
        let s = store(&[(&[1.0, 0.1], true), (&[0.0, 0.0], false), (&[1.0, 1.0], true)]);
        let emb = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0]).unwrap();
        let t = LabelEmbeddingTable::new(DEFAULT_TEMPLATE, vec!["chair".into(), "table".into(), "chair2".into()], emb).unwrap();
        let a = assign_classes(&s, &t).unwrap();
        assert_eq!(a[0].label, "chair");
        assert_eq!(a[1].label, UNASSIGNED);
        assert_eq!(a[1].label_index, None);
        // [1,1] is equally close to every label; the first wins
        assert_eq!(a[2].label_index, Some(0));
    }

    #[test]
    fn template() {
        assert_eq!(apply_template(DEFAULT_TEMPLATE, "chair"), "a chair in a scene");
    }

    #[test]
    fn label_table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = LabelEmbeddingTable::new(DEFAULT_TEMPLATE, vec!["a".into(), "b".into()], emb).unwrap();
        let p = dir.path().join("labels.json");
        t.save(&p).unwrap();
        assert_eq!(LabelEmbeddingTable::load(&p).unwrap(), t);
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    #[test]
    fn heatmap_colors() {
        let p = MaskProvenance { proposal_id: 0, cluster: None };
        let masks = InstanceMaskSet::new(
            "s",
            4,
            vec![InstanceMask3D::new(0, 4, vec![0, 1], p).unwrap(), InstanceMask3D::new(1, 4, vec![1, 2], p).unwrap()],
        )
        .unwrap();
        let ranking = vec![RankedMask { mask_id: 1, row: 1, similarity: 0.9 }, RankedMask { mask_id: 0, row: 0, similarity: 0.1 }];
        let c = similarity_colors(4, &masks, &ranking).unwrap();
        assert_eq!(c, vec![jet(0.0), jet(1.0), jet(1.0), UNMASKED_GRAY]);
        let single = similarity_colors(4, &masks, &ranking[1..]).unwrap();
        assert_eq!(single[0], jet(1.0));
    }
}
