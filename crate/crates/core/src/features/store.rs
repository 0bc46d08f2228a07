use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MaskPlan, ParamSnapshot};
use crate::error::{read_json, write_json, FormatError};
use crate::npy::{read_npy, write_npy, Matrix};

pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStatus {
    Valid,
    /// No usable view; the stored vector is all zeros.
    Featureless,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub mask_id: usize,
    pub status: FeatureStatus,
    pub feature: Vec<f32>,
    /// Views and crops that went into the feature.
    pub plan: MaskPlan,
}

impl MaskRecord {
    pub fn is_valid(&self) -> bool {
        self.status == FeatureStatus::Valid
    }
}

/// Per-mask features of one scene, aligned with the mask set they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFeatureStore {
    pub scene_id: String,
    pub dim: usize,
    pub records: Vec<MaskRecord>,
    pub snapshot: ParamSnapshot,
    /// Mask file the records index into, relative to the store when possible.
    pub masks_file: Option<PathBuf>,
    pub point_cloud: Option<PathBuf>,
}

impl MaskFeatureStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_matrix(&self) -> Matrix<f32> {
        let rows: Vec<Vec<f32>> = self.records.iter().map(|r| r.feature.clone()).collect();
        Matrix::from_rows(&rows, self.dim).expect("records share the store dimension")
    }

    pub fn num_featureless(&self) -> usize {
        self.records.iter().filter(|r| !r.is_valid()).count()
    }

    /// Resolves a path recorded in the manifest against the store location.
    pub fn resolve(store_path: &Path, recorded: &Path) -> PathBuf {
        if recorded.is_absolute() {
            recorded.to_path_buf()
        } else {
            store_path.parent().unwrap_or(Path::new("")).join(recorded)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub scene_id: String,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "M")]
    pub masks: usize,
    pub mask_ids: Vec<usize>,
    pub status: Vec<FeatureStatus>,
    pub snapshot: ParamSnapshot,
    pub provenance_file: PathBuf,
    #[serde(default)]
    pub masks_file: Option<PathBuf>,
    #[serde(default)]
    pub point_cloud: Option<PathBuf>,
}

fn sidecar_path(npy: &Path, suffix: &str) -> PathBuf {
    let stem = npy.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    npy.with_file_name(format!("{stem}{suffix}"))
}

pub fn manifest_path(npy: &Path) -> PathBuf {
    sidecar_path(npy, ".json")
}

/// Writes `<stem>.npy` (M x D float32), `<stem>.json` and `<stem>.provenance.json`.
pub fn save_store(store: &MaskFeatureStore, npy: &Path) -> Result<(), FormatError> {
    write_npy(npy, &store.feature_matrix())?;
    let provenance = sidecar_path(npy, ".provenance.json");
    let plans: Vec<&MaskPlan> = store.records.iter().map(|r| &r.plan).collect();
    write_json(&provenance, &plans)?;
    let manifest = StoreManifest {
        format_version: STORE_FORMAT_VERSION,
        scene_id: store.scene_id.clone(),
        dim: store.dim,
        masks: store.len(),
        mask_ids: store.records.iter().map(|r| r.mask_id).collect(),
        status: store.records.iter().map(|r| r.status).collect(),
        snapshot: store.snapshot.clone(),
        provenance_file: PathBuf::from(provenance.file_name().expect("file name")),
        masks_file: store.masks_file.clone(),
        point_cloud: store.point_cloud.clone(),
    };
    write_json(&manifest_path(npy), &manifest)
}

pub fn load_store(npy: &Path) -> Result<MaskFeatureStore, FormatError> {
    let mpath = manifest_path(npy);
    let manifest: StoreManifest = read_json(&mpath)?;
    if manifest.format_version != STORE_FORMAT_VERSION {
        return Err(FormatError::Header(format!(
            "unsupported store format version {} (expected {STORE_FORMAT_VERSION})",
            manifest.format_version
        ))
        .in_file(&mpath));
    }
    let matrix: Matrix<f32> = read_npy(npy)?;
    if matrix.rows() != manifest.masks || matrix.cols() != manifest.dim {
        return Err(FormatError::Shape(format!(
            "feature matrix is {}x{}, manifest says M = {}, D = {}",
            matrix.rows(),
            matrix.cols(),
            manifest.masks,
            manifest.dim
        ))
        .in_file(npy));
    }
    if manifest.mask_ids.len() != manifest.masks || manifest.status.len() != manifest.masks {
        return Err(FormatError::Shape("mask_ids/status length differs from M".into()).in_file(&mpath));
    }
    let ppath = MaskFeatureStore::resolve(npy, &manifest.provenance_file);
    let plans: Vec<MaskPlan> = read_json(&ppath)?;
    if plans.len() != manifest.masks {
        return Err(FormatError::Shape(format!("{} provenance entries for {} masks", plans.len(), manifest.masks)).in_file(&ppath));
    }
    let records = plans
        .into_iter()
        .enumerate()
        .map(|(i, plan)| MaskRecord {
            mask_id: manifest.mask_ids[i],
            status: manifest.status[i],
            feature: matrix.row(i).to_vec(),
            plan,
        })
        .collect();
    Ok(MaskFeatureStore {
        scene_id: manifest.scene_id,
        dim: manifest.dim,
        records,
        snapshot: manifest.snapshot,
        masks_file: manifest.masks_file,
        point_cloud: manifest.point_cloud,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureParams, ViewPlan};
    use crate::mask2d::CropBox;
    use crate::proposals::MaskProvenance;

    fn sample() -> MaskFeatureStore {
        let plan = |id| MaskPlan {
            mask_id: id,
            proposal: MaskProvenance { proposal_id: id, cluster: Some(0) },
            views: vec![ViewPlan {
                frame_index: 3,
                frame_position: 1,
                visibility_score: 1.0,
                segmenter_score: Some(0.8),
                crops: vec![CropBox { x1: 0, y1: 0, x2: 4, y2: 4, level: 1 }],
            }],
            skipped: vec![],
        };
        MaskFeatureStore {
            scene_id: "s0".into(),
            dim: 3,
            records: vec![
                MaskRecord { mask_id: 0, status: FeatureStatus::Valid, feature: vec![0.1, 0.2, 0.3], plan: plan(0) },
                MaskRecord { mask_id: 1, status: FeatureStatus::Featureless, feature: vec![0.0; 3], plan: plan(1) },
            ],
            snapshot: ParamSnapshot { params: FeatureParams::default(), segmenter: Some("seg".into()), provider: "p".into() },
            masks_file: Some("masks.npy".into()),
            point_cloud: None,
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.npy");
        let store = sample();
        save_store(&store, &path).unwrap();
        assert!(dir.path().join("features.provenance.json").exists());
        assert_eq!(load_store(&path).unwrap(), store);
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.npy");
        save_store(&sample(), &path).unwrap();
        let mpath = manifest_path(&path);
        let text = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        assert!(load_store(&path).is_err());
        std::fs::write(&mpath, text.replace("\"D\": 3", "\"D\": 4")).unwrap();
        assert!(matches!(load_store(&path).unwrap_err().root(), FormatError::Shape(_)));
    }
}
