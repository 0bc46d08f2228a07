//! Class-agnostic 3D instance masks: ingestion from `.npy` + JSON manifests
//! and DBSCAN splitting into spatially contiguous pieces.

mod dbscan;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dbscan::dbscan;

use crate::error::{read_json, write_json, FormatError};
use crate::npy::{read_npy, write_npy, Matrix};
use crate::scene::PointCloud;

/// Default DBSCAN neighborhood radius in meters.
pub const DEFAULT_DBSCAN_EPS: f64 = 0.95;
pub const DEFAULT_DBSCAN_MIN_POINTS: usize = 1;

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskProvenance {
    /// Column of the mask in the ingested proposal file.
    pub proposal_id: usize,
    /// Ordinal of the DBSCAN cluster this mask came from, if it was split.
    pub cluster: Option<usize>,
}

/// Binary membership over the scene's points, stored as sorted point indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask3D {
    pub id: usize,
    num_points: usize,
    indices: Vec<u32>,
    pub provenance: MaskProvenance,
}

impl InstanceMask3D {
    /// `indices` need not be sorted; duplicates are removed.
    pub fn new(id: usize, num_points: usize, mut indices: Vec<u32>, provenance: MaskProvenance) -> Result<Self, ProposalError> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last as usize >= num_points {
                return Err(ProposalError::Validation(format!(
                    "mask {id} references point {last} of {num_points}"
                )));
            }
        }
        Ok(Self { id, num_points, indices, provenance })
    }

    pub fn from_membership(id: usize, membership: &[bool], provenance: MaskProvenance) -> Self {
        let indices = membership.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i as u32).collect();
        Self { id, num_points: membership.len(), indices, provenance }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Number of member points.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, point: usize) -> bool {
        self.indices.binary_search(&(point as u32)).is_ok()
    }

    pub fn membership(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_points];
        for &i in &self.indices {
            m[i as usize] = true;
        }
        m
    }

    /// Size of the intersection with `other` (both index lists are sorted).
    pub fn intersection_len(&self, other: &Self) -> usize {
        let (mut a, mut b, mut n) = (0, 0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskSet {
    pub scene_id: String,
    pub num_points: usize,
    pub masks: Vec<InstanceMask3D>,
}

impl InstanceMaskSet {
    pub fn new(scene_id: impl Into<String>, num_points: usize, masks: Vec<InstanceMask3D>) -> Result<Self, ProposalError> {
        if let Some(m) = masks.iter().find(|m| m.num_points != num_points) {
            return Err(ProposalError::Validation(format!(
                "mask {} is defined over {} points, set over {num_points}",
                m.id, m.num_points
            )));
        }
        Ok(Self { scene_id: scene_id.into(), num_points, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Dense N×M uint8 membership matrix.
    pub fn to_matrix(&self) -> Matrix<u8> {
        let mut m = Matrix::filled(self.num_points, self.masks.len(), 0u8);
        for (c, mask) in self.masks.iter().enumerate() {
            for &i in mask.indices() {
                m.set(i as usize, c, 1);
            }
        }
        m
    }
}

/// JSON manifest stored next to a mask `.npy` (same stem, `.json` extension).
///
/// Proposals only need `scene_id`, `M` and `N`. Predictions and ground truth
/// add `labels` (and optionally `confidences`); split mask sets add
/// `provenance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub scene_id: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<MaskProvenance>>,
}

pub fn manifest_path(npy: &Path) -> PathBuf {
    npy.with_extension("json")
}

/// A mask file read verbatim: every column, including empty ones.
#[derive(Debug, Clone)]
pub struct MaskFile {
    pub manifest: MaskManifest,
    pub columns: Vec<Vec<u32>>,
}

pub fn read_mask_file(path: &Path) -> Result<MaskFile, ProposalError> {
    let manifest: MaskManifest = read_json(&manifest_path(path))?;
    let matrix: Matrix<u8> = read_npy(path)?;
    if matrix.rows() != manifest.n || matrix.cols() != manifest.m {
        return Err(ProposalError::Validation(format!(
            "{}: array is {}x{} but manifest declares N={} M={}",
            path.display(),
            matrix.rows(),
            matrix.cols(),
            manifest.n,
            manifest.m
        )));
    }
    let check_len = |name: &str, len: Option<usize>| match len {
        Some(l) if l != manifest.m => Err(ProposalError::Validation(format!(
            "{}: {l} {name} for {} masks",
            path.display(),
            manifest.m
        ))),
        _ => Ok(()),
    };
    check_len("labels", manifest.labels.as_ref().map(Vec::len))?;
    check_len("confidences", manifest.confidences.as_ref().map(Vec::len))?;
    check_len("provenance records", manifest.provenance.as_ref().map(Vec::len))?;
    let mut columns = vec![Vec::new(); manifest.m];
    for r in 0..matrix.rows() {
        for (c, &v) in matrix.row(r).iter().enumerate() {
            match v {
                0 => {}
                1 => columns[c].push(r as u32),
                other => {
                    return Err(ProposalError::Validation(format!(
                        "{}: non-binary entry {other} at point {r}, mask {c}",
                        path.display()
                    )))
                }
            }
        }
    }
    Ok(MaskFile { manifest, columns })
}

/// Reads proposals for a scene with `num_points` points. All non-empty masks
/// are kept in file order; empty columns are dropped with a warning.
pub fn ingest_proposals(path: &Path, scene_id: &str, num_points: usize) -> Result<InstanceMaskSet, ProposalError> {
    let file = read_mask_file(path)?;
    if file.manifest.n != num_points {
        return Err(ProposalError::Validation(format!(
            "{}: {} rows but the scene has {num_points} points",
            path.display(),
            file.manifest.n
        )));
    }
    if file.manifest.scene_id != scene_id {
        log::warn!("{}: manifest scene id {:?} differs from scene {scene_id:?}", path.display(), file.manifest.scene_id);
    }
    let provenance = file.manifest.provenance.clone();
    let mut masks = Vec::with_capacity(file.columns.len());
    let mut empty = 0usize;
    for (c, indices) in file.columns.into_iter().enumerate() {
        if indices.is_empty() {
            empty += 1;
            continue;
        }
        let prov = provenance.as_ref().map(|p| p[c]).unwrap_or(MaskProvenance { proposal_id: c, cluster: None });
        masks.push(InstanceMask3D { id: masks.len(), num_points, indices, provenance: prov });
    }
    if empty > 0 {
        log::warn!("{}: dropped {empty} empty mask(s)", path.display());
    }
    InstanceMaskSet::new(scene_id, num_points, masks)
}

/// Writes a mask set as `.npy` plus manifest, recording provenance and any
/// per-mask labels/confidences.
pub fn write_mask_set(
    path: &Path,
    set: &InstanceMaskSet,
    labels: Option<Vec<String>>,
    confidences: Option<Vec<f64>>,
) -> Result<(), ProposalError> {
    write_npy(path, &set.to_matrix())?;
    let manifest = MaskManifest {
        scene_id: set.scene_id.clone(),
        m: set.len(),
        n: set.num_points,
        labels,
        confidences,
        provenance: Some(set.masks.iter().map(|m| m.provenance).collect()),
    };
    write_json(&manifest_path(path), &manifest)?;
    Ok(())
}

fn check_dbscan_params(eps: f64, min_points: usize) -> Result<(), ProposalError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ProposalError::Parameter(format!("eps must be positive, got {eps}")));
    }
    if min_points == 0 {
        return Err(ProposalError::Parameter("min_points must be at least 1".into()));
    }
    Ok(())
}

/// Splits one mask into its DBSCAN clusters. Outputs keep the input id and
/// proposal provenance; `cluster` holds the output ordinal.
pub fn dbscan_split(
    mask: &InstanceMask3D,
    cloud: &PointCloud,
    eps: f64,
    min_points: usize,
) -> Result<Vec<InstanceMask3D>, ProposalError> {
    check_dbscan_params(eps, min_points)?;
    if mask.num_points != cloud.len() {
        return Err(ProposalError::Validation(format!(
            "mask {} has {} points, cloud has {}",
            mask.id,
            mask.num_points,
            cloud.len()
        )));
    }
    let pts: Vec<[f64; 3]> = mask.indices.iter().map(|&i| cloud.point(i as usize)).collect();
    let clusters = dbscan(&pts, eps, min_points);
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(ordinal, local)| InstanceMask3D {
            id: mask.id,
            num_points: mask.num_points,
            // local indices are ascending, so mapped indices stay sorted
            indices: local.into_iter().map(|l| mask.indices[l as usize]).collect(),
            provenance: MaskProvenance { proposal_id: mask.provenance.proposal_id, cluster: Some(ordinal) },
        })
        .collect())
}

/// Splits every mask and concatenates the results in input order, re-indexing ids.
pub fn split_all(set: &InstanceMaskSet, cloud: &PointCloud, eps: f64, min_points: usize) -> Result<InstanceMaskSet, ProposalError> {
    check_dbscan_params(eps, min_points)?;
    let parts: Vec<Vec<InstanceMask3D>> = set
        .masks
        .par_iter()
        .map(|m| dbscan_split(m, cloud, eps, min_points))
        .collect::<Result<_, _>>()?;
    let noise_only = parts.iter().filter(|p| p.is_empty()).count();
    if noise_only > 0 {
        log::warn!("{noise_only} proposal(s) consisted only of DBSCAN noise and were dropped");
    }
    let mut masks: Vec<InstanceMask3D> = parts.into_iter().flatten().collect();
    for (i, m) in masks.iter_mut().enumerate() {
        m.id = i;
    }
    log::info!("split {} proposal(s) into {} mask(s)", set.len(), masks.len());
    InstanceMaskSet::new(set.scene_id.clone(), set.num_points, masks)
}
