//! Per-mask, per-frame visibility: projection, field-of-view test, depth
//! occlusion test, normalized scores and top-k view selection.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{read_json, write_json, FormatError};
use crate::npy::{read_npy, write_npy, Matrix};
use crate::proposals::{InstanceMask3D, InstanceMaskSet};
use crate::scene::{CameraIntrinsics, CameraPose, DepthImage, Frame, PointCloud, Scene};

/// Occlusion slack in meters.
pub const DEFAULT_K_THRESHOLD: f64 = 0.2;
/// Views kept per mask.
pub const DEFAULT_K_VIEW: usize = 5;

#[derive(Debug, Error)]
pub enum VisibilityError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("inconsistent visibility table: {0}")]
    Inconsistent(String),
}

/// Homogeneous image coordinates; `w` is the camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection2D {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl Projection2D {
    pub fn pixel(&self) -> Option<(f64, f64)> {
        (self.w != 0.0).then(|| (self.u / self.w, self.v / self.w))
    }
}

/// `(u, v, w)ᵀ = K · (R | t) · (x, y, z, 1)ᵀ` with a world-to-camera pose.
pub fn project_point(point: [f64; 3], pose: &CameraPose, k: &CameraIntrinsics) -> Projection2D {
    let c = pose.transform(point);
    Projection2D { u: k.fx * c[0] + k.cx * c[2], v: k.fy * c[1] + k.cy * c[2], w: c[2] }
}

/// In front of the camera and inside `[0, W-1] × [0, H-1]`.
pub fn in_fov(p: &Projection2D, width: u32, height: u32) -> bool {
    if !(p.w > 0.0) {
        return false;
    }
    let (x, y) = (p.u / p.w, p.v / p.w);
    (0.0..=(width as f64 - 1.0)).contains(&x) && (0.0..=(height as f64 - 1.0)).contains(&y)
}

/// Nearest pixel, rounding halves up on both axes. Callers check `in_fov` first.
pub fn nearest_pixel(p: &Projection2D) -> (u32, u32) {
    let (x, y) = (p.u / p.w, p.v / p.w);
    ((x + 0.5).floor() as u32, (y + 0.5).floor() as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidDepthPolicy {
    /// A zero depth reading gives no evidence of visibility.
    #[default]
    NotVisible,
    Visible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    pub k_threshold: f64,
    #[serde(default)]
    pub invalid_depth: InvalidDepthPolicy,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self { k_threshold: DEFAULT_K_THRESHOLD, invalid_depth: InvalidDepthPolicy::NotVisible }
    }
}

impl OcclusionParams {
    pub fn with_threshold(k_threshold: f64) -> Self {
        Self { k_threshold, ..Self::default() }
    }
}

/// Occluded iff the measured depth `d` at the nearest pixel satisfies
/// `w - d > k_threshold`. `p` must be in the field of view.
pub fn is_unoccluded(p: &Projection2D, depth: &DepthImage, params: &OcclusionParams) -> bool {
    let (col, row) = nearest_pixel(p);
    let d = depth.at(col, row) as f64;
    if d == 0.0 {
        return params.invalid_depth == InvalidDepthPolicy::Visible;
    }
    !(p.w - d > params.k_threshold)
}

/// Depth-image pixel of `point` if it is visible in `frame`.
pub fn visible_pixel(point: [f64; 3], frame: &Frame, params: &OcclusionParams) -> Option<(u32, u32)> {
    let p = project_point(point, &frame.pose, &frame.intrinsics);
    (in_fov(&p, frame.intrinsics.width, frame.intrinsics.height) && is_unoccluded(&p, &frame.depth, params))
        .then(|| nearest_pixel(&p))
}

pub fn count_visible(mask: &InstanceMask3D, frame: &Frame, cloud: &PointCloud, params: &OcclusionParams) -> u32 {
    mask.indices()
        .iter()
        .filter(|&&i| visible_pixel(cloud.point(i as usize), frame, params).is_some())
        .count() as u32
}

/// Visibility flag for every point of the cloud in one frame.
pub fn visible_points(frame: &Frame, cloud: &PointCloud, params: &OcclusionParams) -> Vec<bool> {
    (0..cloud.len()).map(|i| visible_pixel(cloud.point(i), frame, params).is_some()).collect()
}

/// Visible-point counts and normalized scores, one row per mask and one
/// column per scene frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityTable {
    /// `Frame::index` of each column.
    pub frame_indices: Vec<usize>,
    counts: Matrix<u32>,
    scores: Matrix<f32>,
    flagged: Vec<bool>,
}

impl VisibilityTable {
    /// Normalizes each row by its maximum. All-zero rows stay zero and are flagged.
    pub fn from_counts(counts: Matrix<u32>, frame_indices: Vec<usize>) -> Result<Self, VisibilityError> {
        if counts.cols() != frame_indices.len() {
            return Err(VisibilityError::Inconsistent(format!(
                "{} columns for {} frames",
                counts.cols(),
                frame_indices.len()
            )));
        }
        let mut scores = Matrix::filled(counts.rows(), counts.cols(), 0.0f32);
        let mut flagged = vec![false; counts.rows()];
        for (r, flag) in flagged.iter_mut().enumerate() {
            let max = counts.row(r).iter().copied().max().unwrap_or(0);
            if max == 0 {
                *flag = true;
                continue;
            }
            for c in 0..counts.cols() {
                scores.set(r, c, (counts.get(r, c) as f64 / max as f64) as f32);
            }
        }
        Ok(Self { frame_indices, counts, scores, flagged })
    }

    pub fn num_masks(&self) -> usize {
        self.counts.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.counts.cols()
    }

    pub fn counts(&self) -> &Matrix<u32> {
        &self.counts
    }

    pub fn scores(&self) -> &Matrix<f32> {
        &self.scores
    }

    pub fn count(&self, mask: usize, frame: usize) -> u32 {
        self.counts.get(mask, frame)
    }

    pub fn score(&self, mask: usize, frame: usize) -> f32 {
        self.scores.get(mask, frame)
    }

    /// Masks visible in no frame.
    pub fn is_flagged(&self, mask: usize) -> bool {
        self.flagged[mask]
    }

    pub fn flagged(&self) -> &[bool] {
        &self.flagged
    }

    /// Writes `<stem>.npy` (float32 scores), `<stem>.counts.npy` (uint32) and
    /// `<stem>.json` (frame mapping, flags, caller metadata).
    pub fn save(&self, scores_path: &Path, scene_id: &str, cache_key: Option<&str>, k_threshold: f64) -> Result<(), VisibilityError> {
        write_npy(scores_path, &self.scores)?;
        write_npy(&counts_path(scores_path), &self.counts)?;
        let manifest = VisibilityManifest {
            scene_id: scene_id.to_string(),
            masks: self.num_masks(),
            frames: self.num_frames(),
            frame_indices: self.frame_indices.clone(),
            flagged: self.flagged.clone(),
            k_threshold,
            cache_key: cache_key.map(str::to_string),
        };
        write_json(&scores_path.with_extension("json"), &manifest)?;
        Ok(())
    }

    pub fn load(scores_path: &Path) -> Result<(Self, VisibilityManifest), VisibilityError> {
        let manifest: VisibilityManifest = read_json(&scores_path.with_extension("json"))?;
        let counts: Matrix<u32> = read_npy(&counts_path(scores_path))?;
        let stored: Matrix<f32> = read_npy(scores_path)?;
        if counts.rows() != manifest.masks || counts.cols() != manifest.frames {
            return Err(VisibilityError::Inconsistent(format!(
                "counts are {}x{}, manifest declares {}x{}",
                counts.rows(),
                counts.cols(),
                manifest.masks,
                manifest.frames
            )));
        }
        let table = Self::from_counts(counts, manifest.frame_indices.clone())?;
        if table.scores != stored {
            return Err(VisibilityError::Inconsistent("stored scores do not match counts".into()));
        }
        Ok((table, manifest))
    }
}

fn counts_path(scores_path: &Path) -> PathBuf {
    scores_path.with_extension("counts.npy")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityManifest {
    pub scene_id: String,
    pub masks: usize,
    pub frames: usize,
    pub frame_indices: Vec<usize>,
    pub flagged: Vec<bool>,
    pub k_threshold: f64,
    #[serde(default)]
    pub cache_key: Option<String>,
}

/// Counts visible member points for every (mask, frame) pair.
pub fn build_visibility_table(masks: &InstanceMaskSet, scene: &Scene, params: &OcclusionParams) -> VisibilityTable {
    let columns: Vec<Vec<u32>> = scene
        .frames
        .par_iter()
        .map(|frame| {
            let vis = visible_points(frame, &scene.cloud, params);
            masks
                .masks
                .iter()
                .map(|m| m.indices().iter().filter(|&&i| vis[i as usize]).count() as u32)
                .collect()
        })
        .collect();
    let (rows, cols) = (masks.len(), scene.frames.len());
    let mut counts = Matrix::filled(rows, cols, 0u32);
    for (c, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            counts.set(r, c, v);
        }
    }
    let table = VisibilityTable::from_counts(counts, scene.frames.iter().map(|f| f.index).collect())
        .expect("column count matches frame count");
    let flagged = table.flagged.iter().filter(|f| **f).count();
    if flagged > 0 {
        log::warn!("{flagged} of {rows} mask(s) are not visible in any frame");
    }
    table
}

/// Selected views for one mask as column positions into the table (and the
/// scene's frame list), best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSelection {
    pub mask: usize,
    pub frames: Vec<usize>,
}

/// Top `k_view` frames by score (all frames when `None`), ties by ascending
/// frame position; zero-score frames are never selected.
pub fn select_topk_views(table: &VisibilityTable, mask: usize, k_view: Option<usize>) -> Result<ViewSelection, VisibilityError> {
    if k_view == Some(0) {
        return Err(VisibilityError::Parameter("k_view must be at least 1".into()));
    }
    if mask >= table.num_masks() {
        return Err(VisibilityError::Parameter(format!("mask {mask} out of range")));
    }
    let mut frames: Vec<usize> = (0..table.num_frames()).filter(|&c| table.score(mask, c) > 0.0).collect();
    frames.sort_by(|&a, &b| table.score(mask, b).total_cmp(&table.score(mask, a)).then(a.cmp(&b)));
    if let Some(k) = k_view {
        frames.truncate(k);
    }
    Ok(ViewSelection { mask, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::MaskProvenance;
    use crate::scene::ColorImageRef;
    use proptest::prelude::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn table(rows: &[&[u32]]) -> VisibilityTable {
        let cols = rows[0].len();
        let m = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), cols).unwrap();
        VisibilityTable::from_counts(m, (0..cols).collect()).unwrap()
    }

    fn proj(x: f64, y: f64, w: f64) -> Projection2D {
        Projection2D { u: x * w, v: y * w, w }
    }

    #[test]
    fn projection_examples() {
        let p = project_point([0.0, 0.0, 2.0], &CameraPose::identity(), &k100());
        assert_eq!((p.u, p.v, p.w), (100.0, 100.0, 2.0));
        assert_eq!(p.pixel(), Some((50.0, 50.0)));

        let o = project_point([0.0; 3], &CameraPose::identity(), &k100());
        assert_eq!(o.w, 0.0);
        assert_eq!(o.pixel(), None);

        let mut pose = CameraPose::identity();
        pose.translation = [0.0, 0.0, 1.0];
        assert_eq!(project_point([0.0, 0.0, 1.0], &pose, &k100()).w, 2.0);
    }

    #[test]
    fn fov_examples() {
        assert!(in_fov(&proj(0.0, 0.0, 1.0), 100, 100));
        assert!(in_fov(&proj(99.0, 99.0, 1.0), 100, 100));
        assert!(!in_fov(&proj(99.5, 50.0, 1.0), 100, 100));
        assert!(!in_fov(&proj(50.0, 50.0, -2.0), 100, 100));
        assert!(!in_fov(&Projection2D { u: 0.0, v: 0.0, w: 0.0 }, 100, 100));
    }

    #[test]
    fn occlusion_examples() {
        let depth = DepthImage::new(100, 100, vec![2.0; 10_000]).unwrap();
        let k = OcclusionParams::with_threshold(0.2);
        assert!(is_unoccluded(&proj(10.0, 10.0, 2.0), &depth, &k));
        assert!(!is_unoccluded(&proj(10.0, 10.0, 3.0), &depth, &k));
        assert!(is_unoccluded(&proj(10.0, 10.0, 2.1), &depth, &k));
        // in front of the measured surface is fine too
        assert!(is_unoccluded(&proj(10.0, 10.0, 0.5), &depth, &k));
    }

    #[test]
    fn invalid_depth_policy() {
        let mut data = vec![2.0; 100];
        data[0] = 0.0;
        let depth = DepthImage::new(10, 10, data).unwrap();
        let p = proj(0.0, 0.0, 1.0);
        assert!(!is_unoccluded(&p, &depth, &OcclusionParams::default()));
        let lenient = OcclusionParams { invalid_depth: InvalidDepthPolicy::Visible, ..Default::default() };
        assert!(is_unoccluded(&p, &depth, &lenient));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(nearest_pixel(&proj(2.5, 3.49, 1.0)), (3, 3));
        assert_eq!(nearest_pixel(&proj(98.5, 0.5, 2.0)), (99, 1));
    }

    #[test]
    fn normalization_examples() {
        let t = table(&[&[10, 5, 0], &[7, 7, 0], &[0, 0, 0]]);
        assert_eq!(t.scores().row(0), &[1.0, 0.5, 0.0]);
        assert_eq!(t.scores().row(1), &[1.0, 1.0, 0.0]);
        assert_eq!(t.scores().row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(t.flagged(), &[false, false, true]);
    }

    #[test]
    fn topk_examples() {
        let t = VisibilityTable {
            frame_indices: vec![0, 1, 2],
            counts: Matrix::filled(3, 3, 0),
            scores: Matrix::from_rows(&[vec![0.2, 1.0, 0.5], vec![1.0, 1.0, 0.3], vec![0.4, 0.0, 0.0]], 3).unwrap(),
            flagged: vec![false; 3],
        };
        assert_eq!(select_topk_views(&t, 0, Some(2)).unwrap().frames, vec![1, 2]);
        assert_eq!(select_topk_views(&t, 1, Some(1)).unwrap().frames, vec![0]);
        assert_eq!(select_topk_views(&t, 2, Some(5)).unwrap().frames, vec![0]);
        assert!(select_topk_views(&t, 0, Some(0)).is_err());
        let flagged = table(&[&[0, 0]]);
        assert!(select_topk_views(&flagged, 0, Some(3)).unwrap().frames.is_empty());
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let cloud = PointCloud::new((0..10).map(|i| [0.1 * i as f32, 0.0, -3.0]).collect(), None).unwrap();
        let frame = Frame {
            index: 0,
            color: ColorImageRef { path: "c.png".into(), width: 100, height: 100 },
            depth: DepthImage::new(100, 100, vec![3.0; 10_000]).unwrap(),
            pose: CameraPose::identity(),
            intrinsics: k100(),
            color_intrinsics: k100(),
        };
        let mask = InstanceMask3D::new(0, 10, (0..10).collect(), MaskProvenance { proposal_id: 0, cluster: None }).unwrap();
        assert_eq!(count_visible(&mask, &frame, &cloud, &OcclusionParams::default()), 0);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[&[3, 1], &[0, 0]]);
        let p = dir.path().join("vis.npy");
        t.save(&p, "s", Some("abc"), 0.2).unwrap();
        let (back, manifest) = VisibilityTable::load(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(manifest.cache_key.as_deref(), Some("abc"));
        assert_eq!(manifest.flagged, vec![false, true]);
    }

    proptest! {
        #[test]
        fn scaling_counts_preserves_scores(row in prop::collection::vec(0u32..1000, 1..12), s in 1u32..50) {
            let a = table(&[&row]);
            let scaled: Vec<u32> = row.iter().map(|c| c * s).collect();
            let b = table(&[&scaled]);
            prop_assert_eq!(a.scores(), b.scores());
        }

        #[test]
        fn topk_all_lists_every_nonzero(row in prop::collection::vec(0u32..5, 1..12)) {
            let t = table(&[&row]);
            let sel = select_topk_views(&t, 0, Some(row.len())).unwrap();
            let mut got = sel.frames.clone();
            got.sort_unstable();
            let want: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0).collect();
            prop_assert_eq!(got, want);
            for w in sel.frames.windows(2) {
                let (a, b) = (t.score(0, w[0]), t.score(0, w[1]));
                prop_assert!(a > b || (a == b && w[0] < w[1]));
            }
        }
    }
}
