//! Scene model and loader: point cloud, posed depth frames and intrinsics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::ply::{self, PlyEncoding};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to load {}: {source}", path.display())]
    Load { path: PathBuf, source: FormatError },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

impl SceneError {
    pub(crate) fn load(path: &Path, source: FormatError) -> Self {
        Self::Load { path: path.to_path_buf(), source }
    }
}

/// Scene point cloud in meters, with optional 8-bit colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self, SceneError> {
        if points.is_empty() {
            return Err(SceneError::Validation("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(SceneError::Validation(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(SceneError::Validation(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn with_colors(&self, colors: Vec<[u8; 3]>) -> Result<Self, SceneError> {
        Self::new(self.points.clone(), Some(colors))
    }
}

/// Pinhole intrinsics together with the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, SceneError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(SceneError::Validation(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Parses a whitespace-separated 3x3 or 4x4 row-major matrix; the top-left
    /// 3x3 block holds the intrinsics.
    pub fn parse_matrix(text: &str, width: u32, height: u32) -> Result<Self, SceneError> {
        let v = parse_numbers(text).map_err(SceneError::Validation)?;
        let stride = match v.len() {
            9 => 3,
            16 => 4,
            n => return Err(SceneError::Validation(format!("intrinsics matrix has {n} entries, expected 9 or 16"))),
        };
        Self::new(v[0], v[stride + 1], v[2], v[stride + 2], width, height)
    }

    /// Same camera center and focal ratio mapped onto a resized image.
    pub fn scaled_to(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height }
    }
}

fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseConvention {
    WorldToCamera,
    CameraToWorld,
}

/// Rigid transform, always stored world-to-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    /// Builds a world-to-camera pose from a rotation/translation given in
    /// `convention`, checking orthonormality within `tolerance`.
    pub fn new(
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        convention: PoseConvention,
        tolerance: f64,
    ) -> Result<Self, SceneError> {
        if rotation.iter().flatten().chain(&translation).any(|v| !v.is_finite()) {
            return Err(SceneError::Validation("pose has non-finite entries".into()));
        }
        check_rotation(&rotation, tolerance)?;
        Ok(match convention {
            PoseConvention::WorldToCamera => Self { rotation, translation },
            PoseConvention::CameraToWorld => Self { rotation, translation }.inverse(),
        })
    }

    /// Parses a 4x4 row-major matrix.
    pub fn parse_matrix(text: &str, convention: PoseConvention, tolerance: f64) -> Result<Self, SceneError> {
        let v = parse_numbers(text).map_err(SceneError::Validation)?;
        if v.len() != 16 {
            return Err(SceneError::Validation(format!("pose matrix has {} entries, expected 16", v.len())));
        }
        let rotation = [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]];
        Self::new(rotation, [v[3], v[7], v[11]], convention, tolerance)
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]];
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self { rotation: rt, translation: ti }
    }

    /// World point to camera coordinates.
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Text form of the world-to-camera 4x4 matrix, exact under reparsing.
    pub fn to_matrix_text(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let mut s = String::new();
        for i in 0..3 {
            s.push_str(&format!("{} {} {} {}\n", r[i][0], r[i][1], r[i][2], t[i]));
        }
        s.push_str("0 0 0 1\n");
        s
    }
}

fn check_rotation(r: &[[f64; 3]; 3], tolerance: f64) -> Result<(), SceneError> {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > tolerance {
                return Err(SceneError::Validation(format!(
                    "rotation is not orthonormal (R·Rᵀ[{i}][{j}] = {dot})"
                )));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > tolerance {
        return Err(SceneError::Validation(format!("rotation determinant is {det}, expected +1")));
    }
    Ok(())
}

/// Metric depth map in meters; 0 marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self, SceneError> {
        if data.len() != width as usize * height as usize {
            return Err(SceneError::Validation(format!(
                "depth buffer has {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(SceneError::Validation("depth values must be finite and non-negative".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, col: u32, row: u32) -> f32 {
        self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn read_png(path: &Path, depth_scale: f64) -> Result<Self, SceneError> {
        let img = image::open(path)
            .map_err(|e| SceneError::load(path, FormatError::Parse(e.to_string())))?;
        let (w, h) = (img.width(), img.height());
        let raw: Vec<u16> = match img {
            image::DynamicImage::ImageLuma16(b) => b.into_raw(),
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
            other => {
                return Err(SceneError::Validation(format!(
                    "{}: depth must be single-channel, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let data = raw.into_iter().map(|v| (v as f64 / depth_scale) as f32).collect();
        Self::new(w, h, data)
    }

    /// Writes a 16-bit PNG with `depth_scale` units per meter.
    pub fn write_png(&self, path: &Path, depth_scale: f64) -> Result<(), SceneError> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|d| (*d as f64 * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width, self.height, raw)
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| SceneError::load(path, FormatError::Parse(e.to_string())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorImageRef {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub color: ColorImageRef,
    pub depth: DepthImage,
    pub pose: CameraPose,
    /// Intrinsics of the depth image; bounds the field of view.
    pub intrinsics: CameraIntrinsics,
    /// Intrinsics of the color image; equal to `intrinsics` for registered RGB-D.
    pub color_intrinsics: CameraIntrinsics,
}

impl Frame {
    pub fn color_is_registered(&self) -> bool {
        self.color_intrinsics == self.intrinsics
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn new(id: impl Into<String>, cloud: PointCloud, frames: Vec<Frame>) -> Result<Self, SceneError> {
        if frames.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(SceneError::Validation("frame indices must be strictly increasing".into()));
        }
        for f in &frames {
            if f.depth.width() != f.intrinsics.width || f.depth.height() != f.intrinsics.height {
                return Err(SceneError::Validation(format!(
                    "frame {}: depth is {}x{} but intrinsics describe {}x{}",
                    f.index,
                    f.depth.width(),
                    f.depth.height(),
                    f.intrinsics.width,
                    f.intrinsics.height
                )));
            }
        }
        Ok(Self { id: id.into(), cloud, frames })
    }

    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }

    /// Keeps every `round(source_rate / target_rate)`-th frame, starting with the first.
    pub fn subsample_frames(&self, source_rate: f64, target_rate: f64) -> Result<Scene, SceneError> {
        let stride = frame_stride(source_rate, target_rate)?;
        Ok(Scene {
            id: self.id.clone(),
            cloud: self.cloud.clone(),
            frames: self.frames.iter().step_by(stride).cloned().collect(),
        })
    }
}

pub fn frame_stride(source_rate: f64, target_rate: f64) -> Result<usize, SceneError> {
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(SceneError::Parameter(format!("target rate must be positive, got {target_rate}")));
    }
    if !(source_rate >= target_rate && source_rate.is_finite()) {
        return Err(SceneError::Parameter(format!(
            "target rate {target_rate} Hz exceeds source rate {source_rate} Hz"
        )));
    }
    Ok(((source_rate / target_rate).round() as usize).max(1))
}

fn default_depth_scale() -> f64 {
    1000.0
}

fn default_source_rate() -> f64 {
    30.0
}

fn default_rotation_tolerance() -> f64 {
    1e-6
}

/// Where a scene's files live and how to interpret them.
///
/// Paths are relative to the scene root. Per-frame patterns contain an
/// `{index}` placeholder, optionally zero-padded as `{index:06}`. Frames are
/// discovered by listing the directory of the `pose` pattern.
///
/// ```toml
/// scene_id = "scene0011_00"
/// point_cloud = "scene0011_00_vh_clean_2.ply"
/// color = "color/{index}.jpg"
/// depth = "depth/{index}.png"
/// pose = "pose/{index}.txt"
/// depth_intrinsics = "intrinsic/intrinsic_depth.txt"
/// color_intrinsics = "intrinsic/intrinsic_color.txt"   # optional
/// depth_scale = 1000.0                                 # units per meter
/// source_rate_hz = 30.0
/// pose_convention = "camera_to_world"                  # required
/// rotation_tolerance = 1e-6
/// skip_invalid_poses = false
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLayoutConfig {
    pub scene_id: String,
    pub point_cloud: String,
    pub color: String,
    pub depth: String,
    pub pose: String,
    pub depth_intrinsics: String,
    #[serde(default)]
    pub color_intrinsics: Option<String>,
    /// Expected color size `[width, height]`; read from each image header when absent.
    #[serde(default)]
    pub color_size: Option<[u32; 2]>,
    /// Expected depth size `[width, height]`; checked against every depth image.
    #[serde(default)]
    pub depth_size: Option<[u32; 2]>,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default = "default_source_rate")]
    pub source_rate_hz: f64,
    pub pose_convention: PoseConvention,
    #[serde(default = "default_rotation_tolerance")]
    pub rotation_tolerance: f64,
    /// Drop frames whose pose is non-finite (common in sensor logs) instead of failing.
    #[serde(default)]
    pub skip_invalid_poses: bool,
}

impl SceneLayoutConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SceneError> {
        toml::from_str(text).map_err(|e| SceneError::Validation(format!("layout config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneError::load(path, FormatError::io(path, e)))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("layout config serializes")
    }
}

fn expand(pattern: &str, index: usize) -> Result<String, SceneError> {
    let open = pattern
        .find("{index")
        .ok_or_else(|| SceneError::Validation(format!("pattern {pattern:?} has no {{index}} placeholder")))?;
    let close = open
        + pattern[open..]
            .find('}')
            .ok_or_else(|| SceneError::Validation(format!("unterminated placeholder in {pattern:?}")))?;
    let spec = &pattern[open + 6..close];
    let formatted = match spec.strip_prefix(':') {
        None if spec.is_empty() => index.to_string(),
        Some(w) if w.starts_with('0') => {
            let width: usize = w.parse().map_err(|_| SceneError::Validation(format!("bad width in {pattern:?}")))?;
            format!("{index:0width$}")
        }
        _ => return Err(SceneError::Validation(format!("unsupported placeholder in {pattern:?}"))),
    };
    Ok(format!("{}{}{}", &pattern[..open], formatted, &pattern[close + 1..]))
}

fn discover_indices(root: &Path, pattern: &str) -> Result<Vec<usize>, SceneError> {
    let (dir, file) = match pattern.rfind('/') {
        Some(i) => (&pattern[..i], &pattern[i + 1..]),
        None => ("", pattern),
    };
    let open = file
        .find("{index")
        .ok_or_else(|| SceneError::Validation(format!("pattern {pattern:?} has no {{index}} placeholder in its file name")))?;
    let close = open + file[open..].find('}').unwrap_or(file.len() - open);
    let (prefix, suffix) = (&file[..open], &file[close + 1..]);
    let dir_path = root.join(dir);
    let entries = std::fs::read_dir(&dir_path).map_err(|e| SceneError::load(&dir_path, FormatError::io(&dir_path, e)))?;
    let mut indices = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(mid) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) {
            if let Ok(i) = mid.parse::<usize>() {
                if !mid.is_empty() && mid.bytes().all(|b| b.is_ascii_digit()) {
                    indices.push(i);
                }
            }
        }
    }
    indices.sort_unstable();
    indices.dedup();
    Ok(indices)
}

fn read_text(path: &Path) -> Result<String, SceneError> {
    std::fs::read_to_string(path).map_err(|e| SceneError::load(path, FormatError::io(path, e)))
}

/// Loads and validates a scene. Depth is converted to meters and poses to
/// world-to-camera. Frames are not subsampled here.
pub fn load_scene(root: &Path, layout: &SceneLayoutConfig) -> Result<Scene, SceneError> {
    if !(layout.depth_scale > 0.0) {
        return Err(SceneError::Parameter("depth_scale must be positive".into()));
    }
    let cloud_path = root.join(&layout.point_cloud);
    let cloud = ply::read_point_cloud(&cloud_path).map_err(|e| SceneError::load(&cloud_path, e))?;

    let depth_k_path = root.join(&layout.depth_intrinsics);
    let depth_k_text = read_text(&depth_k_path)?;
    let color_k_text = match &layout.color_intrinsics {
        Some(p) => Some(read_text(&root.join(p))?),
        None => None,
    };

    let mut frames = Vec::new();
    let mut depth_dims: Option<(u32, u32)> = layout.depth_size.map(|[w, h]| (w, h));
    for index in discover_indices(root, &layout.pose)? {
        let pose_path = root.join(expand(&layout.pose, index)?);
        let pose = match CameraPose::parse_matrix(&read_text(&pose_path)?, layout.pose_convention, layout.rotation_tolerance) {
            Ok(p) => p,
            Err(SceneError::Validation(msg)) if layout.skip_invalid_poses && msg.contains("non-finite") => {
                log::warn!("frame {index}: skipping frame with invalid pose");
                continue;
            }
            Err(SceneError::Validation(msg)) => {
                return Err(SceneError::Validation(format!("{}: {msg}", pose_path.display())))
            }
            Err(e) => return Err(e),
        };
        let depth_path = root.join(expand(&layout.depth, index)?);
        if !depth_path.exists() {
            return Err(SceneError::load(
                &depth_path,
                FormatError::io(&depth_path, std::io::ErrorKind::NotFound.into()),
            ));
        }
        let depth = DepthImage::read_png(&depth_path, layout.depth_scale)?;
        match depth_dims {
            Some((w, h)) if (w, h) != (depth.width(), depth.height()) => {
                return Err(SceneError::Validation(format!(
                    "{}: depth is {}x{}, expected {w}x{h}",
                    depth_path.display(),
                    depth.width(),
                    depth.height()
                )))
            }
            _ => depth_dims = Some((depth.width(), depth.height())),
        }
        let intrinsics = CameraIntrinsics::parse_matrix(&depth_k_text, depth.width(), depth.height())
            .map_err(|e| SceneError::Validation(format!("{}: {e}", depth_k_path.display())))?;

        let color_path = root.join(expand(&layout.color, index)?);
        let (cw, ch) = match layout.color_size {
            Some([w, h]) => {
                if !color_path.exists() {
                    return Err(SceneError::load(
                        &color_path,
                        FormatError::io(&color_path, std::io::ErrorKind::NotFound.into()),
                    ));
                }
                (w, h)
            }
            None => image::image_dimensions(&color_path)
                .map_err(|e| SceneError::load(&color_path, FormatError::Parse(e.to_string())))?,
        };
        let color_intrinsics = match &color_k_text {
            Some(text) => CameraIntrinsics::parse_matrix(text, cw, ch)?,
            None if (cw, ch) == (depth.width(), depth.height()) => intrinsics,
            // unregistered sizes without color intrinsics: assume the same field of view
            None => intrinsics.scaled_to(cw, ch),
        };
        frames.push(Frame {
            index,
            color: ColorImageRef { path: color_path, width: cw, height: ch },
            depth,
            pose,
            intrinsics,
            color_intrinsics,
        });
    }
    if frames.is_empty() {
        log::warn!("scene {}: no frames found", layout.scene_id);
    }
    Scene::new(layout.scene_id.clone(), cloud, frames)
}

/// Writes `scene` under `root` in a canonical layout (binary PLY, 16-bit
/// depth PNGs, world-to-camera poses) and returns the matching layout config.
/// Color images are copied next to the other frame files.
pub fn save_scene(scene: &Scene, root: &Path, depth_scale: f64) -> Result<SceneLayoutConfig, SceneError> {
    for d in ["color", "depth", "pose", "intrinsic"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| SceneError::load(&p, FormatError::io(&p, e)))?;
    }
    let cloud_path = root.join("points.ply");
    ply::write_point_cloud(&cloud_path, &scene.cloud, PlyEncoding::BinaryLittleEndian)
        .map_err(|e| SceneError::load(&cloud_path, e))?;
    let write = |path: PathBuf, text: String| -> Result<(), SceneError> {
        std::fs::write(&path, text).map_err(|e| SceneError::load(&path, FormatError::io(&path, e)))
    };
    let k_text = |k: &CameraIntrinsics| format!("{} 0 {}\n0 {} {}\n0 0 1\n", k.fx, k.cx, k.fy, k.cy);
    let mut color_ext = "png".to_string();
    let mut registered = true;
    if let Some(f) = scene.frames.first() {
        write(root.join("intrinsic/intrinsic_depth.txt"), k_text(&f.intrinsics))?;
        write(root.join("intrinsic/intrinsic_color.txt"), k_text(&f.color_intrinsics))?;
        registered = f.color_is_registered();
        if let Some(ext) = f.color.path.extension().and_then(|e| e.to_str()) {
            color_ext = ext.to_string();
        }
    }
    for f in &scene.frames {
        f.depth.write_png(&root.join(format!("depth/{}.png", f.index)), depth_scale)?;
        write(root.join(format!("pose/{}.txt", f.index)), f.pose.to_matrix_text())?;
        let dst = root.join(format!("color/{}.{color_ext}", f.index));
        if f.color.path != dst {
            std::fs::copy(&f.color.path, &dst).map_err(|e| SceneError::load(&f.color.path, FormatError::io(&f.color.path, e)))?;
        }
    }
    let color_size = scene.frames.first().map(|f| [f.color.width, f.color.height]);
    let layout = SceneLayoutConfig {
        scene_id: scene.id.clone(),
        point_cloud: "points.ply".into(),
        color: format!("color/{{index}}.{color_ext}"),
        depth: "depth/{index}.png".into(),
        pose: "pose/{index}.txt".into(),
        depth_intrinsics: "intrinsic/intrinsic_depth.txt".into(),
        color_intrinsics: (!registered).then(|| "intrinsic/intrinsic_color.txt".into()),
        color_size,
        depth_size: None,
        depth_scale,
        source_rate_hz: default_source_rate(),
        pose_convention: PoseConvention::WorldToCamera,
        rotation_tolerance: default_rotation_tolerance(),
        skip_invalid_poses: false,
    };
    write(root.join("layout.toml"), layout.to_toml_string())?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_z(a: f64) -> [[f64; 3]; 3] {
        [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]]
    }

    #[test]
    fn reflection_is_rejected() {
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let err = CameraPose::new(r, [0.0; 3], PoseConvention::WorldToCamera, 1e-6).unwrap_err();
        assert!(matches!(err, SceneError::Validation(m) if m.contains("determinant")));
    }

    #[test]
    fn skewed_rotation_is_rejected() {
        let r = [[1.0, 0.01, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraPose::new(r, [0.0; 3], PoseConvention::WorldToCamera, 1e-6).is_err());
    }

    #[test]
    fn camera_to_world_is_inverted() {
        let c2w = CameraPose::new(rot_z(0.3), [1.0, 2.0, 3.0], PoseConvention::WorldToCamera, 1e-9).unwrap();
        let w2c = CameraPose::new(rot_z(0.3), [1.0, 2.0, 3.0], PoseConvention::CameraToWorld, 1e-9).unwrap();
        let p = [0.5, -1.0, 4.0];
        let back = w2c.transform(c2w.transform(p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-12);
        }
        // the camera center maps to the origin
        let o = w2c.transform([1.0, 2.0, 3.0]);
        assert!(o.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn intrinsics_from_4x4() {
        let k = CameraIntrinsics::parse_matrix("577.6 0 318.9 0\n0 578.7 242.7 0\n0 0 1 0\n0 0 0 1", 640, 480).unwrap();
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (577.6, 578.7, 318.9, 242.7));
    }

    #[test]
    fn principal_point_outside_image() {
        assert!(CameraIntrinsics::new(100.0, 100.0, 120.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(0.0, 100.0, 50.0, 50.0, 100, 100).is_err());
    }

    #[test]
    fn pattern_expansion() {
        assert_eq!(expand("depth/{index}.png", 42).unwrap(), "depth/42.png");
        assert_eq!(expand("frame-{index:06}.color.jpg", 7).unwrap(), "frame-000007.color.jpg");
        assert!(expand("depth.png", 1).is_err());
    }

    #[test]
    fn stride_rule() {
        assert_eq!(frame_stride(30.0, 3.0).unwrap(), 10);
        assert_eq!(frame_stride(30.0, 30.0).unwrap(), 1);
        assert_eq!(frame_stride(30.0, 7.0).unwrap(), 4);
        assert!(matches!(frame_stride(3.0, 30.0), Err(SceneError::Parameter(_))));
        assert!(matches!(frame_stride(30.0, 0.0), Err(SceneError::Parameter(_))));
    }

    #[test]
    fn layout_requires_pose_convention() {
        let text = r#"
            scene_id = "s"
            point_cloud = "p.ply"
            color = "color/{index}.jpg"
            depth = "depth/{index}.png"
            pose = "pose/{index}.txt"
            depth_intrinsics = "k.txt"
        "#;
        assert!(SceneLayoutConfig::from_toml_str(text).is_err());
        let ok = SceneLayoutConfig::from_toml_str(&format!("{text}\npose_convention = \"camera_to_world\"")).unwrap();
        assert_eq!(ok.depth_scale, 1000.0);
        assert_eq!(ok.pose_convention, PoseConvention::CameraToWorld);
    }
}
