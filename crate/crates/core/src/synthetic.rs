//! Deterministic fixture scenes with ground-truth instances, plus model
//! stand-ins driven by rendered instance-label images.
//!
//! Scenes are a floor patch with box-shaped objects, observed by cameras on
//! a circular orbit. Depth and instance labels are rendered by splatting each
//! point into a small pixel neighborhood with a z-buffer.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, FormatError};
use crate::eval::LabeledMask;
use crate::features::{EmbeddingProvider, ProviderError};
use crate::mask2d::{CropRecord, Mask2D, SegmentRequest, Segmenter, SegmenterError};
use crate::proposals::{write_mask_set, InstanceMask3D, InstanceMaskSet, MaskProvenance};
use crate::query::{apply_template, DEFAULT_TEMPLATE};
use crate::scene::{save_scene, CameraIntrinsics, CameraPose, ColorImageRef, DepthImage, Frame, PointCloud, PoseConvention, Scene, SceneError};
use crate::visibility::{in_fov, nearest_pixel, project_point};

pub const DEFAULT_VOCABULARY: [&str; 12] =
    ["chair", "table", "sofa", "lamp", "bed", "desk", "bookshelf", "toilet", "sink", "bathtub", "cabinet", "plant"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub scene_id: String,
    pub seed: u64,
    pub num_objects: usize,
    pub vocabulary: Vec<String>,
    /// Give every object a different label (needs `vocabulary.len() >= num_objects`).
    pub unique_labels: bool,
    /// Sampling step on object and floor surfaces, in meters.
    pub point_spacing: f64,
    pub floor_half_extent: f64,
    pub num_frames: usize,
    /// Difference between consecutive frame indices.
    pub frame_stride: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub orbit_radius: f64,
    pub camera_height: f64,
    /// Pixels around the nearest pixel that each point also covers.
    pub splat_radius: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scene_id: "synthetic0".into(),
            seed: 0,
            num_objects: 5,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            unique_labels: true,
            point_spacing: 0.08,
            floor_half_extent: 2.0,
            num_frames: 12,
            frame_stride: 10,
            width: 64,
            height: 48,
            focal: 48.0,
            orbit_radius: 4.0,
            camera_height: 2.5,
            splat_radius: 1,
        }
    }
}

/// Per-pixel instance ids (0 = background, `k + 1` = object `k`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl LabelImage {
    pub fn at(&self, col: u32, row: u32) -> u16 {
        self.data[(row * self.width + col) as usize]
    }

    pub fn write_png(&self, path: &Path) -> Result<(), FormatError> {
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| FormatError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn read_png(path: &Path) -> Result<Self, FormatError> {
        let img = image::open(path).map_err(|e| FormatError::Parse(format!("{}: {e}", path.display())))?.to_luma16();
        let (width, height) = img.dimensions();
        Ok(Self { width, height, data: img.into_raw() })
    }
}

/// A generated scene with everything needed to score a pipeline run.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub scene: Scene,
    /// Instance id of every point (0 = floor).
    pub point_instance: Vec<u16>,
    /// Label of object `k` (instance id `k + 1`).
    pub object_labels: Vec<String>,
    pub vocabulary: Vec<String>,
    /// Instance images aligned with `scene.frames`.
    pub label_images: Vec<LabelImage>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// World-to-camera pose of a camera at `eye` looking at `target` (+z forward,
/// +y down in the image, world +z up).
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> CameraPose {
    let f = normalize(sub(target, eye));
    let right = normalize(cross(f, [0.0, 0.0, 1.0]));
    let down = cross(f, right);
    let r = [right, down, f];
    let t = [
        -(r[0][0] * eye[0] + r[0][1] * eye[1] + r[0][2] * eye[2]),
        -(r[1][0] * eye[0] + r[1][1] * eye[1] + r[1][2] * eye[2]),
        -(r[2][0] * eye[0] + r[2][1] * eye[1] + r[2][2] * eye[2]),
    ];
    CameraPose::new(r, t, PoseConvention::WorldToCamera, 1e-9).expect("look-at rotation is orthonormal")
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Points on the five exposed faces of an axis-aligned box standing on z = 0.
fn box_surface(center: [f64; 2], half: [f64; 2], height: f64, step: f64) -> Vec<[f32; 3]> {
    let (x0, x1) = (center[0] - half[0], center[0] + half[0]);
    let (y0, y1) = (center[1] - half[1], center[1] + half[1]);
    let mut pts = Vec::new();
    let to32 = |p: [f64; 3]| [p[0] as f32, p[1] as f32, p[2] as f32];
    for x in grid(x0, x1, step) {
        for y in grid(y0, y1, step) {
            pts.push(to32([x, y, height]));
        }
    }
    for z in grid(0.0, height, step) {
        for x in grid(x0, x1, step) {
            pts.push(to32([x, y0, z]));
            pts.push(to32([x, y1, z]));
        }
        for y in grid(y0, y1, step) {
            pts.push(to32([x0, y, z]));
            pts.push(to32([x1, y, z]));
        }
    }
    pts
}

/// Z-buffer render of depth and instance ids for one camera.
pub fn render(cloud: &PointCloud, instance: &[u16], pose: &CameraPose, k: &CameraIntrinsics, splat: u32) -> (DepthImage, LabelImage) {
    let (w, h) = (k.width, k.height);
    let mut depth = vec![f32::INFINITY; (w * h) as usize];
    let mut label = vec![0u16; (w * h) as usize];
    for i in 0..cloud.len() {
        let p = project_point(cloud.point(i), pose, k);
        if !in_fov(&p, w, h) {
            continue;
        }
        let (c, r) = nearest_pixel(&p);
        let z = p.w as f32;
        let s = splat as i64;
        for dr in -s..=s {
            for dc in -s..=s {
                let (cc, rr) = (c as i64 + dc, r as i64 + dr);
                if cc < 0 || rr < 0 || cc >= w as i64 || rr >= h as i64 {
                    continue;
                }
                let idx = (rr as u32 * w + cc as u32) as usize;
                if z < depth[idx] {
                    depth[idx] = z;
                    label[idx] = instance[i];
                }
            }
        }
    }
    for d in &mut depth {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    (DepthImage::new(w, h, depth).expect("size matches"), LabelImage { width: w, height: h, data: label })
}

/// Builds a fixture. Color paths point at `<scene_id>/color/<index>.png` and
/// only exist once the fixture is written with [`write_fixture`].
pub fn generate(config: &SyntheticConfig) -> Result<Fixture, SceneError> {
    let bad = |m: &str| Err(SceneError::Parameter(m.into()));
    if config.vocabulary.is_empty() {
        return bad("empty vocabulary");
    }
    if config.unique_labels && config.vocabulary.len() < config.num_objects {
        return bad("unique labels need at least as many vocabulary entries as objects");
    }
    if !(config.point_spacing > 0.0) || config.num_frames == 0 || config.frame_stride == 0 {
        return bad("point_spacing, num_frames and frame_stride must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // objects sit in distinct cells of a 3x3 layout grid
    let slots: Vec<[f64; 2]> = (0..9).map(|s| [((s % 3) as f64 - 1.0) * 1.2, ((s / 3) as f64 - 1.0) * 1.2]).collect();
    if config.num_objects > slots.len() {
        return bad("at most 9 objects fit the layout grid");
    }
    let mut order: Vec<usize> = (0..slots.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut labels_left: Vec<usize> = (0..config.vocabulary.len()).collect();
    let mut points = Vec::new();
    let mut point_instance = Vec::new();
    let mut colors = Vec::new();
    for y in grid(-config.floor_half_extent, config.floor_half_extent, config.point_spacing) {
        for x in grid(-config.floor_half_extent, config.floor_half_extent, config.point_spacing) {
            points.push([x as f32, y as f32, 0.0]);
            point_instance.push(0);
            colors.push([120, 120, 120]);
        }
    }
    let mut object_labels = Vec::new();
    for k in 0..config.num_objects {
        let label = if config.unique_labels {
            labels_left.remove(rng.random_range(0..labels_left.len()))
        } else {
            rng.random_range(0..config.vocabulary.len())
        };
        object_labels.push(config.vocabulary[label].clone());
        let center = slots[order[k]];
        let half = [rng.random_range(0.2..0.4), rng.random_range(0.2..0.4)];
        let height = rng.random_range(0.4..1.0);
        let color = palette(k + 1);
        for p in box_surface(center, half, height, config.point_spacing) {
            points.push(p);
            point_instance.push((k + 1) as u16);
            colors.push(color);
        }
    }
    let cloud = PointCloud::new(points, Some(colors))?;
    let k = CameraIntrinsics::new(
        config.focal,
        config.focal,
        (config.width as f64 - 1.0) / 2.0,
        (config.height as f64 - 1.0) / 2.0,
        config.width,
        config.height,
    )?;
    let mut frames = Vec::new();
    let mut label_images = Vec::new();
    for i in 0..config.num_frames {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / config.num_frames as f64;
        let eye = [config.orbit_radius * angle.cos(), config.orbit_radius * angle.sin(), config.camera_height];
        let pose = look_at(eye, [0.0, 0.0, 0.3]);
        let (depth, labels) = render(&cloud, &point_instance, &pose, &k, config.splat_radius);
        let index = i * config.frame_stride;
        frames.push(Frame {
            index,
            color: ColorImageRef {
                path: PathBuf::from(format!("{}/color/{index}.png", config.scene_id)),
                width: k.width,
                height: k.height,
            },
            depth,
            pose,
            intrinsics: k,
            color_intrinsics: k,
        });
        label_images.push(labels);
    }
    let scene = Scene::new(config.scene_id.clone(), cloud, frames)?;
    Ok(Fixture { scene, point_instance, object_labels, vocabulary: config.vocabulary.clone(), label_images })
}

fn palette(id: usize) -> [u8; 3] {
    const P: [[u8; 3]; 9] =
        [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60]];
    P[(id - 1) % P.len()]
}

impl Fixture {
    pub fn num_objects(&self) -> usize {
        self.object_labels.len()
    }

    /// Ground-truth instance masks, one per object, labeled.
    pub fn ground_truth(&self) -> Vec<LabeledMask> {
        let n = self.point_instance.len();
        (0..self.num_objects())
            .map(|k| {
                let idx: Vec<u32> = (0..n as u32).filter(|&i| self.point_instance[i as usize] == (k + 1) as u16).collect();
                LabeledMask {
                    mask: InstanceMask3D::new(k, n, idx, MaskProvenance { proposal_id: k, cluster: None }).expect("indices in range"),
                    label: self.object_labels[k].clone(),
                    confidence: 1.0,
                }
            })
            .collect()
    }

    pub fn ground_truth_set(&self) -> InstanceMaskSet {
        let masks = self.ground_truth().into_iter().map(|g| g.mask).collect();
        InstanceMaskSet::new(self.scene.id.clone(), self.point_instance.len(), masks).expect("consistent sizes")
    }

    pub fn assets(&self) -> SyntheticAssets {
        SyntheticAssets::new(&self.scene, &self.label_images, self.object_labels.clone(), self.vocabulary.clone())
    }

    fn color_image(&self, frame: usize) -> image::RgbImage {
        let l = &self.label_images[frame];
        let mut img = image::RgbImage::new(l.width, l.height);
        for (i, p) in img.pixels_mut().enumerate() {
            let id = l.data[i] as usize;
            p.0 = if id == 0 {
                if self.scene.frames[frame].depth.data()[i] > 0.0 {
                    [120, 120, 120]
                } else {
                    [0, 0, 0]
                }
            } else {
                palette(id)
            };
        }
        img
    }
}

/// Ground-truth lookup shared by the synthetic segmenter and provider.
#[derive(Debug, Clone)]
pub struct SyntheticAssets {
    images: HashMap<PathBuf, LabelImage>,
    object_labels: Vec<String>,
    vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AssetManifest {
    vocabulary: Vec<String>,
    object_labels: Vec<String>,
    /// Instance image per frame, `{index}` replaced by the frame index.
    instance_images: String,
}

pub const ASSET_MANIFEST: &str = "synthetic.json";

impl SyntheticAssets {
    pub fn new(scene: &Scene, label_images: &[LabelImage], object_labels: Vec<String>, vocabulary: Vec<String>) -> Self {
        let images = scene.frames.iter().zip(label_images).map(|(f, l)| (f.color.path.clone(), l.clone())).collect();
        Self { images, object_labels, vocabulary }
    }

    /// Loads `synthetic.json` and the instance images under `scene_root`.
    pub fn load(scene_root: &Path, scene: &Scene) -> Result<Self, FormatError> {
        let m: AssetManifest = read_json(&scene_root.join(ASSET_MANIFEST))?;
        let mut images = HashMap::new();
        for f in &scene.frames {
            let path = scene_root.join(m.instance_images.replace("{index}", &f.index.to_string()));
            images.insert(f.color.path.clone(), LabelImage::read_png(&path)?);
        }
        Ok(Self { images, object_labels: m.object_labels, vocabulary: m.vocabulary })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    fn image(&self, path: &Path) -> Option<&LabelImage> {
        self.images.get(path)
    }

    fn class_of(&self, instance: u16) -> Option<usize> {
        let label = self.object_labels.get(instance as usize - 1)?;
        self.vocabulary.iter().position(|v| v == label)
    }
}

/// Most frequent nonzero id (smallest on ties) and its count.
fn majority(ids: impl Iterator<Item = u16>) -> Option<(u16, usize)> {
    let mut counts: HashMap<u16, usize> = HashMap::new();
    for id in ids.filter(|&i| i != 0) {
        *counts.entry(id).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
}

/// Segments the instance under the majority of prompt points, scored by the
/// fraction of prompts on it.
#[derive(Debug, Clone)]
pub struct LabelImageSegmenter {
    pub assets: SyntheticAssets,
}

impl Segmenter for LabelImageSegmenter {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError> {
        let img = self
            .assets
            .image(&request.image.path)
            .ok_or_else(|| SegmenterError::Failed(format!("no instance image for {}", request.image.path.display())))?;
        if request.prompts.is_empty() {
            return Err(SegmenterError::Failed("no prompts".into()));
        }
        let Some((id, n)) = majority(request.prompts.iter().map(|&(c, r)| img.at(c, r))) else {
            return Ok(Mask2D::empty(img.width, img.height));
        };
        let data = img.data.iter().map(|&v| v == id).collect();
        Mask2D::new(img.width, img.height, data, n as f32 / request.prompts.len() as f32)
    }

    fn describe(&self) -> String {
        "synthetic-label-image".into()
    }
}

/// One-hot embeddings: a crop maps to the label of the majority instance
/// inside its box, a text to the vocabulary entry it names. The last
/// dimension stands for "nothing recognizable".
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub assets: SyntheticAssets,
    pub template: String,
}

impl SyntheticProvider {
    pub fn new(assets: SyntheticAssets) -> Self {
        Self { assets, template: DEFAULT_TEMPLATE.into() }
    }

    fn one_hot(&self, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.dim()];
        v[i] = 1.0;
        v
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.assets.vocabulary.len() + 1
    }

    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let none = self.dim() - 1;
        crops
            .iter()
            .map(|c| {
                let img = self.assets.image(&c.image_path).ok_or_else(|| ProviderError::Missing(c.image_path.display().to_string()))?;
                if c.x2 >= img.width || c.y2 >= img.height {
                    return Err(ProviderError::Failed(format!("crop {c:?} outside the image")));
                }
                let ids = (c.y1..=c.y2).flat_map(|r| (c.x1..=c.x2).map(move |col| img.at(col, r)));
                let class = majority(ids).and_then(|(id, _)| self.assets.class_of(id)).unwrap_or(none);
                Ok(self.one_hot(class))
            })
            .collect()
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let none = self.dim() - 1;
        Ok(texts
            .iter()
            .map(|t| {
                let i = self
                    .assets
                    .vocabulary
                    .iter()
                    .position(|v| v == t || apply_template(&self.template, v) == *t)
                    .unwrap_or(none);
                self.one_hot(i)
            })
            .collect())
    }

    fn describe(&self) -> String {
        format!("synthetic-onehot:D={}", self.dim())
    }
}

/// Paths of a fixture written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePaths {
    pub scene_root: PathBuf,
    pub layout: PathBuf,
    pub ground_truth: PathBuf,
    pub proposals: PathBuf,
}

/// Writes the scene (with rendered color images), instance images, the
/// asset manifest, ground truth (`gt.npy`, labeled) and the same masks
/// unlabeled as `proposals.npy`.
pub fn write_fixture(fixture: &Fixture, dir: &Path) -> Result<FixturePaths, SceneError> {
    let root = dir.join(&fixture.scene.id);
    let io = |p: &Path, e: std::io::Error| SceneError::load(p, FormatError::io(p, e));
    for d in ["color", "instance"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
    }
    let mut scene = fixture.scene.clone();
    for (i, f) in scene.frames.iter_mut().enumerate() {
        let color = root.join(format!("color/{}.png", f.index));
        fixture
            .color_image(i)
            .save(&color)
            .map_err(|e| SceneError::load(&color, FormatError::Parse(e.to_string())))?;
        f.color.path = color;
        let inst = root.join(format!("instance/{}.png", f.index));
        fixture.label_images[i].write_png(&inst).map_err(|e| SceneError::load(&inst, e))?;
    }
    // the stored frames are already at the pipeline's default rate
    let mut layout = save_scene(&scene, &root, 1000.0)?;
    layout.source_rate_hz = crate::pipeline::DEFAULT_TARGET_RATE_HZ;
    let lpath = root.join("layout.toml");
    std::fs::write(&lpath, layout.to_toml_string()).map_err(|e| io(&lpath, e))?;
    let manifest = AssetManifest {
        vocabulary: fixture.vocabulary.clone(),
        object_labels: fixture.object_labels.clone(),
        instance_images: "instance/{index}.png".into(),
    };
    let mpath = root.join(ASSET_MANIFEST);
    write_json(&mpath, &manifest).map_err(|e| SceneError::load(&mpath, e))?;
    let set = fixture.ground_truth_set();
    let gt = root.join("gt.npy");
    let proposals = root.join("proposals.npy");
    let wrap = |p: &Path, e: crate::proposals::ProposalError| SceneError::Validation(format!("{}: {e}", p.display()));
    write_mask_set(&gt, &set, Some(fixture.object_labels.clone()), None).map_err(|e| wrap(&gt, e))?;
    write_mask_set(&proposals, &set, None, None).map_err(|e| wrap(&proposals, e))?;
    Ok(FixturePaths { layout: root.join("layout.toml"), scene_root: root, ground_truth: gt, proposals })
}
