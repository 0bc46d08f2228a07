//! 2D mask refinement and multi-scale crop boxes for one (mask, view) pair.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::proposals::InstanceMask3D;
use crate::scene::{ColorImageRef, Frame, PointCloud};
use crate::visibility::{in_fov, nearest_pixel, project_point, visible_pixel, OcclusionParams};

pub const DEFAULT_K_ROUNDS: usize = 10;
pub const DEFAULT_K_SAMPLE: usize = 5;
pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_K_EXP: f64 = 0.2;

/// Integer pixel coordinate `(col, row)`.
pub type Pixel = (u32, u32);

#[derive(Debug, Error)]
pub enum Mask2dError {
    #[error("mask {mask_id} has no visible pixels in frame {frame_index}")]
    DegenerateFrame { mask_id: usize, frame_index: usize },
    #[error("all {rounds} segmentation rounds failed; last error: {last}")]
    AllRoundsFailed { rounds: usize, last: SegmenterError },
    #[error("cannot build a box: {0}")]
    EmptySource(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SegmenterError {
    #[error("segmenter failed: {0}")]
    Failed(String),
    #[error("segmenter returned an invalid mask: {0}")]
    InvalidOutput(String),
}

/// Distinct projected pixels of a mask in one image, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    width: u32,
    height: u32,
    pixels: Vec<Pixel>,
}

impl PixelSet {
    pub fn new(width: u32, height: u32, mut pixels: Vec<Pixel>) -> Result<Self, Mask2dError> {
        if let Some(p) = pixels.iter().find(|p| p.0 >= width || p.1 >= height) {
            return Err(Mask2dError::Parameter(format!("pixel {p:?} outside {width}x{height}")));
        }
        pixels.sort_unstable();
        pixels.dedup();
        Ok(Self { width, height, pixels })
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Binary image mask with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    width: u32,
    height: u32,
    data: Vec<bool>,
    pub score: f32,
}

impl Mask2D {
    pub fn new(width: u32, height: u32, data: Vec<bool>, score: f32) -> Result<Self, SegmenterError> {
        if data.len() != width as usize * height as usize {
            return Err(SegmenterError::InvalidOutput(format!("{} values for {width}x{height}", data.len())));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(SegmenterError::InvalidOutput(format!("score {score} outside [0, 1]")));
        }
        if score > 0.0 && !data.iter().any(|&b| b) {
            return Err(SegmenterError::InvalidOutput("empty mask with positive score".into()));
        }
        Ok(Self { width, height, data, score })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![false; width as usize * height as usize], score: 0.0 }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &[Pixel], score: f32) -> Result<Self, SegmenterError> {
        let mut data = vec![false; width as usize * height as usize];
        for &(c, r) in pixels {
            if c >= width || r >= height {
                return Err(SegmenterError::InvalidOutput(format!("pixel {:?} outside image", (c, r))));
            }
            data[r as usize * width as usize + c as usize] = true;
        }
        Self::new(width, height, data, score)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, col: u32, row: u32) -> bool {
        self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Something with set pixels that a tight box can be fitted around.
pub trait PixelSource {
    fn dims(&self) -> (u32, u32);
    /// `(min_col, min_row, max_col, max_row)` of set pixels, `None` when empty.
    fn pixel_bounds(&self) -> Option<(u32, u32, u32, u32)>;
}

fn extend_bounds(b: Option<(u32, u32, u32, u32)>, (c, r): Pixel) -> Option<(u32, u32, u32, u32)> {
    Some(match b {
        None => (c, r, c, r),
        Some((x1, y1, x2, y2)) => (x1.min(c), y1.min(r), x2.max(c), y2.max(r)),
    })
}

impl PixelSource for PixelSet {
    fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn pixel_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        self.pixels.iter().copied().fold(None, extend_bounds)
    }
}

impl PixelSource for Mask2D {
    fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn pixel_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .fold(None, extend_bounds)
    }
}

/// Inclusive pixel box at crop level `level` (1 = tight box).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    pub level: u32,
}

impl CropBox {
    pub fn contains(&self, other: &CropBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn is_valid(&self, width: u32, height: u32) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x2 < width && self.y2 < height
    }
}

/// Everything a segmenter may need to locate the image and identify the call.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRequest<'a> {
    pub image: &'a ColorImageRef,
    pub frame_index: usize,
    pub mask_id: usize,
    pub round: usize,
    pub prompts: &'a [Pixel],
}

/// Point-prompted 2D segmentation. Implementations must be deterministic for
/// identical requests and callable from several threads at once.
pub trait Segmenter: Send + Sync {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError>;

    /// Identifies the segmenter in cache keys and parameter snapshots.
    fn describe(&self) -> String;
}

/// Test oracle: always returns one fixed mask, scored by the fraction of
/// prompt points that fall inside it.
#[derive(Debug, Clone)]
pub struct FixedMaskSegmenter {
    pub mask: Mask2D,
}

impl Segmenter for FixedMaskSegmenter {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError> {
        if request.prompts.is_empty() {
            return Err(SegmenterError::Failed("no prompts".into()));
        }
        let inside = request.prompts.iter().filter(|&&(c, r)| self.mask.get(c, r)).count();
        let mut out = self.mask.clone();
        out.score = inside as f32 / request.prompts.len() as f32;
        Ok(out)
    }

    fn describe(&self) -> String {
        "fixed-mask".into()
    }
}

/// Mixes a master seed with a (mask, frame) pair (SplitMix64 finalizer).
pub fn derive_seed(master: u64, mask_id: usize, frame_index: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ mask_id as u64) ^ frame_index as u64)
}

/// Color-image pixels of the mask's points that are visible in `frame`.
///
/// Visibility is decided on the depth image; when the color camera has
/// different intrinsics the surviving points are reprojected through the
/// color intrinsics (points outside the color image are dropped).
pub fn project_mask_pixels(
    mask: &InstanceMask3D,
    frame: &Frame,
    cloud: &PointCloud,
    params: &OcclusionParams,
) -> Result<PixelSet, Mask2dError> {
    let registered = frame.color_is_registered();
    let ck = &frame.color_intrinsics;
    let mut pixels = Vec::new();
    for &i in mask.indices() {
        let point = cloud.point(i as usize);
        let Some(px) = visible_pixel(point, frame, params) else { continue };
        if registered {
            pixels.push(px);
        } else {
            let p = project_point(point, &frame.pose, ck);
            if in_fov(&p, ck.width, ck.height) {
                pixels.push(nearest_pixel(&p));
            }
        }
    }
    if pixels.is_empty() {
        return Err(Mask2dError::DegenerateFrame { mask_id: mask.id, frame_index: frame.index });
    }
    PixelSet::new(ck.width, ck.height, pixels)
}

/// Samples prompt subsets for `k_rounds` rounds and keeps the mask with the
/// strictly highest score (the first one on ties). Starts from an empty mask
/// with score 0, so if no round scores above 0 the empty mask is returned.
pub fn select_2d_mask(
    pixels: &PixelSet,
    segmenter: &dyn Segmenter,
    image: &ColorImageRef,
    frame_index: usize,
    mask_id: usize,
    k_rounds: usize,
    k_sample: usize,
    seed: u64,
) -> Result<Mask2D, Mask2dError> {
    if k_rounds == 0 || k_sample == 0 {
        return Err(Mask2dError::Parameter("k_rounds and k_sample must be at least 1".into()));
    }
    if pixels.is_empty() {
        return Err(Mask2dError::EmptySource("no projected pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = k_sample.min(pixels.len());
    let mut best = Mask2D::empty(image.width, image.height);
    let mut failures = 0usize;
    let mut last_error = None;
    for round in 0..k_rounds {
        let prompts: Vec<Pixel> = rand::seq::index::sample(&mut rng, pixels.len(), amount)
            .into_iter()
            .map(|i| pixels.pixels[i])
            .collect();
        let request = SegmentRequest { image, frame_index, mask_id, round, prompts: &prompts };
        match segmenter.segment(&request).and_then(|m| check_output(m, image)) {
            Ok(m) if m.score > best.score => best = m,
            Ok(_) => {}
            Err(e) => {
                log::warn!("mask {mask_id}, frame {frame_index}, round {round}: {e}");
                failures += 1;
                last_error = Some(e);
            }
        }
    }
    if failures == k_rounds {
        return Err(Mask2dError::AllRoundsFailed { rounds: k_rounds, last: last_error.expect("at least one round ran") });
    }
    Ok(best)
}

fn check_output(m: Mask2D, image: &ColorImageRef) -> Result<Mask2D, SegmenterError> {
    if (m.width, m.height) != (image.width, image.height) {
        return Err(SegmenterError::InvalidOutput(format!(
            "mask is {}x{}, image is {}x{}",
            m.width, m.height, image.width, image.height
        )));
    }
    Mask2D::new(m.width, m.height, m.data, m.score)
}

/// Smallest box around the set pixels (level 1). A zero-width or zero-height
/// box grows by one pixel on that axis, toward the far side when possible.
pub fn tight_bbox<S: PixelSource + ?Sized>(source: &S) -> Result<CropBox, Mask2dError> {
    let (w, h) = source.dims();
    let (mut x1, mut y1, mut x2, mut y2) =
        source.pixel_bounds().ok_or_else(|| Mask2dError::EmptySource("no set pixels".into()))?;
    let grow = |lo: &mut u32, hi: &mut u32, size: u32| -> Result<(), Mask2dError> {
        if lo < hi {
            return Ok(());
        }
        if *hi + 1 < size {
            *hi += 1;
        } else if *lo > 0 {
            *lo -= 1;
        } else {
            return Err(Mask2dError::EmptySource(format!("image dimension {size} too small for a box")));
        }
        Ok(())
    };
    grow(&mut x1, &mut x2, w)?;
    grow(&mut y1, &mut y2, h)?;
    Ok(CropBox { x1, y1, x2, y2, level: 1 })
}

/// Level-1 box followed by `levels - 1` boxes expanded by
/// `extent · k_exp · l` per side (l = 2, 3, ...), clamped to the image and
/// rounded to the nearest pixel.
pub fn multiscale_crops(b1: CropBox, levels: usize, k_exp: f64, width: u32, height: u32) -> Vec<CropBox> {
    let b1 = CropBox { level: 1, ..b1 };
    let mut out = Vec::with_capacity(levels.max(1));
    out.push(b1);
    let (w_max, h_max) = ((width - 1) as f64, (height - 1) as f64);
    let ext_x = (b1.x2 - b1.x1) as f64;
    let ext_y = (b1.y2 - b1.y1) as f64;
    for l in 2..=levels {
        let (ex, ey) = (ext_x * k_exp * l as f64, ext_y * k_exp * l as f64);
        out.push(CropBox {
            x1: (b1.x1 as f64 - ex).max(0.0).round() as u32,
            y1: (b1.y1 as f64 - ey).max(0.0).round() as u32,
            x2: (b1.x2 as f64 + ex).min(w_max).round() as u32,
            y2: (b1.y2 as f64 + ey).min(h_max).round() as u32,
            level: l as u32,
        });
    }
    out
}

/// One line of the crop manifest handed to embedding providers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRecord {
    pub mask_id: usize,
    pub frame_index: usize,
    pub level: u32,
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    pub image_path: PathBuf,
}

impl CropRecord {
    pub fn new(mask_id: usize, frame_index: usize, b: &CropBox, image_path: &Path) -> Self {
        Self {
            mask_id,
            frame_index,
            level: b.level,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            image_path: image_path.to_path_buf(),
        }
    }

    pub fn crop_box(&self) -> CropBox {
        CropBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2, level: self.level }
    }
}

/// Writes one JSON object per line.
pub fn write_crop_manifest(path: &Path, records: &[CropRecord]) -> Result<(), FormatError> {
    let file = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| FormatError::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| FormatError::io(path, e))?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn read_crop_manifest(path: &Path) -> Result<Vec<CropRecord>, FormatError> {
    let file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(n, line)| {
            let line = line.map_err(|e| FormatError::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| FormatError::Parse(format!("line {}: {e}", n + 1)).in_file(path))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn img(w: u32, h: u32) -> ColorImageRef {
        ColorImageRef { path: "frame.png".into(), width: w, height: h }
    }

    fn bx(x1: u32, y1: u32, x2: u32, y2: u32, level: u32) -> CropBox {
        CropBox { x1, y1, x2, y2, level }
    }

    /// Score keyed by round; the mask encodes the round in its first pixel column.
    struct Scripted {
        scores: Vec<f32>,
    }

    impl Segmenter for Scripted {
        fn segment(&self, r: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError> {
            Mask2D::from_pixels(r.image.width, r.image.height, &[(r.round as u32, 0)], self.scores[r.round])
        }
        fn describe(&self) -> String {
            "scripted".into()
        }
    }

    #[test]
    fn first_strict_maximum_wins() {
        let px = PixelSet::new(20, 20, vec![(1, 1), (2, 2), (3, 3)]).unwrap();
        let seg = Scripted { scores: vec![0.3, 0.9, 0.9] };
        let m = select_2d_mask(&px, &seg, &img(20, 20), 0, 0, 3, 5, 7).unwrap();
        assert_eq!(m.score, 0.9);
        assert!(m.get(1, 0) && !m.get(2, 0));
    }

    #[test]
    fn all_zero_scores_yield_empty_mask() {
        let px = PixelSet::new(10, 10, vec![(1, 1)]).unwrap();
        let seg = Scripted { scores: vec![0.0; 4] };
        let m = select_2d_mask(&px, &seg, &img(10, 10), 0, 0, 4, 5, 1).unwrap();
        assert_eq!(m.score, 0.0);
        assert_eq!(m.count(), 0);
    }

    struct Recording {
        seen: Mutex<Vec<Vec<Pixel>>>,
    }

    impl Segmenter for Recording {
        fn segment(&self, r: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError> {
            self.seen.lock().unwrap().push(r.prompts.to_vec());
            Mask2D::from_pixels(r.image.width, r.image.height, r.prompts, 0.5)
        }
        fn describe(&self) -> String {
            "recording".into()
        }
    }

    #[test]
    fn sampling_is_clamped_and_distinct() {
        let px = PixelSet::new(10, 10, vec![(1, 1), (4, 2)]).unwrap();
        let seg = Recording { seen: Mutex::new(Vec::new()) };
        select_2d_mask(&px, &seg, &img(10, 10), 0, 0, 3, 5, 11).unwrap();
        for prompts in seg.seen.lock().unwrap().iter() {
            let mut p = prompts.clone();
            p.sort_unstable();
            assert_eq!(p, vec![(1, 1), (4, 2)]);
        }
    }

    #[test]
    fn same_seed_same_prompts() {
        let px = PixelSet::new(50, 50, (0..40).map(|i| (i, i)).collect()).unwrap();
        let run = |seed| {
            let seg = Recording { seen: Mutex::new(Vec::new()) };
            select_2d_mask(&px, &seg, &img(50, 50), 0, 0, 10, 5, seed).unwrap();
            seg.seen.into_inner().unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    struct Failing;

    impl Segmenter for Failing {
        fn segment(&self, _: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError> {
            Err(SegmenterError::Failed("offline".into()))
        }
        fn describe(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn all_rounds_failing_is_an_error() {
        let px = PixelSet::new(10, 10, vec![(1, 1)]).unwrap();
        let err = select_2d_mask(&px, &Failing, &img(10, 10), 0, 0, 2, 5, 0).unwrap_err();
        assert!(matches!(err, Mask2dError::AllRoundsFailed { rounds: 2, .. }));
    }

    #[test]
    fn wrong_size_output_counts_as_failure() {
        let px = PixelSet::new(10, 10, vec![(1, 1)]).unwrap();
        let seg = FixedMaskSegmenter { mask: Mask2D::from_pixels(5, 5, &[(1, 1)], 1.0).unwrap() };
        assert!(select_2d_mask(&px, &seg, &img(10, 10), 0, 0, 1, 5, 0).is_err());
    }

    #[test]
    fn fixed_mask_oracle_scores_prompt_fraction() {
        let mask = Mask2D::from_pixels(10, 10, &[(1, 1), (2, 2)], 1.0).unwrap();
        let seg = FixedMaskSegmenter { mask };
        let req = SegmentRequest { image: &img(10, 10), frame_index: 0, mask_id: 0, round: 0, prompts: &[(1, 1), (5, 5)] };
        assert_eq!(seg.segment(&req).unwrap().score, 0.5);
    }

    #[test]
    fn tight_bbox_examples() {
        let px = PixelSet::new(100, 100, vec![(10, 20), (30, 40)]).unwrap();
        assert_eq!(tight_bbox(&px).unwrap(), bx(10, 20, 30, 40, 1));
        let single = PixelSet::new(100, 100, vec![(5, 5)]).unwrap();
        assert_eq!(tight_bbox(&single).unwrap(), bx(5, 5, 6, 6, 1));
        let corner = PixelSet::new(100, 100, vec![(99, 99)]).unwrap();
        assert_eq!(tight_bbox(&corner).unwrap(), bx(98, 98, 99, 99, 1));
        let full = Mask2D::new(8, 6, vec![true; 48], 1.0).unwrap();
        assert_eq!(tight_bbox(&full).unwrap(), bx(0, 0, 7, 5, 1));
        assert!(tight_bbox(&Mask2D::empty(8, 6)).is_err());
    }

    #[test]
    fn multiscale_examples() {
        let crops = multiscale_crops(bx(10, 20, 30, 40, 1), 3, 0.2, 100, 100);
        assert_eq!(crops, vec![bx(10, 20, 30, 40, 1), bx(2, 12, 38, 48, 2), bx(0, 8, 42, 52, 3)]);
        let corner = multiscale_crops(bx(0, 0, 10, 10, 1), 3, 0.2, 100, 100);
        assert_eq!((corner[1].x1, corner[1].y1, corner[2].x1, corner[2].y1), (0, 0, 0, 0));
        assert_eq!((corner[1].x2, corner[2].x2), (14, 16));
        let flat = multiscale_crops(bx(3, 4, 9, 9, 1), 3, 0.0, 20, 20);
        assert!(flat.iter().all(|b| (b.x1, b.y1, b.x2, b.y2) == (3, 4, 9, 9)));
        assert_eq!(multiscale_crops(bx(3, 4, 9, 9, 1), 1, 0.2, 20, 20).len(), 1);
    }

    #[test]
    fn crop_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("crops.jsonl");
        let recs = vec![
            CropRecord::new(0, 10, &bx(1, 2, 3, 4, 1), Path::new("color/10.jpg")),
            CropRecord::new(0, 10, &bx(0, 0, 5, 6, 2), Path::new("color/10.jpg")),
        ];
        write_crop_manifest(&p, &recs).unwrap();
        assert_eq!(read_crop_manifest(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"image_path\":\"color/10.jpg\""));
    }

    #[test]
    fn seeds_differ_per_pair() {
        let a = derive_seed(42, 0, 1);
        assert_eq!(a, derive_seed(42, 0, 1));
        assert_ne!(a, derive_seed(42, 1, 0));
        assert_ne!(a, derive_seed(43, 0, 1));
    }
}
