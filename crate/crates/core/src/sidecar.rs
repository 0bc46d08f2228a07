//! Client side of the file-based batch protocol spoken by the inference
//! sidecar.
//!
//! A request is a JSON manifest `{id, kind, dim, items}` placed in the
//! request directory (written to a temporary name, then renamed). The sidecar
//! answers with `<id>.json` in the response directory:
//! `{id, status, payload_path, masks, errors}`. Embedding payloads are
//! float32 `.npy` matrices with one row per item; segmentation payloads are
//! 8-bit PNG masks (nonzero = inside) with a score per item.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{read_json, write_json, FormatError};
use crate::features::{check_rows, EmbeddingProvider, ProviderError};
use crate::mask2d::{CropRecord, Mask2D, Pixel, SegmentRequest, Segmenter, SegmenterError};
use crate::npy::{read_npy, write_npy, Matrix};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("no response to request {id} within {timeout:?}")]
    Timeout { id: String, timeout: Duration },
    #[error("sidecar reported failure for request {id}: {message}")]
    Remote { id: String, message: String },
    #[error("malformed response to request {id}: {message}")]
    Protocol { id: String, message: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    EmbedCrops,
    EmbedText,
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentItem {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub frame_index: usize,
    pub mask_id: usize,
    pub round: usize,
    /// `(col, row)` prompt points.
    pub prompts: Vec<Pixel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RequestItems {
    Crops(Vec<CropRecord>),
    Texts(Vec<String>),
    Segments(Vec<SegmentItem>),
}

impl RequestItems {
    pub fn len(&self) -> usize {
        match self {
            Self::Crops(v) => v.len(),
            Self::Texts(v) => v.len(),
            Self::Segments(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub id: String,
    pub kind: RequestKind,
    /// Expected embedding dimensionality (embedding requests only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub items: RequestItems,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResult {
    /// PNG path, relative to the response directory.
    pub path: PathBuf,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub item: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub id: String,
    pub status: ResponseStatus,
    /// Embedding matrix, relative to the response directory.
    #[serde(default)]
    pub payload_path: Option<PathBuf>,
    #[serde(default)]
    pub masks: Vec<Option<MaskResult>>,
    #[serde(default)]
    pub errors: Vec<ItemError>,
    #[serde(default)]
    pub message: Option<String>,
}

/// Writes `value` as JSON to a temporary sibling, then renames it into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, value)?;
    std::fs::rename(&tmp, path).map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SidecarClient {
    request_dir: PathBuf,
    response_dir: PathBuf,
    timeout: Duration,
    poll: Duration,
    counter: std::sync::Arc<AtomicU64>,
}

impl SidecarClient {
    pub fn new(request_dir: &Path, response_dir: &Path) -> Result<Self, FormatError> {
        for d in [request_dir, response_dir] {
            std::fs::create_dir_all(d).map_err(|e| FormatError::io(d, e))?;
        }
        Ok(Self {
            request_dir: request_dir.to_path_buf(),
            response_dir: response_dir.to_path_buf(),
            timeout: DEFAULT_TIMEOUT,
            poll: DEFAULT_POLL_INTERVAL,
            counter: Default::default(),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration, poll: Duration) -> Self {
        self.timeout = timeout;
        self.poll = poll;
        self
    }

    pub fn response_dir(&self) -> &Path {
        &self.response_dir
    }

    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
        format!("{}-{nanos}-{n}", std::process::id())
    }

    /// Submits a request and blocks until its response arrives or the timeout
    /// expires. The response manifest is removed once read.
    pub fn call(&self, kind: RequestKind, dim: Option<usize>, items: RequestItems) -> Result<BatchResponse, SidecarError> {
        let id = self.next_id();
        let request = BatchRequest { id: id.clone(), kind, dim, items };
        write_json_atomic(&self.request_dir.join(format!("{id}.json")), &request)?;
        let response_path = self.response_dir.join(format!("{id}.json"));
        let start = Instant::now();
        while !response_path.exists() {
            if start.elapsed() > self.timeout {
                // withdraw the request if nobody claimed it yet
                let _ = std::fs::remove_file(self.request_dir.join(format!("{id}.json")));
                return Err(SidecarError::Timeout { id, timeout: self.timeout });
            }
            std::thread::sleep(self.poll);
        }
        let response: BatchResponse = read_json(&response_path)?;
        let _ = std::fs::remove_file(&response_path);
        if response.id != id {
            return Err(SidecarError::Protocol { id, message: format!("response carries id {}", response.id) });
        }
        if response.status == ResponseStatus::Error || !response.errors.is_empty() {
            let mut message = response.message.clone().unwrap_or_default();
            for e in &response.errors {
                message.push_str(&format!("; item {}: {}", e.item, e.message));
            }
            return Err(SidecarError::Remote { id, message: message.trim_start_matches("; ").to_string() });
        }
        Ok(response)
    }

    fn read_matrix(&self, response: &BatchResponse) -> Result<Matrix<f32>, SidecarError> {
        let rel = response
            .payload_path
            .as_ref()
            .ok_or_else(|| SidecarError::Protocol { id: response.id.clone(), message: "no payload_path".into() })?;
        let path = self.response_dir.join(rel);
        let m = read_npy(&path)?;
        let _ = std::fs::remove_file(&path);
        Ok(m)
    }
}

/// Embedding provider backed by the sidecar's image/text encoders.
#[derive(Debug, Clone)]
pub struct SidecarEmbeddingProvider {
    client: SidecarClient,
    dim: usize,
    model: String,
}

impl SidecarEmbeddingProvider {
    pub fn new(client: SidecarClient, dim: usize, model: &str) -> Self {
        Self { client, dim, model: model.into() }
    }

    fn embed(&self, kind: RequestKind, items: RequestItems) -> Result<Vec<Vec<f32>>, ProviderError> {
        let n = items.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let fail = |e: SidecarError| ProviderError::Failed(e.to_string());
        let response = self.client.call(kind, Some(self.dim), items).map_err(fail)?;
        let m = self.client.read_matrix(&response).map_err(fail)?;
        let rows: Vec<Vec<f32>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        check_rows(&rows, n, self.dim)?;
        Ok(rows)
    }
}

impl EmbeddingProvider for SidecarEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.embed(RequestKind::EmbedCrops, RequestItems::Crops(crops.to_vec()))
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.embed(RequestKind::EmbedText, RequestItems::Texts(texts.to_vec()))
    }

    fn describe(&self) -> String {
        format!("sidecar:{}:D={}", self.model, self.dim)
    }
}

/// Reads an 8-bit mask PNG; any nonzero pixel is inside.
pub fn read_mask_png(path: &Path, score: f32) -> Result<Mask2D, SegmenterError> {
    let img = image::open(path).map_err(|e| SegmenterError::InvalidOutput(format!("{}: {e}", path.display())))?.to_luma8();
    let (w, h) = img.dimensions();
    Mask2D::new(w, h, img.into_raw().into_iter().map(|v| v != 0).collect(), score)
}

pub fn write_mask_png(path: &Path, mask: &Mask2D) -> Result<(), FormatError> {
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width(), mask.height(), data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| FormatError::Parse(format!("{}: {e}", path.display())))
}

/// Promptable segmenter backed by the sidecar.
#[derive(Debug, Clone)]
pub struct SidecarSegmenter {
    client: SidecarClient,
    model: String,
}

impl SidecarSegmenter {
    pub fn new(client: SidecarClient, model: &str) -> Self {
        Self { client, model: model.into() }
    }
}

impl Segmenter for SidecarSegmenter {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<Mask2D, SegmenterError> {
        let item = SegmentItem {
            image_path: request.image.path.clone(),
            width: request.image.width,
            height: request.image.height,
            frame_index: request.frame_index,
            mask_id: request.mask_id,
            round: request.round,
            prompts: request.prompts.to_vec(),
        };
        let response = self
            .client
            .call(RequestKind::Segment, None, RequestItems::Segments(vec![item]))
            .map_err(|e| SegmenterError::Failed(e.to_string()))?;
        let result = response
            .masks
            .first()
            .cloned()
            .flatten()
            .ok_or_else(|| SegmenterError::InvalidOutput("response holds no mask".into()))?;
        let path = self.client.response_dir.join(&result.path);
        let mask = read_mask_png(&path, result.score)?;
        let _ = std::fs::remove_file(&path);
        if (mask.width(), mask.height()) != (request.image.width, request.image.height) {
            return Err(SegmenterError::InvalidOutput(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                request.image.width,
                request.image.height
            )));
        }
        Ok(mask)
    }

    fn describe(&self) -> String {
        format!("sidecar:{}", self.model)
    }
}

/// Model side of the protocol, used by stub responders.
pub trait RequestHandler {
    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, String>;
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String>;
    fn segment(&self, item: &SegmentItem) -> Result<Mask2D, String>;
}

/// Answers every request currently in `request_dir`, claiming each by
/// renaming it first so that it is processed at most once. Returns the
/// number of requests answered.
pub fn serve_pending(request_dir: &Path, response_dir: &Path, handler: &dyn RequestHandler) -> Result<usize, FormatError> {
    let mut pending: Vec<PathBuf> = std::fs::read_dir(request_dir)
        .map_err(|e| FormatError::io(request_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    pending.sort();
    let mut served = 0;
    for path in pending {
        let claimed = path.with_extension("claimed");
        if std::fs::rename(&path, &claimed).is_err() {
            continue;
        }
        let request: BatchRequest = read_json(&claimed)?;
        let response = answer(&request, response_dir, handler)?;
        write_json_atomic(&response_dir.join(format!("{}.json", request.id)), &response)?;
        let _ = std::fs::remove_file(&claimed);
        served += 1;
    }
    Ok(served)
}

fn answer(request: &BatchRequest, response_dir: &Path, handler: &dyn RequestHandler) -> Result<BatchResponse, FormatError> {
    let mut response = BatchResponse {
        id: request.id.clone(),
        status: ResponseStatus::Ok,
        payload_path: None,
        masks: Vec::new(),
        errors: Vec::new(),
        message: None,
    };
    let rows = match (&request.kind, &request.items) {
        (RequestKind::EmbedCrops, RequestItems::Crops(c)) => Some(handler.embed_crops(c)),
        (RequestKind::EmbedText, RequestItems::Texts(t)) => Some(handler.embed_text(t)),
        (RequestKind::Segment, RequestItems::Segments(items)) => {
            for (i, item) in items.iter().enumerate() {
                match handler.segment(item) {
                    Ok(mask) => {
                        let name = PathBuf::from(format!("{}.{i}.png", request.id));
                        write_mask_png(&response_dir.join(&name), &mask)?;
                        response.masks.push(Some(MaskResult { path: name, score: mask.score }));
                    }
                    Err(message) => {
                        response.masks.push(None);
                        response.errors.push(ItemError { item: i, message });
                    }
                }
            }
            None
        }
        // an empty item list deserializes as the first variant
        (_, items) if items.is_empty() => Some(Ok(Vec::new())),
        _ => {
            response.status = ResponseStatus::Error;
            response.message = Some("items do not match the request kind".into());
            None
        }
    };
    match rows {
        Some(Ok(rows)) => {
            let dim = request.dim.or(rows.first().map(Vec::len)).unwrap_or(0);
            match Matrix::from_rows(&rows, dim) {
                Ok(m) => {
                    let name = PathBuf::from(format!("{}.npy", request.id));
                    write_npy(&response_dir.join(&name), &m)?;
                    response.payload_path = Some(name);
                }
                Err(e) => {
                    response.status = ResponseStatus::Error;
                    response.message = Some(e.to_string());
                }
            }
        }
        Some(Err(message)) => {
            response.status = ResponseStatus::Error;
            response.message = Some(message);
        }
        None => {}
    }
    Ok(response)
}

/// Runs [`serve_pending`] in a loop until `stop` is set.
pub fn serve_until(
    request_dir: &Path,
    response_dir: &Path,
    handler: &dyn RequestHandler,
    stop: &std::sync::atomic::AtomicBool,
    poll: Duration,
) -> Result<usize, FormatError> {
    let mut total = 0;
    while !stop.load(Ordering::Relaxed) {
        let n = serve_pending(request_dir, response_dir, handler)?;
        total += n;
        if n == 0 {
            std::thread::sleep(poll);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_json_shape() {
        let r = BatchRequest { id: "x".into(), kind: RequestKind::EmbedText, dim: Some(4), items: RequestItems::Texts(vec!["a".into()]) };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["kind"], "embed_text");
        assert_eq!(v["items"][0], "a");
        let back: BatchRequest = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn segment_items_roundtrip() {
        let item = SegmentItem {
            image_path: "c/1.jpg".into(),
            width: 8,
            height: 6,
            frame_index: 1,
            mask_id: 2,
            round: 0,
            prompts: vec![(1, 2), (3, 4)],
        };
        let r = BatchRequest { id: "y".into(), kind: RequestKind::Segment, dim: None, items: RequestItems::Segments(vec![item]) };
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<BatchRequest>(&text).unwrap(), r);
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask2D::from_pixels(5, 4, &[(0, 0), (4, 3), (2, 1)], 0.5).unwrap();
        let p = dir.path().join("m.png");
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask_png(&p, 0.5).unwrap(), m);
    }
}
