use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use maskfeat3d::features::{EmbeddingProvider, ProviderError};
use maskfeat3d::mask2d::{CropRecord, Mask2D, SegmentRequest, Segmenter};
use maskfeat3d::pipeline::{load_config_scene, run_pipeline, PipelineConfig};
use maskfeat3d::query::cosine_similarity;
use maskfeat3d::scene::ColorImageRef;
use maskfeat3d::sidecar::{serve_until, RequestHandler, SegmentItem, SidecarClient, SidecarEmbeddingProvider, SidecarSegmenter};
use maskfeat3d::synthetic::{generate, write_fixture, LabelImageSegmenter, SyntheticAssets, SyntheticConfig, SyntheticProvider};

const POLL: Duration = Duration::from_millis(2);

/// Stub sidecar answering with the synthetic models.
struct Bridge {
    provider: SyntheticProvider,
    segmenter: LabelImageSegmenter,
}

impl RequestHandler for Bridge {
    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, String> {
        self.provider.embed_crops(crops).map_err(|e| e.to_string())
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        self.provider.embed_text(texts).map_err(|e| e.to_string())
    }

    fn segment(&self, item: &SegmentItem) -> Result<Mask2D, String> {
        let image = ColorImageRef { path: item.image_path.clone(), width: item.width, height: item.height };
        let req = SegmentRequest { image: &image, frame_index: item.frame_index, mask_id: item.mask_id, round: item.round, prompts: &item.prompts };
        self.segmenter.segment(&req).map_err(|e| e.to_string())
    }
}

/// Text encoder keyed on the string bytes; fails on "boom".
struct Hashing;

impl RequestHandler for Hashing {
    fn embed_crops(&self, crops: &[CropRecord]) -> Result<Vec<Vec<f32>>, String> {
        Ok(crops.iter().map(|c| vec![c.x1 as f32, c.y1 as f32, c.x2 as f32, c.y2 as f32 + 1.0]).collect())
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        if texts.iter().any(|t| t == "boom") {
            return Err("encoder exploded".into());
        }
        Ok(texts
            .iter()
            .map(|t| {
                let b = t.as_bytes();
                vec![b.len() as f32, b[0] as f32, *b.last().unwrap() as f32, 1.0]
            })
            .collect())
    }

    fn segment(&self, _: &SegmentItem) -> Result<Mask2D, String> {
        Err("no segmenter".into())
    }
}

fn with_responder<H: RequestHandler + Sync, T>(dir: &Path, handler: &H, body: impl FnOnce(SidecarClient) -> T) -> T {
    let (req, resp) = (dir.join("req"), dir.join("resp"));
    let client = SidecarClient::new(&req, &resp).unwrap().with_timeout(Duration::from_secs(30), POLL);
    let stop = AtomicBool::new(false);
    std::thread::scope(|s| {
        let server = s.spawn(|| serve_until(&req, &resp, handler, &stop, POLL).unwrap());
        let out = body(client);
        stop.store(true, Ordering::Relaxed);
        server.join().unwrap();
        out
    })
}

#[test]
fn text_rows_keep_request_order() {
    let dir = tempfile::tempdir().unwrap();
    with_responder(dir.path(), &Hashing, |client| {
        let p = SidecarEmbeddingProvider::new(client, 4, "hash");
        let texts: Vec<String> = ["chair", "table", "chair", "a"].iter().map(|s| s.to_string()).collect();
        let rows = p.embed_text(&texts).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.len() == 4));
        assert_eq!(rows[0], rows[2]);
        assert_ne!(rows[0], rows[1]);
        assert_eq!(rows[3], vec![1.0, 97.0, 97.0, 1.0]);
        assert!(p.embed_text(&[]).unwrap().is_empty());
    });
}

#[test]
fn duplicate_crops_embed_identically() {
    let dir = tempfile::tempdir().unwrap();
    with_responder(dir.path(), &Hashing, |client| {
        let p = SidecarEmbeddingProvider::new(client, 4, "hash");
        let crop = |x1, y1| CropRecord { mask_id: 0, frame_index: 0, level: 1, x1, y1, x2: x1 + 5, y2: y1 + 7, image_path: "c.png".into() };
        let rows = p.embed_crops(&[crop(1, 2), crop(3, 4), crop(1, 2)]).unwrap();
        assert_eq!(cosine_similarity(&rows[0], &rows[2]).unwrap(), 1.0);
        assert!(cosine_similarity(&rows[0], &rows[1]).unwrap() < 1.0);
        assert_eq!(rows[1], vec![3.0, 4.0, 8.0, 12.0]);
    });
}

#[test]
fn remote_failures_and_bad_dims_surface_as_provider_errors() {
    let dir = tempfile::tempdir().unwrap();
    with_responder(dir.path(), &Hashing, |client| {
        let p = SidecarEmbeddingProvider::new(client.clone(), 4, "hash");
        let err = p.embed_text(&["ok".into(), "boom".into()]).unwrap_err();
        assert!(matches!(err, ProviderError::Failed(ref m) if m.contains("encoder exploded")), "{err}");
        let wrong = SidecarEmbeddingProvider::new(client.clone(), 7, "hash");
        assert!(wrong.embed_text(&["x".into()]).is_err());
        let seg = SidecarSegmenter::new(client, "none");
        let image = ColorImageRef { path: "x.png".into(), width: 4, height: 4 };
        let req = SegmentRequest { image: &image, frame_index: 0, mask_id: 0, round: 0, prompts: &[(1, 1)] };
        assert!(seg.segment(&req).is_err());
    });
}

#[test]
fn unanswered_requests_time_out_and_are_withdrawn() {
    let dir = tempfile::tempdir().unwrap();
    let (req, resp) = (dir.path().join("req"), dir.path().join("resp"));
    let client = SidecarClient::new(&req, &resp).unwrap().with_timeout(Duration::from_millis(50), POLL);
    let p = SidecarEmbeddingProvider::new(client, 4, "hash");
    let err = p.embed_text(&["chair".into()]).unwrap_err();
    assert!(err.to_string().contains("no response"), "{err}");
    assert_eq!(std::fs::read_dir(&req).unwrap().count(), 0);
}

#[test]
fn pipeline_through_the_sidecar_matches_in_process_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fixture = generate(&SyntheticConfig { num_objects: 3, num_frames: 8, ..Default::default() }).unwrap();
    write_fixture(&fixture, d).unwrap();
    let base = r#"
[scene]
layout = "synthetic0/layout.toml"

[proposals]
path = "synthetic0/proposals.npy"
"#;
    let local = format!("{base}\n[models]\nsegmenter = \"synthetic\"\nprovider = \"synthetic\"\n\n[output]\nstore = \"local.npy\"\n");
    let remote = format!(
        "{base}\n[models]\nsegmenter = \"sidecar\"\nprovider = \"sidecar\"\n\n[models.sidecar]\nrequest_dir = \"req\"\nresponse_dir = \"resp\"\nembedding_dim = {}\n\n[output]\nstore = \"remote.npy\"\n",
        fixture.vocabulary.len() + 1
    );
    std::fs::write(d.join("local.toml"), local).unwrap();
    std::fs::write(d.join("remote.toml"), remote).unwrap();
    let local = PipelineConfig::from_file(&d.join("local.toml")).unwrap();
    let remote = PipelineConfig::from_file(&d.join("remote.toml")).unwrap();

    let expected = run_pipeline(&local).unwrap().store;
    let scene = load_config_scene(&local).unwrap();
    let assets = SyntheticAssets::load(&local.scene_root(), &scene).unwrap();
    let bridge = Bridge { provider: SyntheticProvider::new(assets.clone()), segmenter: LabelImageSegmenter { assets } };
    let stop = AtomicBool::new(false);
    let (req, resp) = (d.join("req"), d.join("resp"));
    std::fs::create_dir_all(&req).unwrap();
    std::fs::create_dir_all(&resp).unwrap();
    let got = std::thread::scope(|s| {
        let server = s.spawn(|| serve_until(&req, &resp, &bridge, &stop, POLL).unwrap());
        let out = run_pipeline(&remote);
        stop.store(true, Ordering::Relaxed);
        assert!(server.join().unwrap() > 0);
        out.unwrap().store
    });
    assert_eq!(got.feature_matrix(), expected.feature_matrix());
    let plans = |s: &maskfeat3d::features::MaskFeatureStore| s.records.iter().map(|r| r.plan.clone()).collect::<Vec<_>>();
    assert_eq!(plans(&got), plans(&expected));
    assert!(got.snapshot.provider.starts_with("sidecar:"));
    // nothing left behind in the exchange directories
    assert_eq!(std::fs::read_dir(&req).unwrap().count(), 0);
    assert_eq!(std::fs::read_dir(&resp).unwrap().count(), 0);
}
