use std::path::Path;

use maskfeat3d::features::{load_store, EmbeddingProvider, FeatureStatus};
use maskfeat3d::pipeline::{run_pipeline, PipelineConfig, PipelineError};
use maskfeat3d::query::{assign_classes, rank_instances, LabelEmbeddingTable, DEFAULT_TEMPLATE};
use maskfeat3d::synthetic::{generate, write_fixture, SyntheticConfig, SyntheticProvider};

fn config_text(extra_features: &str) -> String {
    format!(
        r#"
workers = 2

[scene]
layout = "synthetic0/layout.toml"

[proposals]
path = "synthetic0/proposals.npy"

[features]
master_seed = 7
{extra_features}

[models]
segmenter = "synthetic"
provider = "synthetic"

[output]
store = "out/features.npy"
cache_dir = "out/cache"
"#
    )
}

fn setup(dir: &Path, extra: &str) -> (maskfeat3d::synthetic::Fixture, PipelineConfig) {
    let fixture = generate(&SyntheticConfig::default()).unwrap();
    write_fixture(&fixture, dir).unwrap();
    let cfg_path = dir.join("pipeline.toml");
    std::fs::write(&cfg_path, config_text(extra)).unwrap();
    (fixture, PipelineConfig::from_file(&cfg_path).unwrap())
}

#[test]
fn fixture_run_retrieves_every_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (fixture, config) = setup(dir.path(), "");
    let out = run_pipeline(&config).unwrap();
    assert!(out.cache_hits.is_empty());
    assert_eq!(out.store.len(), fixture.num_objects());
    assert_eq!(out.store.num_featureless(), 0);

    let scene = maskfeat3d::pipeline::load_config_scene(&config).unwrap();
    let provider = SyntheticProvider::new(maskfeat3d::synthetic::SyntheticAssets::load(&config.scene_root(), &scene).unwrap());
    for (k, label) in fixture.object_labels.iter().enumerate() {
        let q = provider.embed_text(&[format!("a {label} in a scene")]).unwrap().remove(0);
        let ranking = rank_instances(&out.store, &q, Some(1)).unwrap();
        assert_eq!(ranking[0].mask_id, k, "query {label:?}");
    }
    let table = LabelEmbeddingTable::from_provider(&provider, &fixture.vocabulary, DEFAULT_TEMPLATE).unwrap();
    let labels: Vec<String> = assign_classes(&out.store, &table).unwrap().into_iter().map(|a| a.label).collect();
    assert_eq!(labels, fixture.object_labels);

    let loaded = load_store(&out.store_path).unwrap();
    assert_eq!(loaded, out.store);
    assert!(loaded.records.iter().all(|r| r.status == FeatureStatus::Valid));
}

#[test]
fn second_run_hits_the_cache_and_matches() {
    let dir = tempfile::tempdir().unwrap();
    let (_, config) = setup(dir.path(), "");
    let first = run_pipeline(&config).unwrap();
    let second = run_pipeline(&config).unwrap();
    assert_eq!(second.cache_hits, vec!["visibility".to_string(), "plan".to_string()]);
    assert_eq!(first.store, second.store);

    let mut changed = config.clone();
    changed.features.k_view = Some(1);
    let third = run_pipeline(&changed).unwrap();
    assert_eq!(third.cache_hits, vec!["visibility".to_string()]);
}

#[test]
fn missing_proposals_map_to_input_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut config) = setup(dir.path(), "");
    config.proposals.path = dir.path().join("nope.npy");
    let err = run_pipeline(&config).unwrap_err();
    assert!(matches!(err, PipelineError::Proposals(_)));
    assert_eq!(err.exit_code(), 3);
}
