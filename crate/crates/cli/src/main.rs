use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use maskfeat3d::eval::{self, evaluate_ap, read_labeled_masks, SceneEval};
use maskfeat3d::features::{load_store, EmbeddingProvider, MaskFeatureStore, PrecomputedProvider};
use maskfeat3d::npy::{read_npy, Matrix};
use maskfeat3d::pipeline::{self, parse_override, run_pipeline, PipelineConfig, PipelineError};
use maskfeat3d::ply::read_point_cloud;
use maskfeat3d::proposals::{self, ingest_proposals, split_all, write_mask_set, InstanceMaskSet};
use maskfeat3d::query::{self, apply_template, assign_classes, rank_instances, LabelEmbeddingTable, DEFAULT_TEMPLATE};
use maskfeat3d::synthetic::{self, SyntheticConfig};

#[derive(Parser)]
#[command(name = "maskfeat3d", version, about = "Open-vocabulary features for 3D instance masks")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides features.master_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline for the scene in --config.
    Run,
    /// Rank the masks of a store against a text query.
    Query(QueryArgs),
    /// Color a point cloud by similarity to a text query.
    ExportHeatmap(HeatmapArgs),
    /// Label every mask of a store with its closest vocabulary entry.
    Classify(ClassifyArgs),
    /// Compute AP / AP50 / AP25 and subset means against ground truth.
    Evaluate(EvaluateArgs),
    /// Split proposals into spatially connected masks.
    SplitProposals(SplitArgs),
    /// Write a synthetic fixture scene and a config that runs on it.
    MakeFixture(FixtureArgs),
}

#[derive(Args)]
struct TextSource {
    /// Precomputed text embedding: a 1-row matrix, or a matrix with a
    /// manifest listing its texts.
    #[arg(long)]
    text_embedding: Option<PathBuf>,
    /// Wrap the query in a prompt template such as "a {} in a scene".
    #[arg(long)]
    template: Option<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    top_n: Option<usize>,
    /// Also write a similarity-colored point cloud.
    #[arg(long)]
    export_ply: Option<PathBuf>,
    #[command(flatten)]
    source: TextSource,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    output: PathBuf,
    /// Color only the n best masks.
    #[arg(long)]
    top_n: Option<usize>,
    #[command(flatten)]
    source: TextSource,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    store: PathBuf,
    /// Vocabulary: JSON array or one label per line.
    #[arg(long, required_unless_present = "label_embeddings")]
    labels: Option<PathBuf>,
    /// Saved label embedding table (`.json` with a matching `.npy`).
    #[arg(long)]
    label_embeddings: Option<PathBuf>,
    /// Save the embedded vocabulary for reuse.
    #[arg(long)]
    save_label_embeddings: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
    /// Prediction mask file (labels and confidences in its manifest).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction files, one per scene.
    #[arg(long = "pred", required = true)]
    predictions: Vec<PathBuf>,
    /// Ground-truth files, in the same scene order.
    #[arg(long = "gt", required = true)]
    ground_truth: Vec<PathBuf>,
    /// Class list (JSON array or one per line); defaults to the GT labels.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Label → subset map (JSON).
    #[arg(long, conflicts_with = "scannet200")]
    subsets: Option<PathBuf>,
    /// Use the bundled ScanNet200 head/common/tail map.
    #[arg(long)]
    scannet200: bool,
    /// Write the report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    proposals: PathBuf,
    /// Scene point cloud (PLY).
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = proposals::DEFAULT_DBSCAN_EPS)]
    eps: f64,
    #[arg(long, default_value_t = proposals::DEFAULT_DBSCAN_MIN_POINTS)]
    min_points: usize,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    fixture_seed: u64,
    #[arg(long, default_value_t = 5)]
    objects: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value = "synthetic0")]
    scene_id: String,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let mut overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("features.master_seed".into(), seed.to_string()));
    }
    if let Some(w) = cli.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    Ok(PipelineConfig::from_file_with_overrides(path, &overrides)?)
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Provider for text embeddings: a precomputed file, or the models in --config.
fn text_provider(cli: &Cli, source: &TextSource) -> Result<Box<dyn EmbeddingProvider>> {
    if let Some(path) = &source.text_embedding {
        if path.with_extension("json").exists() {
            return Ok(Box::new(PrecomputedProvider::load(path)?));
        }
        bail!("{}: a text vocabulary needs an embedding file with a manifest", path.display());
    }
    let config = load_config(cli).context("text queries need --text-embedding or --config")?;
    let scene = pipeline::load_config_scene(&config)?;
    Ok(pipeline::build_models(&config, &scene)?.provider)
}

fn embed_query(cli: &Cli, source: &TextSource, text: &str) -> Result<Vec<f32>> {
    if let Some(path) = &source.text_embedding {
        if !path.with_extension("json").exists() {
            let m: Matrix<f32> = read_npy(path)?;
            if m.rows() != 1 {
                bail!("{}: expected a single embedding row, found {}", path.display(), m.rows());
            }
            return Ok(m.row(0).to_vec());
        }
    }
    let provider = text_provider(cli, source)?;
    let prompt = match &source.template {
        Some(t) => apply_template(t, text),
        None => text.to_string(),
    };
    let rows = provider.embed_text(&[prompt])?;
    rows.into_iter().next().context("provider returned no rows")
}

fn store_masks(store_path: &Path, store: &MaskFeatureStore) -> Result<InstanceMaskSet> {
    let rel = store.masks_file.as_ref().context("store does not record its mask file")?;
    let path = MaskFeatureStore::resolve(store_path, rel);
    let n = maskfeat3d::proposals::read_mask_file(&path)?.manifest.n;
    Ok(ingest_proposals(&path, &store.scene_id, n)?)
}

fn export_heatmap(store_path: &Path, store: &MaskFeatureStore, ranking: &[query::RankedMask], output: &Path) -> Result<()> {
    let cloud_path = store.point_cloud.as_ref().context("store does not record its point cloud")?;
    let cloud = read_point_cloud(&MaskFeatureStore::resolve(store_path, cloud_path))?;
    let masks = store_masks(store_path, store)?;
    query::export_similarity_ply(output, &cloud, &masks, ranking)?;
    log::info!("wrote {}", output.display());
    Ok(())
}

fn cmd_query(cli: &Cli, args: &QueryArgs) -> Result<()> {
    let store = load_store(&args.store)?;
    let q = embed_query(cli, &args.source, &args.text)?;
    let ranking = rank_instances(&store, &q, args.top_n)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&ranking)?);
    } else {
        println!("{:>4}  {:>7}  {:>10}", "rank", "mask", "similarity");
        for (i, r) in ranking.iter().enumerate() {
            println!("{:>4}  {:>7}  {:>10.4}", i + 1, r.mask_id, r.similarity);
        }
    }
    if let Some(out) = &args.export_ply {
        export_heatmap(&args.store, &store, &ranking, out)?;
    }
    Ok(())
}

fn cmd_heatmap(cli: &Cli, args: &HeatmapArgs) -> Result<()> {
    let store = load_store(&args.store)?;
    let q = embed_query(cli, &args.source, &args.text)?;
    let ranking = rank_instances(&store, &q, args.top_n)?;
    export_heatmap(&args.store, &store, &ranking, &args.output)
}

fn cmd_classify(cli: &Cli, args: &ClassifyArgs) -> Result<()> {
    let store = load_store(&args.store)?;
    let table = match (&args.label_embeddings, &args.labels) {
        (Some(path), _) => LabelEmbeddingTable::load(path)?,
        (None, Some(labels)) => {
            let labels = read_list(labels)?;
            let provider = text_provider(cli, &TextSource { text_embedding: None, template: None })?;
            LabelEmbeddingTable::from_provider(provider.as_ref(), &labels, &args.template)?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    if let Some(path) = &args.save_label_embeddings {
        table.save(path)?;
    }
    let assignments = assign_classes(&store, &table)?;
    let masks = store_masks(&args.store, &store)?;
    let predictions = eval::predictions_from_assignments(&masks, &assignments)?;
    let set = InstanceMaskSet::new(store.scene_id.clone(), masks.num_points, predictions.iter().map(|p| p.mask.clone()).collect())?;
    let labels = predictions.iter().map(|p| p.label.clone()).collect();
    let confidences = predictions.iter().map(|p| p.confidence).collect();
    write_mask_set(&args.output, &set, Some(labels), Some(confidences))?;
    let unassigned = assignments.len() - predictions.len();
    println!("labeled {} mask(s), {unassigned} unassigned → {}", predictions.len(), args.output.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.predictions.len() != args.ground_truth.len() {
        bail!("{} prediction files for {} ground-truth files", args.predictions.len(), args.ground_truth.len());
    }
    let mut scenes = Vec::new();
    for (p, g) in args.predictions.iter().zip(&args.ground_truth) {
        let (scene_id, preds) = read_labeled_masks(p)?;
        let (gt_scene, gts) = read_labeled_masks(g)?;
        if scene_id != gt_scene {
            log::warn!("pairing predictions for {scene_id:?} with ground truth for {gt_scene:?}");
        }
        scenes.push(SceneEval::new(gt_scene, preds, gts)?);
    }
    let classes = match &args.classes {
        Some(p) => read_list(p)?,
        None => {
            let mut c: Vec<String> = scenes.iter().flat_map(|s| s.ground_truth.iter().map(|g| g.label.clone())).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let mut report = evaluate_ap(&scenes, &classes)?;
    let subsets: Option<BTreeMap<String, String>> = match (&args.subsets, args.scannet200) {
        (Some(p), _) => Some(eval::load_subset_map(p)?),
        (None, true) => Some(eval::scannet200_subset_map()),
        (None, false) => None,
    };
    if let Some(map) = subsets {
        report = report.with_subsets(&map)?;
    }
    print!("{}", report.to_table());
    if let Some(out) = &args.output {
        std::fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_split(args: &SplitArgs) -> Result<()> {
    let cloud = read_point_cloud(&args.points)?;
    let scene_id = maskfeat3d::proposals::read_mask_file(&args.proposals)?.manifest.scene_id;
    let raw = ingest_proposals(&args.proposals, &scene_id, cloud.len())?;
    let split = split_all(&raw, &maskfeat3d::scene::PointCloud::new(cloud.points().to_vec(), None)?, args.eps, args.min_points)?;
    write_mask_set(&args.output, &split, None, None)?;
    println!("{} proposals → {} masks → {}", raw.len(), split.len(), args.output.display());
    Ok(())
}

fn cmd_fixture(args: &FixtureArgs) -> Result<()> {
    let config = SyntheticConfig {
        scene_id: args.scene_id.clone(),
        seed: args.fixture_seed,
        num_objects: args.objects,
        num_frames: args.frames,
        ..Default::default()
    };
    let fixture = synthetic::generate(&config)?;
    let paths = synthetic::write_fixture(&fixture, &args.output)?;
    let id = &args.scene_id;
    let text = format!(
        r#"# Synthetic fixture: ground-truth masks as proposals, label-image models.
[scene]
layout = "{id}/layout.toml"

[proposals]
path = "{id}/proposals.npy"

[features]
k_view = 5

[models]
segmenter = "synthetic"
provider = "synthetic"

[output]
store = "out/{id}.features.npy"
cache_dir = "out/cache"
"#
    );
    let cfg = args.output.join("pipeline.toml");
    std::fs::write(&cfg, text)?;
    std::fs::write(args.output.join("classes.json"), serde_json::to_string_pretty(&fixture.vocabulary)?)?;
    println!("fixture {} with objects {:?}", paths.scene_root.display(), fixture.object_labels);
    println!("config  {}", cfg.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run => {
            let config = load_config(cli)?;
            let out = run_pipeline(&config)?;
            println!(
                "{} masks, {} featureless → {}",
                out.store.len(),
                out.store.num_featureless(),
                out.store_path.display()
            );
            Ok(())
        }
        Command::Query(a) => cmd_query(cli, a),
        Command::ExportHeatmap(a) => cmd_heatmap(cli, a),
        Command::Classify(a) => cmd_classify(cli, a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SplitProposals(a) => cmd_split(a),
        Command::MakeFixture(a) => cmd_fixture(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
