//! Command-line surface tying the pipeline together: corpus generation,
//! training, embedding, search, evaluation, benchmarking, and weight-curve
//! export. Every subcommand prints a machine-readable JSON result on stdout
//! and keeps human-facing logs on stderr, so outputs compose in shell
//! pipelines. Given identical inputs and seed, outputs are byte-identical
//! (bench timing fields excepted).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::error::{Result, VvsError};
use crate::eval::{bench_speed, eval_by_duration, mean_average_precision, EmbeddingStore};
use crate::features::{synth_generate_dataset, SynthConfig};
use crate::manifest::{DatasetManifest, Tier};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::{
    load_checkpoint, load_raw_corpus, save_checkpoint, train, whiten_corpus, EmbedTrace, Pipeline,
    PipelineSpec, PipelineToggles, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "vvs",
    version,
    about = "Suppression-weighted video retrieval pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Seed for any randomized stage: the generator seed for synth
    /// (default 0), the training seed override for train.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap worker threads for embedding and search; training runs a single
    /// worker whenever --seed is pinned.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log filter (error, warn, info, debug, trace). The VVS_LOG
    /// environment variable takes precedence when set.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus of frame features.
    Synth(SynthArgs),
    /// Train the suppression pipeline and write the best checkpoint.
    Train(TrainArgs),
    /// Embed every manifest video through a trained checkpoint.
    Embed(EmbedArgs),
    /// Rank the stored database for one or more queries.
    Search(SearchArgs),
    /// Score a store with tiered mean average precision.
    Eval(EvalArgs),
    /// Compare video-level search cost against the frame-level baseline.
    Bench(BenchArgs),
    /// Export per-frame suppression-weight curves as CSV and SVG.
    PlotWeights(PlotWeightsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for manifest.json and features/.
    #[arg(long)]
    pub out: PathBuf,
    /// Total video count, queries and background included.
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    /// How many core videos double as queries.
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    /// Feature channels per region.
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Distinct topics in the corpus.
    #[arg(long, default_value_t = 20)]
    pub topics: usize,
    /// Shortest video, in frames.
    #[arg(long, default_value_t = 30)]
    pub t_min: usize,
    /// Longest video, in frames.
    #[arg(long, default_value_t = 120)]
    pub t_max: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (manifest.json from `synth`, or hand-written).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Optimizer settings as JSON; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Model width preset.
    #[arg(long, value_enum, default_value_t = Widths::Desk)]
    pub widths: Widths,
}

/// Width presets for the three heads: `full` matches the reference sizes,
/// `desk` shrinks hidden layers for CPU-scale corpora.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Widths {
    Full,
    Desk,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest naming the videos to embed.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding store output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip easy-distractor elimination.
    #[arg(long)]
    pub no_ddm: bool,
    /// Skip saliency weighting.
    #[arg(long)]
    pub no_tsm: bool,
    /// Skip topic guidance.
    #[arg(long)]
    pub no_tgm: bool,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Embedding store to query.
    #[arg(long)]
    pub store: PathBuf,
    /// Query video id; repeatable. Defaults to the manifest's query set.
    #[arg(long = "query")]
    pub queries: Vec<String>,
    /// Manifest supplying the query set when --query is not given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Ranked entries to keep per query (everything when omitted).
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Embedding store to score.
    #[arg(long)]
    pub store: PathBuf,
    /// Manifest with relevance labels.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Relevance regime to score.
    #[arg(long, value_enum, default_value_t = TaskArg::All)]
    pub task: TaskArg,
    /// Also score each of this many equal-size duration buckets.
    #[arg(long)]
    pub duration_buckets: Option<usize>,
}

/// Relevance regimes, strictest to loosest; `all` scores every regime.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Dsvr,
    Csvr,
    Isvr,
    All,
}

impl TaskArg {
    fn tiers(self) -> Vec<Tier> {
        match self {
            TaskArg::Dsvr => vec![Tier::Dsvr],
            TaskArg::Csvr => vec![Tier::Csvr],
            TaskArg::Isvr => vec![Tier::Isvr],
            TaskArg::All => vec![Tier::Dsvr, Tier::Csvr, Tier::Isvr],
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained checkpoint (supplies the whitening).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest naming queries and feature files.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding store for the video-level side.
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotWeightsArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for one CSV and one SVG per video.
    #[arg(long)]
    pub out: PathBuf,
    /// Video id to plot; repeatable. Defaults to the manifest's query set.
    #[arg(long = "video")]
    pub videos: Vec<String>,
}

/// Parse arguments, run one subcommand, and map the outcome to an exit
/// code: 0 success, 1 runtime failure, 2 usage or validation error.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global);
    init_threads(&cli);
    match dispatch(&cli.global, cli.command) {
        Ok(value) => match emit(&value) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        },
        Err(e) => fail(&e),
    }
}

fn fail(e: &VvsError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_usage() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn init_logging(global: &GlobalOpts) {
    let env = env_logger::Env::default().filter_or("VVS_LOG", global.log_level.as_str());
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn init_threads(cli: &Cli) {
    let threads = match (&cli.command, cli.global.seed) {
        (Command::Train(_), Some(_)) => Some(1),
        _ => cli.global.threads,
    };
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn dispatch(global: &GlobalOpts, command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Synth(a) => cmd_synth(global, a),
        Command::Train(a) => cmd_train(global, a),
        Command::Embed(a) => cmd_embed(a),
        Command::Search(a) => cmd_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::PlotWeights(a) => cmd_plot_weights(a),
    }
}

fn emit(value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    use std::io::Write as _;
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| VvsError::io("<stdout>", e))
}

fn require_file(what: &'static str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(VvsError::Config(format!(
            "{what} '{}' is not a readable file",
            path.display()
        )))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| VvsError::io(parent.display().to_string(), e))?;
        }
    }
    Ok(())
}

fn cmd_synth(global: &GlobalOpts, a: SynthArgs) -> Result<serde_json::Value> {
    let cfg = SynthConfig {
        videos: a.videos,
        queries: a.queries,
        channels: a.channels,
        topics: a.topics,
        t_min: a.t_min,
        t_max: a.t_max,
        ..SynthConfig::default()
    };
    let seed = global.seed.unwrap_or(0);
    let (manifest, out_dir) = synth_generate_dataset(&cfg, seed, &a.out)?;
    Ok(json!({
        "manifest": out_dir.join("manifest.json"),
        "videos": manifest.videos.len(),
        "queries": manifest.queries.len(),
        "seed": seed,
    }))
}

fn cmd_train(global: &GlobalOpts, a: TrainArgs) -> Result<serde_json::Value> {
    require_file("manifest", &a.manifest)?;
    let mut train_cfg = match &a.config {
        Some(path) => {
            require_file("config", path)?;
            let text = fs::read_to_string(path)
                .map_err(|e| VvsError::io(path.display().to_string(), e))?;
            serde_json::from_str::<TrainConfig>(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = global.seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;

    let (manifest, base) = DatasetManifest::load(&a.manifest)?;
    manifest.validate(&base)?;
    let channels = corpus_channels(&manifest, &base)?;
    let mut spec = match a.widths {
        Widths::Full => PipelineSpec::new(channels),
        Widths::Desk => PipelineSpec::desk(channels),
    };
    spec.train = train_cfg;

    let outcome = train(&spec, &manifest, &base)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&a.out, &outcome.spec, &outcome.set, &outcome.pca)?;
    Ok(json!({
        "checkpoint": a.out,
        "channels": channels,
        "iterations": outcome.reports.len(),
        "best_epoch": outcome.best_epoch,
        "best_validation_map": outcome.best_map,
        "final_loss": outcome.reports.last().map(|r| r.total),
    }))
}

/// Channel width of the first feature file in the manifest; every other
/// file must agree, which `train` verifies when it loads the corpus.
fn corpus_channels(manifest: &DatasetManifest, base: &Path) -> Result<usize> {
    let first = manifest
        .videos
        .first()
        .ok_or_else(|| VvsError::Manifest("manifest lists no videos".into()))?;
    let path = manifest.feature_path(base, &first.id)?;
    let features = crate::io::read_features(&path)?;
    Ok(features.channels())
}

fn cmd_embed(a: EmbedArgs) -> Result<serde_json::Value> {
    require_file("checkpoint", &a.ckpt)?;
    require_file("manifest", &a.manifest)?;
    let (set, pca, pipeline) = load_checkpoint(&a.ckpt)?;
    let (manifest, base) = DatasetManifest::load(&a.manifest)?;
    let raw = load_raw_corpus(&manifest, &base)?;
    let whitened = whiten_corpus(&pca, &raw)?;
    let toggles = PipelineToggles {
        use_ddm: !a.no_ddm,
        use_tsm: !a.no_tsm,
        use_tgm: !a.no_tgm,
    };
    let store = embed_store(&pipeline, &set, &whitened, toggles)?;
    ensure_parent(&a.out)?;
    store.save(&a.out)?;
    Ok(json!({
        "store": a.out,
        "videos": store.len(),
        "dim": store.dim(),
        "modules": {
            "ddm": toggles.use_ddm,
            "tsm": toggles.use_tsm,
            "tgm": toggles.use_tgm,
        },
    }))
}

/// Embed a whitened corpus with one worker per video.
fn embed_store(
    pipeline: &Pipeline,
    set: &ParamSet,
    features: &BTreeMap<String, Tensor>,
    toggles: PipelineToggles,
) -> Result<EmbeddingStore> {
    let dim = features
        .values()
        .next()
        .map(|x| x.shape()[2])
        .ok_or_else(|| VvsError::Config("embed: empty corpus".into()))?;
    let rows: Vec<(&String, &Tensor)> = features.iter().collect();
    let embedded: Vec<(String, Vec<f32>)> = rows
        .into_par_iter()
        .map(|(id, x)| Ok((id.clone(), pipeline.embed(set, x, toggles)?.embedding)))
        .collect::<Result<_>>()?;
    let mut store = EmbeddingStore::new(dim)?;
    for (id, embedding) in &embedded {
        store.index_add(id, embedding)?;
    }
    Ok(store)
}

fn cmd_search(a: SearchArgs) -> Result<serde_json::Value> {
    require_file("store", &a.store)?;
    let store = EmbeddingStore::load(&a.store)?;
    let query_ids: Vec<String> = if !a.queries.is_empty() {
        a.queries.clone()
    } else if let Some(manifest_path) = &a.manifest {
        require_file("manifest", manifest_path)?;
        DatasetManifest::load_labels(manifest_path)?.0.queries
    } else {
        return Err(VvsError::Config(
            "search: pass --query or --manifest".into(),
        ));
    };
    let topk = a.topk.unwrap_or(usize::MAX);
    let mut lists = Vec::with_capacity(query_ids.len());
    for qid in &query_ids {
        let q = store
            .get(qid)
            .ok_or_else(|| VvsError::Manifest(format!("query '{qid}' missing from the store")))?;
        lists.push(store.search_parallel(qid, q, topk)?);
    }
    Ok(serde_json::to_value(&lists)?)
}

fn cmd_eval(a: EvalArgs) -> Result<serde_json::Value> {
    require_file("store", &a.store)?;
    require_file("manifest", &a.manifest)?;
    let store = EmbeddingStore::load(&a.store)?;
    let (manifest, _base) = DatasetManifest::load_labels(&a.manifest)?;
    let lists = store.rank_all(&manifest)?;
    let tiers = a.task.tiers();
    let maps: Vec<_> = tiers
        .iter()
        .map(|t| mean_average_precision(&lists, &manifest, *t))
        .collect();
    let mut out = json!({ "map": maps });
    if let Some(buckets) = a.duration_buckets {
        let mut per_task = Vec::with_capacity(tiers.len());
        for tier in &tiers {
            per_task.push(json!({
                "task": tier.name(),
                "buckets": eval_by_duration(&store, &manifest, *tier, buckets)?,
            }));
        }
        out["duration_buckets"] = json!(per_task);
    }
    Ok(out)
}

fn cmd_bench(a: BenchArgs) -> Result<serde_json::Value> {
    require_file("checkpoint", &a.ckpt)?;
    require_file("manifest", &a.manifest)?;
    require_file("store", &a.store)?;
    let (_set, pca, _pipeline) = load_checkpoint(&a.ckpt)?;
    let (manifest, base) = DatasetManifest::load(&a.manifest)?;
    let store = EmbeddingStore::load(&a.store)?;
    let raw = load_raw_corpus(&manifest, &base)?;
    let whitened = whiten_corpus(&pca, &raw)?;
    let (video_level, frame_level) = bench_speed(&store, &manifest.queries, &whitened)?;
    let speedup = frame_level.seconds_per_query / video_level.seconds_per_query;
    Ok(json!({
        "video_level": video_level,
        "frame_level": frame_level,
        "speedup": speedup,
    }))
}

fn cmd_plot_weights(a: PlotWeightsArgs) -> Result<serde_json::Value> {
    require_file("checkpoint", &a.ckpt)?;
    require_file("manifest", &a.manifest)?;
    let (set, pca, pipeline) = load_checkpoint(&a.ckpt)?;
    let (manifest, base) = DatasetManifest::load(&a.manifest)?;
    let ids: Vec<String> = if a.videos.is_empty() {
        manifest.queries.clone()
    } else {
        a.videos.clone()
    };
    if ids.is_empty() {
        return Err(VvsError::Config(
            "plot-weights: no videos selected; pass --video or use a manifest with queries".into(),
        ));
    }
    fs::create_dir_all(&a.out).map_err(|e| VvsError::io(a.out.display().to_string(), e))?;

    let mut written = Vec::with_capacity(2 * ids.len());
    for id in &ids {
        let path = manifest.feature_path(&base, id)?;
        let raw = crate::io::read_features(&path)?;
        let x = pca.apply(&raw)?.data;
        let trace = pipeline.embed(&set, &x, PipelineToggles::all())?;

        let csv_path = a.out.join(format!("{id}.csv"));
        fs::write(&csv_path, weights_csv(&trace))
            .map_err(|e| VvsError::io(csv_path.display().to_string(), e))?;
        let svg_path = a.out.join(format!("{id}.svg"));
        fs::write(&svg_path, weights_svg(id, &trace))
            .map_err(|e| VvsError::io(svg_path.display().to_string(), e))?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(json!({ "out": a.out, "written": written }))
}

/// One row per kept frame: original index, distractor-head confidence,
/// saliency weight, guidance weight, and the final composite weight.
pub fn weights_csv(trace: &EmbedTrace) -> String {
    let mut out = String::from("frame_index,w_di_kept,w_sa,w_gu,W\n");
    let mut k = 0;
    for (i, &kept) in trace.kept.iter().enumerate() {
        if !kept {
            continue;
        }
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            trace.w_di[i], trace.w_sa[k], trace.w_gu[k], trace.w[k]
        );
        k += 1;
    }
    out
}

const SVG_W: f32 = 720.0;
const SVG_H: f32 = 300.0;
const SVG_L: f32 = 46.0;
const SVG_R: f32 = 14.0;
const SVG_T: f32 = 40.0;
const SVG_B: f32 = 34.0;

/// Static line chart of the per-frame weights: composite in orange,
/// saliency in blue, guidance in green, removed frames as grey ticks.
pub fn weights_svg(id: &str, trace: &EmbedTrace) -> String {
    let t = trace.kept.len();
    let span = t.saturating_sub(1).max(1) as f32;
    let px = |i: usize| SVG_L + (SVG_W - SVG_L - SVG_R) * i as f32 / span;
    let py = |v: f32| SVG_T + (SVG_H - SVG_T - SVG_B) * (1.0 - v.clamp(0.0, 1.0));
    let kept_idx: Vec<usize> = trace
        .kept
        .iter()
        .enumerate()
        .filter(|(_, &k)| k)
        .map(|(i, _)| i)
        .collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{SVG_L}\" y=\"16\" font-size=\"13\">{}: per-frame suppression weights</text>",
        xml_escape(id)
    );

    for (v, label) in [(0.0, "0.0"), (0.5, "0.5"), (1.0, "1.0")] {
        let y = py(v);
        let _ = writeln!(
            s,
            "<line x1=\"{SVG_L}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"#dddddd\"/>",
            SVG_W - SVG_R
        );
        let _ = writeln!(
            s,
            "<text x=\"8\" y=\"{:.2}\" fill=\"#555555\">{label}</text>",
            y + 4.0
        );
    }
    let x_end = t.saturating_sub(1);
    for (i, anchor) in [(0usize, "start"), (x_end, "end")] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#555555\" text-anchor=\"{anchor}\">{i}</text>",
            px(i),
            SVG_H - 12.0
        );
    }

    for (i, &kept) in trace.kept.iter().enumerate() {
        if kept {
            continue;
        }
        let x = px(i);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"#bbbbbb\" stroke-dasharray=\"2,2\"/>",
            py(1.0),
            py(0.0)
        );
    }

    let series: [(&str, &str, &[f32]); 3] = [
        ("saliency", "#4878a8", &trace.w_sa),
        ("guidance", "#3f9b6e", &trace.w_gu),
        ("W", "#e8832a", &trace.w),
    ];
    for (k, (_, color, values)) in series.iter().enumerate() {
        let mut points = String::new();
        for (j, &i) in kept_idx.iter().enumerate() {
            let _ = write!(
                points,
                "{}{:.2},{:.2}",
                if j == 0 { "" } else { " " },
                px(i),
                py(values[j])
            );
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{points}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"{}\"/>",
            if k == 2 { "2" } else { "1.2" }
        );
    }

    let mut lx = SVG_W - SVG_R - 210.0;
    for (label, color, _) in &series {
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.2}\" y1=\"26\" x2=\"{:.2}\" y2=\"26\" stroke=\"{color}\" \
             stroke-width=\"2\"/>",
            lx + 16.0
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"30\">{label}</text>", lx + 20.0);
        lx += 70.0;
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
