use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mapfuse::geometry::MapElement;
use mapfuse::io::{
    build_dataset, read_fused_maps, render_svg, write_atomic, write_fused_maps, Checkpoint, Dataset,
    FusedMap, RunConfig, Split, SvgLayers,
};
use mapfuse::matcher::match_prediction;
use mapfuse::model::{decode_to_elements, prepare_scene, FusionModel, PreparedScene, ScoredElement};
use mapfuse::synth::derive_seed;
use mapfuse::trainer::{evaluate_predictions, predict, prepare_all, train, RunPaths, DEFAULT_SCORE_THRESHOLD};

/// Crowdsourced vector-map fusion toolkit.
#[derive(Parser, Debug)]
#[command(name = "mapfuse", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply to omitted sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (dataset.jsonl).
    Synth,
    /// Train on the train split (model.ckpt, metrics.jsonl).
    Train(TrainArgs),
    /// Score predictions against ground truth (report.txt, report.kv).
    Eval(EvalArgs),
    /// Fuse every scene's trips into one map (fused.jsonl).
    Infer(InferArgs),
    /// Draw one scene as SVG.
    Render(RenderArgs),
    /// Print the instance and point matching for one scene.
    MatchDebug(MatchArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn filter(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, conflicts_with_all = ["predictions", "gt_passthrough"])]
    checkpoint: Option<PathBuf>,
    /// Fused maps written by `infer`.
    #[arg(long, conflicts_with = "gt_passthrough")]
    predictions: Option<PathBuf>,
    /// Score the ground truth against itself (harness check).
    #[arg(long)]
    gt_passthrough: bool,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Use only the first N trips of each scene.
    #[arg(long)]
    trips: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Scene id; defaults to the first scene.
    #[arg(long)]
    scene: Option<String>,
    /// Fused maps to draw as the prediction layer.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: Option<String>,
}

struct RunContext {
    config: RunConfig,
    seed: Option<u64>,
    out: PathBuf,
}

impl RunContext {
    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<FusionModel> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_model)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick_scene(dataset: &Dataset, id: Option<&str>) -> Result<mapfuse::geometry::Scene> {
    let record = match id {
        Some(id) => dataset.records.iter().find(|r| r.scene_id == id),
        None => dataset.records.first(),
    };
    match record {
        Some(r) => Ok(r.to_scene()),
        None => bail!("scene {} not found", id.unwrap_or("(first)")),
    }
}

fn synth(ctx: &RunContext) -> Result<()> {
    let seed = ctx.seed.unwrap_or(ctx.config.scene.seed);
    let path = ctx.output("dataset.jsonl");
    let c = &ctx.config;
    let dataset = build_dataset(&path, &c.scene, &c.noise, &c.data, seed)?;
    println!("wrote {} scenes to {}", dataset.records.len(), path.display());
    Ok(())
}

fn run_train(ctx: &RunContext, args: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let mut config = ctx.config.clone();
    if let Some(seed) = ctx.seed {
        config.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        config.train.total_steps = steps;
    }
    config.train.validate()?;
    let width = config.data.seg_line_width;
    let train_set = prepare_all(&dataset.scenes(Some(Split::Train)), &config.model, width)?;
    if train_set.is_empty() {
        bail!("dataset {} has no training scenes", args.dataset.display());
    }
    let val_set = prepare_all(&dataset.scenes(Some(Split::Val)), &config.model, width)?;
    let model = FusionModel::new(config.model.clone(), derive_seed(config.train.seed, 0))?;
    log::info!(
        "training {} parameters on {} scenes for {} steps",
        model.params().scalar_count(),
        train_set.len(),
        config.train.total_steps
    );
    let paths = RunPaths::new(&ctx.out);
    let eval = (!val_set.is_empty()).then_some(val_set.as_slice());
    train(model, config.loss, config.train.clone(), &train_set, eval, &paths)?;
    write_atomic(&ctx.output("run.toml"), config.to_toml()?.as_bytes())?;
    println!("wrote {}", paths.checkpoint().display());
    Ok(())
}

fn gt_as_predictions(scenes: &[PreparedScene]) -> Vec<Vec<ScoredElement>> {
    scenes
        .iter()
        .map(|s| {
            s.gt.iter()
                .map(|e| ScoredElement {
                    element: e.clone(),
                    confidence: 1.0,
                })
                .collect()
        })
        .collect()
}

fn run_eval(ctx: &RunContext, args: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let scenes_raw = dataset.scenes(args.split.filter());
    let (predictions, scenes) = if args.gt_passthrough {
        let scenes = prepare_all(&scenes_raw, &ctx.config.model, ctx.config.data.seg_line_width)?;
        (gt_as_predictions(&scenes), scenes)
    } else if let Some(path) = &args.predictions {
        let scenes = prepare_all(&scenes_raw, &ctx.config.model, ctx.config.data.seg_line_width)?;
        let maps = read_fused_maps(path).with_context(|| format!("reading predictions {}", path.display()))?;
        let predictions = scenes
            .iter()
            .map(|s| {
                maps.iter()
                    .find(|m| m.scene_id == s.scene_id)
                    .map(|m| {
                        m.elements
                            .iter()
                            .filter(|e| e.confidence >= args.threshold)
                            .cloned()
                            .collect()
                    })
                    .with_context(|| format!("{}: no prediction for scene {}", path.display(), s.scene_id))
            })
            .collect::<Result<Vec<_>>>()?;
        (predictions, scenes)
    } else if let Some(path) = &args.checkpoint {
        let model = load_model(path)?;
        let scenes = prepare_all(&scenes_raw, model.config(), ctx.config.data.seg_line_width)?;
        (predict(&model, &scenes, args.threshold)?, scenes)
    } else {
        bail!("eval needs one of --checkpoint, --predictions or --gt-passthrough");
    };
    let report = evaluate_predictions(&predictions, &scenes)?;
    write_atomic(&ctx.output("report.txt"), report.to_text().as_bytes())?;
    write_atomic(&ctx.output("report.kv"), report.to_key_values().as_bytes())?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_infer(ctx: &RunContext, args: &InferArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let model = load_model(&args.checkpoint)?;
    let mut maps = Vec::new();
    for scene in dataset.scenes(args.split.filter()) {
        let mut prepared = prepare_scene(&scene, model.config(), ctx.config.data.seg_line_width)?;
        if let Some(n) = args.trips {
            let keep: Vec<usize> = (0..prepared.trip_count.min(n)).collect();
            prepared = prepared.with_trips(&keep);
        }
        let output = model.forward_item(&prepared.tokens)?;
        maps.push(FusedMap {
            scene_id: scene.scene_id.clone(),
            bounds: scene.bounds,
            elements: decode_to_elements(&output, &scene.bounds, args.threshold, true)?,
        });
    }
    let path = ctx.output("fused.jsonl");
    write_fused_maps(&path, &maps)?;
    println!("wrote {} fused maps to {}", maps.len(), path.display());
    Ok(())
}

fn run_render(ctx: &RunContext, args: &RenderArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let scene = pick_scene(&dataset, args.scene.as_deref())?;
    let prediction: Vec<MapElement> = match &args.predictions {
        Some(path) => read_fused_maps(path)?
            .into_iter()
            .find(|m| m.scene_id == scene.scene_id)
            .map(|m| m.elements.into_iter().map(|s| s.element).collect())
            .with_context(|| format!("{}: no prediction for scene {}", path.display(), scene.scene_id))?,
        None => Vec::new(),
    };
    let svg = render_svg(
        &scene.bounds,
        &SvgLayers {
            gt: &scene.gt_elements,
            trips: &scene.trips,
            prediction: &prediction,
        },
    );
    let path = ctx.output(&format!("{}.svg", scene.scene_id));
    write_atomic(&path, svg.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_match_debug(ctx: &RunContext, args: &MatchArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let model = load_model(&args.checkpoint)?;
    let scene = pick_scene(&dataset, args.scene.as_deref())?;
    let prepared = prepare_scene(&scene, model.config(), ctx.config.data.seg_line_width)?;
    let output = model.forward_item(&prepared.tokens)?;
    let matching = match_prediction(
        &output.class_logits,
        &output.points,
        &scene.gt_elements,
        &scene.bounds,
        ctx.config.loss.focal(),
    )?;
    println!("scene {}: total cost {:.6}", scene.scene_id, matching.instances.total_cost);
    for (&(g, p), points) in matching.instances.pairs.iter().zip(&matching.points) {
        println!(
            "gt {g} ({}) -> query {p}: point cost {:.6}, order {:?}",
            scene.gt_elements[g].category.name(),
            points.cost,
            points.permutation
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = RunContext {
        config,
        seed: cli.seed,
        out: cli.out,
    };
    match &cli.command {
        Command::Synth => synth(&ctx),
        Command::Train(a) => run_train(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::Infer(a) => run_infer(&ctx, a),
        Command::Render(a) => run_render(&ctx, a),
        Command::MatchDebug(a) => run_match_debug(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
