use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use m2f_core::data::{generate_dataset, load_dataset, save_dataset, SceneConfig};
use m2f_core::eval::{
    attention_fg_stats, check_compatible, evaluate, instance_inference, panoptic_inference, per_layer_pq, proposal_ar,
    semantic_inference, PanopticThresholds, Task, INSTANCE_TOP_K, PROPOSAL_TOP_K,
};
use m2f_core::model::Mask2Former;
use m2f_core::render::{write_render, Overlay};
use m2f_core::rng::derive_seed_str;
use m2f_core::scene::Scene;
use m2f_core::tensor::read_checkpoint;
use m2f_core::train::{train, DirSink, TrainConfig};

#[derive(Parser)]
#[command(name = "m2f", version, about = "Train and evaluate a masked-attention segmentation model on toy scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded train and validation scene sets.
    GenData(GenDataArgs),
    /// Train a model and write its log and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a scene set.
    Eval(EvalArgs),
    /// Run one of the model analyses.
    Analyze(AnalyzeArgs),
    /// Write PPM overlays of predictions and ground truth.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives train.m2fd and val.m2fd.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 64)]
    val: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    max_instances: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training scenes (.m2fd).
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// KEY=VALUE override, applied after the config file.
    #[arg(long = "ablation", value_name = "KEY=VALUE")]
    ablations: Vec<String>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    echo_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Panoptic)]
    task: TaskArg,
    /// Also write the report as `key = value` lines to OUT/eval_<task>.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    analysis: Analysis,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the table to OUT/<analysis>.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Panoptic)]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
    /// First scene to render.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Panoptic,
    Instance,
    Semantic,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Panoptic => Task::Panoptic,
            TaskArg::Instance => Task::Instance,
            TaskArg::Semantic => Task::Semantic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    FgAttention,
    PerLayerPq,
    ProposalAr,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Render(a) => run_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = SceneConfig {
        height: a.size,
        width: a.size,
        max_instances: a.max_instances,
        ..SceneConfig::default()
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, count) in [("train", a.train), ("val", a.val)] {
        let scenes = generate_dataset(&cfg, count, derive_seed_str(a.seed, name))?;
        let path = a.out.join(format!("{name}.m2fd"));
        save_dataset(&scenes, &path).with_context(|| format!("writing {}", path.display()))?;
        println!("{} ({count} scenes)", path.display());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse_text(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for kv in &a.ablations {
        cfg.apply_override(kv).map_err(|e| Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let data = load_scenes(&a.data)?;
    check_compatible(&cfg.model, &data)?;
    let mut sink = DirSink::create(&a.out, (a.echo_every > 0).then_some(a.echo_every))?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    train(&cfg, &data, &mut sink)?;
    println!("{}", DirSink::checkpoint_path(&a.out, cfg.steps).display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_scenes(&a.data)?;
    let task = Task::from(a.task);
    let report = evaluate(&model, &data, task)?;
    print!("{}", report.to_table());
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("eval_{task}.txt")), report.to_kv())?;
    }
    Ok(())
}

fn run_analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_scenes(&a.data)?;
    check_compatible(model.config(), &data)?;
    let (name, table) = match a.analysis {
        Analysis::FgAttention => ("fg-attention", fg_table(&model, &data)?),
        Analysis::PerLayerPq => {
            let mut t = String::from("layer  pq      sq      rq\n");
            for (l, r) in per_layer_pq(&model, &data)?.iter().enumerate() {
                writeln!(t, "{l:<6} {:<7.2} {:<7.2} {:.2}", 100.0 * r.pq, 100.0 * r.sq, 100.0 * r.rq)?;
            }
            ("per-layer-pq", t)
        }
        Analysis::ProposalAr => {
            let ar = proposal_ar(&model, &data, PROPOSAL_TOP_K)?;
            let mut t = format!("layer  ar@{PROPOSAL_TOP_K}\n");
            for (l, v) in ar.iter().enumerate() {
                writeln!(t, "{l:<6} {:.2}", 100.0 * v)?;
            }
            let monotone = ar.windows(2).all(|w| w[1] >= w[0]);
            let last_beats_first = ar.last() >= ar.first();
            writeln!(t, "non_decreasing = {monotone}\nfinal_ge_initial = {last_beats_first}")?;
            ("proposal-ar", t)
        }
    };
    print!("{table}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{name}.txt")), &table)?;
    }
    Ok(())
}

fn fg_table(model: &Mask2Former, data: &[Scene]) -> anyhow::Result<String> {
    let stats = attention_fg_stats(model, data)?;
    let mut t = String::from("scale  fg      bg      queries\n");
    for (l, name) in ["1/32", "1/16", "1/8"].iter().enumerate() {
        let (fg, bg) = stats.per_scale[l];
        writeln!(t, "{name:<6} {fg:<7.4} {bg:<7.4} {}", stats.counts[l])?;
    }
    let (fg, bg) = stats.overall;
    writeln!(t, "{:<6} {fg:<7.4} {bg:<7.4} {}", "all", stats.counts.iter().sum::<usize>())?;
    Ok(t)
}

fn run_render(a: RenderArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_scenes(&a.data)?;
    check_compatible(model.config(), &data)?;
    if a.index + a.count > data.len() {
        bail!(Usage(format!("scenes {}..{} out of range for {} scenes", a.index, a.index + a.count, data.len())));
    }
    fs::create_dir_all(&a.out)?;
    let cfg = model.config();
    let task = Task::from(a.task);
    for i in a.index..a.index + a.count {
        let scene = &data[i];
        let (h, w) = (scene.truth.height, scene.truth.width);
        let (cl, ml) = model.predict(&scene.image)?;
        let path = a.out.join(format!("scene_{i}_{task}.ppm"));
        match task {
            Task::Panoptic => {
                let out = panoptic_inference(&cl, &ml, h, w, PanopticThresholds::default(), |c| cfg.is_thing(c))?;
                write_render(&path, &scene.image, Overlay::Panoptic(&out))?;
            }
            Task::Instance => {
                let out = instance_inference(&cl, &ml, h, w, INSTANCE_TOP_K, |c| cfg.is_thing(c))?;
                write_render(&path, &scene.image, Overlay::Instances(&out))?;
            }
            Task::Semantic => {
                let labels = semantic_inference(&cl, &ml, h, w)?;
                write_render(&path, &scene.image, Overlay::Labels(&labels))?;
            }
        }
        let gt_path = a.out.join(format!("scene_{i}_gt.ppm"));
        write_render(&gt_path, &scene.image, Overlay::Labels(&scene.truth.label_map()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Mask2Former> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Mask2Former::from_checkpoint(&ckpt)?)
}

fn load_scenes(path: &Path) -> anyhow::Result<Vec<Scene>> {
    let scenes = load_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if scenes.is_empty() {
        bail!("{} contains no scenes", path.display());
    }
    Ok(scenes)
}
