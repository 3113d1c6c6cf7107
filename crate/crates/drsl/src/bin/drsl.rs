//! Command-line surface: dataset generation, source training,
//! pseudo-labeling, adaptation, evaluation, gradient checking, and report
//! rendering. Every command is deterministic for a given seed and
//! idempotent across re-runs on identical inputs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};

use drsl::gradcheck::{self, LossId};
use drsl::pseudolabel::{self, ProbMap};
use drsl::report;
use drsl::segnet::Model;
use drsl::toyworld::{gen_dataset, Shift, ToySpec};
use drsl::trainer::{self, TrainConfig, Variant, CHECKPOINT_DIR, ROUND_REPORTS_FILE};

#[derive(Parser)]
#[command(
    name = "drsl",
    version,
    about = "Distribution-regularized self-training for semantic segmentation \
             on a synthetic two-domain benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the two-domain synthetic dataset
    GenData(GenDataArgs),
    /// Train the source-domain model
    TrainSource(TrainArgs),
    /// Write class-balanced pseudo-labels for the target split
    PseudoLabel(PseudoLabelArgs),
    /// Run self-training adaptation rounds on the target domain
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint against the held-out target labels
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every loss gradient
    Gradcheck(GradcheckArgs),
    /// Render a per-run report or execute the ablation grid
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Appearance sub-styles per class
    #[arg(long, default_value_t = 3)]
    styles: usize,
    #[arg(long, default_value_t = 4)]
    shapes_min: usize,
    #[arg(long, default_value_t = 7)]
    shapes_max: usize,
    /// Target-domain hue rotation
    #[arg(long, default_value_t = 0.10, allow_negative_numbers = true)]
    hue: f32,
    /// Target-domain brightness offset
    #[arg(long, default_value_t = -0.10, allow_negative_numbers = true)]
    brightness: f32,
    /// Target-domain additive noise level
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    /// Target-domain texture frequency multiplier
    #[arg(long, default_value_t = 1.3)]
    freq_scale: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source-split image count
    #[arg(long, default_value_t = 24)]
    source: usize,
    /// Target-split image count
    #[arg(long, default_value_t = 24)]
    target: usize,
}

/// Training options shared by `train-source`, `adapt`, and the grid: a
/// TOML config file plus individual flag overrides on top of it.
#[derive(Args, Default)]
struct Overrides {
    /// TOML training config; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptation objective: "drsl" or "drsl+"
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    eta: Option<f32>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    steps_source: Option<usize>,
    #[arg(long)]
    steps_per_round: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Embeddings sampled per image per step
    #[arg(long)]
    t_e: Option<usize>,
    /// Consistency triplets sampled per step
    #[arg(long)]
    n_e: Option<usize>,
    #[arg(long)]
    label_reduction_ratio: Option<usize>,
    #[arg(long)]
    lr_source: Option<f32>,
    #[arg(long)]
    lr_adapt: Option<f32>,
    /// Directory of pre-translated source images pooled with the originals
    #[arg(long)]
    translated_source: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                })*
            };
        }
        apply!(
            seed,
            variant,
            beta,
            eta,
            gamma,
            modes,
            rounds,
            steps_source,
            steps_per_round,
            crop,
            t_e,
            n_e,
            label_reduction_ratio,
            lr_source,
            lr_adapt
        );
        if let Some(dir) = &self.translated_source {
            cfg.translated_source = Some(dir.display().to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest path
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoint, metrics, and config snapshot
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PseudoLabelArgs {
    /// Checkpoint directory of the current model
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest path
    #[arg(long)]
    data: PathBuf,
    /// Output directory for label PNGs and the sidecar JSON
    #[arg(long)]
    out: PathBuf,
    /// Self-training round index (drives the selection fraction)
    #[arg(long, default_value_t = 0)]
    round: usize,
}

#[derive(Args)]
struct AdaptArgs {
    /// Source-model checkpoint directory to start from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest path
    #[arg(long)]
    data: PathBuf,
    /// Run directory for artifacts
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest path
    #[arg(long)]
    data: PathBuf,
    /// Spread image evaluation over all cores
    #[arg(long)]
    parallel: bool,
    /// Optional JSON output path for the metrics
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check one loss (seg_src | seg_tgt | emb | cls | mcl | ma) instead of all
    #[arg(long)]
    loss: Option<LossId>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["run", "grid"])))]
struct ReportArgs {
    /// Render one run directory into markdown plus curve plots
    #[arg(long)]
    run: Option<PathBuf>,
    /// Execute the full ablation grid instead
    #[arg(long)]
    grid: bool,
    /// Dataset directory or manifest path (grid mode)
    #[arg(long, required_if_eq("grid", "true"))]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes, like any other CLI tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainSource(a) => train_source(a),
        Cmd::PseudoLabel(a) => pseudo_label(a),
        Cmd::Adapt(a) => adapt(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Report(a) => render_report(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let spec = ToySpec {
        image_size: a.image_size,
        num_classes: a.classes,
        styles_per_class: a.styles,
        shapes_min: a.shapes_min,
        shapes_max: a.shapes_max,
        shift: Shift {
            hue_delta: a.hue,
            brightness_delta: a.brightness,
            noise_std: a.noise,
            texture_freq_scale: a.freq_scale,
        },
        seed: a.seed,
    };
    let manifest = gen_dataset(&spec, a.source, a.target, &a.out)?;
    println!(
        "wrote {} source + {} target images ({}x{}, {} classes) under {}",
        manifest.source.len(),
        manifest.target.len(),
        spec.image_size,
        spec.image_size,
        spec.num_classes,
        a.out.display()
    );
    Ok(())
}

fn train_source(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = a.overrides.resolve()?;
    let manifest = trainer::manifest_path_of(&a.data);
    trainer::train_source(&cfg, &manifest, &a.out)?;
    println!(
        "source model trained for {} steps; checkpoint at {}",
        cfg.steps_source,
        a.out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn pseudo_label(a: PseudoLabelArgs) -> anyhow::Result<()> {
    let model: Model<f32> = Model::load(&a.checkpoint)?;
    let manifest_path = trainer::manifest_path_of(&a.data);
    let (_, target, manifest) = trainer::load_training_data(&manifest_path, None)?;
    if model.spec.num_classes != manifest.spec.num_classes {
        bail!(
            "checkpoint has {} classes, dataset {}",
            model.spec.num_classes,
            manifest.spec.num_classes
        );
    }
    let probs: Vec<ProbMap> = target
        .ids
        .iter()
        .zip(&target.images)
        .map(|(id, img)| ProbMap {
            id: id.clone(),
            probs: trainer::forward_probs(&model, img),
        })
        .collect();
    let delta = pseudolabel::delta_schedule(a.round as i64)?;
    let pl = pseudolabel::generate(&probs, delta, a.round)?;
    pseudolabel::save_pseudo_labels(&pl, &a.out)?;
    println!(
        "round {}: delta {:.2}, {} labels, {:.1}% of pixels selected",
        a.round,
        delta,
        pl.labels.len(),
        100.0 * pl.selected_pixels() as f64 / pl.total_pixels() as f64
    );
    if let Some(gt) = trainer::try_load_eval_labels(&manifest_path, &manifest) {
        let q = pseudolabel::eval_quality(&pl, &gt, &probs)?;
        match q.pl_miou {
            Some(m) => println!(
                "selected-pixel mIoU {:.4}, normalized self-entropy {:.4}",
                m, q.self_entropy
            ),
            None => println!("nothing selected; self-entropy {:.4}", q.self_entropy),
        }
    }
    Ok(())
}

fn adapt(a: AdaptArgs) -> anyhow::Result<()> {
    let cfg = a.overrides.resolve()?;
    let manifest = trainer::manifest_path_of(&a.data);
    let (_, reports) = trainer::adapt(&cfg, &a.checkpoint, &manifest, &a.out)?;
    for r in &reports {
        let quality = match &r.pl_quality {
            Some(q) => format!(
                "coverage {:.3}, PL mIoU {}, entropy {:.4}",
                q.coverage,
                q.pl_miou.map_or("n/a".into(), |m| format!("{m:.4}")),
                q.self_entropy
            ),
            None => "no eval labels".to_string(),
        };
        let miou = r.target_miou.map_or("n/a".into(), |m| format!("{m:.4}"));
        println!(
            "round {}: delta {:.2}, {quality}, target mIoU {miou}",
            r.round, r.delta
        );
    }
    println!(
        "adaptation finished; checkpoint at {}, rounds in {}",
        a.out.join(CHECKPOINT_DIR).display(),
        a.out.join(ROUND_REPORTS_FILE).display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let model: Model<f32> = Model::load(&a.checkpoint)?;
    let manifest_path = trainer::manifest_path_of(&a.data);
    let (_, target, manifest) = trainer::load_training_data(&manifest_path, None)?;
    let labels = trainer::try_load_eval_labels(&manifest_path, &manifest)
        .context("target eval labels are required for evaluation but were not found")?;
    let threads = if a.parallel {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        1
    };
    let conf = trainer::eval_confusion(
        &model,
        &target.images,
        &labels,
        manifest.spec.num_classes,
        threads,
    )?;
    let per_class = conf.per_class_iou();
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    let miou = conf.miou();
    match miou {
        Some(m) => println!("mIoU {:.4} over {} images", m, target.images.len()),
        None => println!("no evaluated classes"),
    }
    if let Some(acc) = conf.pixel_accuracy() {
        println!("pixel accuracy {acc:.4}");
    }
    if let Some(out) = &a.out {
        #[derive(serde::Serialize)]
        struct EvalOut {
            miou: Option<f64>,
            per_class_iou: Vec<Option<f64>>,
            pixel_accuracy: Option<f64>,
            images: usize,
        }
        let payload = EvalOut {
            miou,
            per_class_iou: per_class,
            pixel_accuracy: conf.pixel_accuracy(),
            images: target.images.len(),
        };
        std::fs::write(out, serde_json::to_string_pretty(&payload)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let reports = match a.loss {
        Some(loss) => vec![gradcheck::check_loss(loss, a.seed)?],
        None => gradcheck::check_all(a.seed)?,
    };
    let mut failed = 0usize;
    for r in &reports {
        println!(
            "{:<8} max rel err {:.3e} at {} ({} components, sub-seed {}) {}",
            r.loss.name(),
            r.max_rel_err,
            r.worst,
            r.components,
            r.sub_seed,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} losses failed the gradient check", reports.len());
    }
    Ok(())
}

fn render_report(a: ReportArgs) -> anyhow::Result<()> {
    if let Some(run_dir) = &a.run {
        report::write_run_report(run_dir, &a.out)?;
        println!("report written to {}", a.out.join("report.md").display());
        return Ok(());
    }
    let data = a.data.as_ref().expect("clap enforces --data with --grid");
    let cfg = a.overrides.resolve()?;
    let manifest = trainer::manifest_path_of(data);
    let grid = report::run_ablation_grid(&cfg, &manifest, &a.out)?;
    println!(
        "grid complete; tables at {} (reduction check: {})",
        a.out.join("ablation.md").display(),
        if grid.reduction_identical {
            "identical"
        } else {
            "MISMATCH"
        }
    );
    if !grid.reduction_identical {
        bail!("zero-weight runs disagreed; see {}", a.out.display());
    }
    Ok(())
}
