//! Command-line front end for the grasp-field pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors, 1 for
//! runtime failures. Parallelism is capped by `GRASPFIELD_THREADS`
//! (0 or unset picks the hardware thread count).

use clap::{Args, Parser, Subcommand};
use graspfield::pipeline::{
    cmd_eval, cmd_optimize, cmd_render, cmd_report, cmd_synth, cmd_train_grasp, cmd_train_nerf,
    EvalArgs, OptimizeArgs, RenderArgs, ReportArgs, SynthArgs, TrainGraspArgs, TrainNerfArgs,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "graspfield", version, about = "Grasp-success fields on synthetic tabletop scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene dataset (meta.json + cam{0,1,2}.png per scene).
    Synth(SynthCli),
    /// Pretrain encoder and field core for novel-view synthesis.
    TrainNerf(TrainNerfCli),
    /// Train the grasp head (frozen backbone) or the joint baseline.
    TrainGrasp(TrainGraspCli),
    /// Render a novel view of a scene from a checkpoint.
    Render(RenderCli),
    /// Optimize grasp candidates on one scene.
    Optimize(OptimizeCli),
    /// Run an evaluation task and write eval_report.csv.
    Eval(EvalCli),
    /// Merge eval reports into a wide per-task table.
    Report(ReportCli),
}

#[derive(Args)]
struct SynthCli {
    /// Object set: single, multi_A, multi_B or multi_C.
    #[arg(long)]
    set: String,
    #[arg(long)]
    scenes: usize,
    /// Objects per scene (defaults: 1 for single, 5 otherwise).
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainNerfCli {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Passes over the dataset; one (source, target) pair per step.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1024)]
    rays: usize,
    #[arg(long, default_value_t = 12)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_encoder: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_core: f64,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    #[arg(long, default_value_t = 0)]
    save_every: usize,
}

#[derive(Args)]
struct TrainGraspCli {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Pretrained backbone checkpoint directory.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Freeze the backbone and train only the grasp head (the default).
    #[arg(long)]
    freeze: bool,
    /// Train everything jointly from scratch (the no-pretraining baseline).
    #[arg(long, conflicts_with = "freeze")]
    no_freeze: bool,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 2047)]
    negatives: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    #[arg(long, default_value_t = 0)]
    save_every: usize,
}

#[derive(Args)]
struct RenderCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single scene directory (scenes/<id>).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    source_cam: usize,
    /// Render one of the scene's cameras...
    #[arg(long)]
    target_cam: Option<usize>,
    /// ...or an orbit pose at this azimuth (degrees).
    #[arg(long)]
    azimuth: Option<f64>,
    #[arg(long)]
    pitch: Option<f64>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// 1 or 3 observations in the objective.
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 8192)]
    candidates: usize,
    #[arg(long, default_value_t = 16)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    lr0: f64,
    #[arg(long, default_value_t = 0.8)]
    decay: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// single_object, multi_A, multi_B or multi_C.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 8192)]
    candidates: usize,
    #[arg(long, default_value_t = 16)]
    iters: usize,
    #[arg(long)]
    seed: u64,
    /// Model column label in reports.
    #[arg(long)]
    label: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportCli {
    /// eval_report.csv files to merge.
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> graspfield::Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&SynthArgs {
            set: a.set,
            scenes: a.scenes,
            objects: a.objects,
            width: a.width,
            height: a.height,
            seed: a.seed,
            out: a.out,
        }),
        Command::TrainNerf(a) => cmd_train_nerf(&TrainNerfArgs {
            data: a.data,
            out: a.out,
            seed: a.seed,
            epochs: a.epochs,
            warmup_steps: a.warmup,
            rays_per_step: a.rays,
            samples_per_ray: a.samples,
            lr_encoder: a.lr_encoder,
            lr_core: a.lr_core,
            save_every: a.save_every,
        }),
        Command::TrainGrasp(a) => cmd_train_grasp(&TrainGraspArgs {
            data: a.data,
            out: a.out,
            seed: a.seed,
            backbone: a.backbone,
            freeze: !a.no_freeze,
            epochs: a.epochs,
            negatives: a.negatives,
            lr: a.lr,
            save_every: a.save_every,
        }),
        Command::Render(a) => cmd_render(&RenderArgs {
            checkpoint: a.checkpoint,
            scene_dir: a.scene,
            source_cam: a.source_cam,
            target_cam: a.target_cam,
            azimuth_deg: a.azimuth,
            pitch_deg: a.pitch,
            samples: a.samples,
            out: a.out,
        }),
        Command::Optimize(a) => cmd_optimize(&OptimizeArgs {
            checkpoint: a.checkpoint,
            scene_dir: a.scene,
            views: a.views,
            candidates: a.candidates,
            iters: a.iters,
            lr0: a.lr0,
            decay: a.decay,
            seed: a.seed,
            out: a.out,
        }),
        Command::Eval(a) => cmd_eval(&EvalArgs {
            checkpoint: a.checkpoint,
            task: a.task,
            scenes: a.scenes,
            views: a.views,
            candidates: a.candidates,
            iters: a.iters,
            seed: a.seed,
            label: a.label,
            out: a.out,
        }),
        Command::Report(a) => cmd_report(&ReportArgs { inputs: a.inputs, out: a.out }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
