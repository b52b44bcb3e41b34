//! Command implementations shared by the CLI binary and the test suites.
//! Every command writes a run manifest next to its outputs and never
//! mutates its inputs.

use crate::dataset::{load_dataset, load_scene_sample, synth_dataset, write_png, RunScope};
use crate::error::{Error, Result};
use crate::eval::{run_task, write_eval_report_csv, TaskKind, TaskSpec};
use crate::field::{
    load_checkpoint, render_view, save_checkpoint, ModelConfig, ModelParams,
};
use crate::optim::{optimize, ObjectiveKind, OptimizerRunConfig};
use crate::scene::{make_object_set, orbit_camera, ObjectSetName};
use crate::train::{train_grasp, train_joint_baseline, train_nvs, write_log_csv, GraspTrainConfig, NvsConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    pub set: String,
    pub scenes: usize,
    /// Objects per scene; defaults to 1 for `single` and 5 otherwise.
    pub objects: Option<usize>,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let set_name = ObjectSetName::parse(&args.set)?;
    let set = make_object_set(set_name)?;
    let objects = args.objects.unwrap_or(if set_name == ObjectSetName::Single { 1 } else { 5 });
    if args.scenes == 0 {
        return Err(Error::InvalidConfig("need at least one scene".into()));
    }
    let mut run = RunScope::begin(&args.out, "synth", args.seed, serde_json::to_value(args)?)?;
    let dirs = synth_dataset(&args.out, &set, args.scenes, objects, args.width, args.height, args.seed)?;
    for d in &dirs {
        run.record_output(d);
    }
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainNerfArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    pub lr_encoder: f64,
    pub lr_core: f64,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    #[serde(default)]
    pub save_every: usize,
}

impl TrainNerfArgs {
    pub fn desk(data: PathBuf, out: PathBuf, seed: u64) -> Self {
        let d = NvsConfig::desk();
        TrainNerfArgs {
            data,
            out,
            seed,
            epochs: d.epochs,
            warmup_steps: d.warmup_steps,
            rays_per_step: d.rays_per_step,
            samples_per_ray: d.n_samples_per_ray,
            lr_encoder: d.lr_encoder_max,
            lr_core: d.lr_core_max,
            save_every: 0,
        }
    }
}

pub fn cmd_train_nerf(args: &TrainNerfArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let first = &dataset[0].observations[0].image;
    let config = ModelConfig {
        image_width: first.width,
        image_height: first.height,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(config, args.seed)?;
    let nvs = NvsConfig {
        warmup_steps: args.warmup_steps,
        lr_encoder_max: args.lr_encoder,
        lr_core_max: args.lr_core,
        epochs: args.epochs,
        rays_per_step: args.rays_per_step,
        n_samples_per_ray: args.samples_per_ray,
        seed: args.seed,
        snapshot_dir: (args.save_every > 0).then(|| args.out.clone()),
        snapshot_every: args.save_every,
    };
    let mut run = RunScope::begin(&args.out, "train-nerf", args.seed, serde_json::to_value(args)?)?;
    run.record_input(&args.data);
    let (trained, log) = train_nvs(&dataset, params, &nvs)?;
    let ckpt = args.out.join("checkpoint");
    save_checkpoint(&trained, &ckpt)?;
    write_log_csv(&args.out.join("log.csv"), &log)?;
    std::fs::write(args.out.join("config.json"), serde_json::to_vec_pretty(&nvs)?)?;
    run.record_output(&ckpt);
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainGraspArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Pretrained backbone checkpoint; required when freezing.
    pub backbone: Option<PathBuf>,
    pub freeze: bool,
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    #[serde(default)]
    pub save_every: usize,
}

pub fn cmd_train_grasp(args: &TrainGraspArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let params = match (&args.backbone, args.freeze) {
        (Some(dir), _) => load_checkpoint(dir)?,
        (None, true) => {
            return Err(Error::InvalidConfig(
                "--freeze requires --backbone; the joint baseline is --no-freeze without a backbone".into(),
            ))
        }
        (None, false) => {
            let first = &dataset[0].observations[0].image;
            let config = ModelConfig {
                image_width: first.width,
                image_height: first.height,
                ..ModelConfig::default()
            };
            ModelParams::init(config, args.seed)?
        }
    };
    let cfg = GraspTrainConfig {
        lr: args.lr,
        negatives_per_scene: args.negatives,
        epochs: args.epochs,
        freeze_backbone: args.freeze,
        seed: args.seed,
        snapshot_dir: (args.save_every > 0).then(|| args.out.clone()),
        snapshot_every: args.save_every,
    };
    let mut run = RunScope::begin(&args.out, "train-grasp", args.seed, serde_json::to_value(args)?)?;
    run.record_input(&args.data);
    if let Some(b) = &args.backbone {
        run.record_input(b);
    }
    let (trained, log) = if args.freeze {
        train_grasp(&dataset, params, &cfg)?
    } else {
        train_joint_baseline(&dataset, params, &cfg)?
    };
    let ckpt = args.out.join("checkpoint");
    save_checkpoint(&trained, &ckpt)?;
    write_log_csv(&args.out.join("log.csv"), &log)?;
    std::fs::write(args.out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    run.record_output(&ckpt);
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    pub scene_dir: PathBuf,
    pub source_cam: usize,
    /// Render one of the scene's cameras, or an orbit pose.
    pub target_cam: Option<usize>,
    pub azimuth_deg: Option<f64>,
    pub pitch_deg: Option<f64>,
    pub samples: usize,
    pub out: PathBuf,
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let sample = load_scene_sample(&args.scene_dir)?;
    let obs = sample
        .observations
        .get(args.source_cam)
        .ok_or_else(|| Error::InvalidConfig(format!("scene has no camera {}", args.source_cam)))?;
    let (k, rt) = match (args.target_cam, args.azimuth_deg) {
        (Some(i), None) => {
            let o = sample
                .observations
                .get(i)
                .ok_or_else(|| Error::InvalidConfig(format!("scene has no camera {i}")))?;
            (o.intrinsics, o.extrinsics)
        }
        (None, Some(az)) => orbit_camera(
            params.config.image_width,
            params.config.image_height,
            az,
            args.pitch_deg.unwrap_or(45.0),
            0.8,
        )?,
        _ => {
            return Err(Error::InvalidConfig(
                "choose exactly one of --target-cam or --azimuth".into(),
            ))
        }
    };
    let mut run = RunScope::begin(&args.out, "render", 0, serde_json::to_value(args)?)?;
    run.record_input(&args.checkpoint);
    run.record_input(&args.scene_dir);
    let img = render_view(obs, &k, &rt, &params, args.samples, sample.scene.background_color)?;
    let path = args.out.join("view.png");
    write_png(&path, &img)?;
    run.record_output(&path);
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeArgs {
    pub checkpoint: PathBuf,
    pub scene_dir: PathBuf,
    pub views: usize,
    pub candidates: usize,
    pub iters: usize,
    pub lr0: f64,
    pub decay: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OptimResultFile {
    pub format_version: u32,
    pub config: OptimizerRunConfig,
    pub seed: u64,
    pub snapshots: Vec<OptimSnapshotOut>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OptimSnapshotOut {
    pub iter: usize,
    pub top5: Vec<OptimCandidateOut>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OptimCandidateOut {
    pub candidate: usize,
    pub position: [f64; 3],
    pub score: f32,
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let sample = load_scene_sample(&args.scene_dir)?;
    let objective = match args.views {
        1 => ObjectiveKind::OneView,
        3 => ObjectiveKind::ThreeViews,
        other => return Err(Error::InvalidConfig(format!("--views must be 1 or 3, got {other}"))),
    };
    let config = OptimizerRunConfig {
        n_candidates: args.candidates,
        max_iters: args.iters,
        lr0: args.lr0,
        decay: args.decay,
        snapshot_iters: default_snapshots(args.iters),
        objective,
        seed: args.seed,
        ..OptimizerRunConfig::default()
    };
    let mut run = RunScope::begin(&args.out, "optimize", args.seed, serde_json::to_value(args)?)?;
    run.record_input(&args.checkpoint);
    run.record_input(&args.scene_dir);
    let trajectories = optimize(&params, &sample.observations, &sample.scene, &config)?;
    let mut snapshots = Vec::new();
    let mut iters = config.snapshot_iters.clone();
    iters.sort_unstable();
    for iter in iters {
        let mut entries: Vec<OptimCandidateOut> = trajectories
            .iter()
            .filter_map(|t| {
                t.snapshots
                    .iter()
                    .find(|s| s.iter == iter)
                    .map(|s| OptimCandidateOut { candidate: t.candidate, position: s.position, score: s.score })
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.candidate.cmp(&b.candidate)));
        entries.truncate(5);
        snapshots.push(OptimSnapshotOut { iter, top5: entries });
    }
    let out_file = args.out.join("optim_result.json");
    let result = OptimResultFile {
        format_version: 1,
        config,
        seed: args.seed,
        snapshots,
    };
    std::fs::write(&out_file, serde_json::to_vec_pretty(&result)?)?;
    run.record_output(&out_file);
    run.finish()
}

/// Snapshot iterations at half, three-quarters and the end of the run,
/// matching 8/12/16 at the default 16 iterations.
pub fn default_snapshots(max_iters: usize) -> Vec<usize> {
    let mut v = vec![max_iters / 2, max_iters * 3 / 4, max_iters];
    v.retain(|&i| i >= 1);
    v.dedup();
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub task: String,
    pub scenes: usize,
    pub views: usize,
    pub candidates: usize,
    pub iters: usize,
    pub seed: u64,
    pub label: String,
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let kind = TaskKind::parse(&args.task)?;
    let objective = match args.views {
        1 => ObjectiveKind::OneView,
        3 => ObjectiveKind::ThreeViews,
        other => return Err(Error::InvalidConfig(format!("--views must be 1 or 3, got {other}"))),
    };
    let task = TaskSpec { kind, n_scenes: args.scenes, seed: args.seed, objects_per_scene: None };
    let opt = OptimizerRunConfig {
        n_candidates: args.candidates,
        max_iters: args.iters,
        snapshot_iters: default_snapshots(args.iters),
        objective,
        seed: args.seed,
        ..OptimizerRunConfig::default()
    };
    let mut run = RunScope::begin(&args.out, "eval", args.seed, serde_json::to_value(args)?)?;
    run.record_input(&args.checkpoint);
    let result = run_task(&task, &params, &opt)?;
    let report = args.out.join("eval_report.csv");
    write_eval_report_csv(&report, &args.label, &result)?;
    std::fs::write(args.out.join("records.json"), serde_json::to_vec_pretty(&result)?)?;
    run.record_output(&report);
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportArgs {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    if args.inputs.is_empty() {
        return Err(Error::InvalidConfig("report needs at least one eval_report.csv".into()));
    }
    let mut run = RunScope::begin(&args.out, "report", 0, serde_json::to_value(args)?)?;
    for p in &args.inputs {
        run.record_input(p);
    }
    let table = args.out.join("table1.csv");
    crate::eval::aggregate_report(&args.inputs, &table)?;
    run.record_output(&table);
    run.finish()
}

/// Byte-level digest of a file tree, for reproducibility checks.
pub fn tree_digest(root: &Path) -> Result<u64> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        entries.sort();
        for e in entries {
            if e.is_dir() {
                walk(&e, files)?;
            } else if e.file_name().and_then(|s| s.to_str()) != Some("run_manifest.json") {
                // manifests carry wall-clock timings; everything else must
                // reproduce bit for bit
                files.push(e);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        mix(rel.to_string_lossy().as_bytes());
        mix(&std::fs::read(&f)?);
    }
    Ok(h)
}
