//! End-to-end integration: command round trips, novel-view rendering, and
//! property tests over the field invariants.

use graspfield::dataset::{load_scene_sample, synth_scene};
use graspfield::field::{
    field_query, positional_encode, render_view, render_view_with_opacity, volumetric_render,
    ModelConfig, ModelParams,
};
use graspfield::pipeline::{
    cmd_optimize, cmd_render, cmd_synth, cmd_train_grasp, cmd_train_nerf, OptimizeArgs,
    RenderArgs, SynthArgs, TrainGraspArgs, TrainNerfArgs,
};
use graspfield::scene::{make_object_set, ObjectSetName};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn tmp(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("gf_pipe_{}_{}", name, std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn tiny_model(wh: usize, seed: u64) -> ModelParams {
    ModelParams::init(
        ModelConfig {
            hidden_width: 32,
            core_blocks: 2,
            head_blocks: 1,
            feature_channels: 16,
            image_width: wh,
            image_height: wh,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn untrained_render_view_is_finite() {
    let set = make_object_set(ObjectSetName::Single).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sample = synth_scene(&set, 1, 32, 32, &mut rng, "s".into()).unwrap();
    let params = tiny_model(32, 3);
    let obs = &sample.observations[0];
    let img = render_view(
        obs,
        &sample.observations[1].intrinsics,
        &sample.observations[1].extrinsics,
        &params,
        8,
        sample.scene.background_color,
    )
    .unwrap();
    assert!(img.pixels.iter().all(|v| v.is_finite()));
    assert_eq!(img.pixels.len(), 32 * 32 * 3);
}

#[test]
fn refining_quadrature_barely_moves_opacity() {
    // doubling the sample count changes mean opacity by less than 5%
    let set = make_object_set(ObjectSetName::Single).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let sample = synth_scene(&set, 1, 32, 32, &mut rng, "s".into()).unwrap();
    let params = tiny_model(32, 4);
    let obs = &sample.observations[0];
    let tgt = &sample.observations[1];
    let (_, op_a) = render_view_with_opacity(
        obs,
        &tgt.intrinsics,
        &tgt.extrinsics,
        &params,
        64,
        sample.scene.background_color,
    )
    .unwrap();
    let (_, op_b) = render_view_with_opacity(
        obs,
        &tgt.intrinsics,
        &tgt.extrinsics,
        &params,
        128,
        sample.scene.background_color,
    )
    .unwrap();
    let mean_abs: f32 =
        op_a.iter().zip(op_b.iter()).map(|(a, b)| (a - b).abs()).sum::<f32>() / op_a.len() as f32;
    assert!(mean_abs < 0.05, "mean |d opacity| = {mean_abs}");
}

#[test]
fn field_query_probes_a_real_observation() {
    let set = make_object_set(ObjectSetName::MultiC).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let sample = synth_scene(&set, 4, 32, 32, &mut rng, "s".into()).unwrap();
    let params = tiny_model(32, 5);
    let out = field_query([0.05, 0.0, 0.03], [0.0, 0.0, -1.0], &sample.observations[2], &params).unwrap();
    assert!(out.density >= 0.0);
    assert_eq!(out.skips.len(), 2);
    // a point far behind the camera still answers via border clamping
    let out = field_query([0.0, 0.0, 10.0], [0.0, 0.0, -1.0], &sample.observations[2], &params);
    assert!(out.is_ok());
}

#[test]
fn command_chain_round_trips_on_disk() {
    let root = tmp("chain");
    let data = root.join("data");
    cmd_synth(&SynthArgs {
        set: "single".into(),
        scenes: 2,
        objects: None,
        width: 32,
        height: 32,
        seed: 5,
        out: data.clone(),
    })
    .unwrap();
    assert!(data.join("scenes/scene_0000/meta.json").exists());
    assert!(data.join("scenes/scene_0001/cam2.png").exists());
    assert!(data.join("run_manifest.json").exists());

    // quick NVS pass just to produce a checkpoint
    let nerf = root.join("nerf");
    cmd_train_nerf(&TrainNerfArgs {
        data: data.clone(),
        out: nerf.clone(),
        seed: 6,
        epochs: 2,
        warmup_steps: 4,
        rays_per_step: 64,
        samples_per_ray: 4,
        lr_encoder: 1e-4,
        lr_core: 1e-5,
        save_every: 0,
    })
    .unwrap();
    assert!(nerf.join("checkpoint/manifest.json").exists());
    assert!(nerf.join("log.csv").exists());

    let grasp = root.join("grasp");
    cmd_train_grasp(&TrainGraspArgs {
        data: data.clone(),
        out: grasp.clone(),
        seed: 7,
        backbone: Some(nerf.join("checkpoint")),
        freeze: true,
        epochs: 2,
        negatives: 15,
        lr: 1e-4,
        save_every: 0,
    })
    .unwrap();

    // frozen backbone bytes survive the transfer stage
    let back = graspfield::field::load_checkpoint(&nerf.join("checkpoint")).unwrap();
    let trained = graspfield::field::load_checkpoint(&grasp.join("checkpoint")).unwrap();
    assert_eq!(back.group_digest(&back.encoder), trained.group_digest(&trained.encoder));
    assert_eq!(back.group_digest(&back.core), trained.group_digest(&trained.core));
    assert!(trained.freeze_encoder && trained.freeze_core);

    let render = root.join("render");
    cmd_render(&RenderArgs {
        checkpoint: grasp.join("checkpoint"),
        scene_dir: data.join("scenes/scene_0000"),
        source_cam: 0,
        target_cam: Some(1),
        azimuth_deg: None,
        pitch_deg: None,
        samples: 8,
        out: render.clone(),
    })
    .unwrap();
    assert!(render.join("view.png").exists());

    let opt = root.join("opt");
    cmd_optimize(&OptimizeArgs {
        checkpoint: grasp.join("checkpoint"),
        scene_dir: data.join("scenes/scene_0000"),
        views: 3,
        candidates: 64,
        iters: 8,
        lr0: 0.05,
        decay: 0.8,
        seed: 8,
        out: opt.clone(),
    })
    .unwrap();
    let result: serde_json::Value =
        serde_json::from_slice(&std::fs::read(opt.join("optim_result.json")).unwrap()).unwrap();
    assert_eq!(result["format_version"], 1);
    assert_eq!(result["seed"], 8);
    let snaps = result["snapshots"].as_array().unwrap();
    assert_eq!(snaps.len(), 3); // 4, 6, 8
    for s in snaps {
        assert_eq!(s["top5"].as_array().unwrap().len(), 5);
    }

    // commands never mutate their inputs
    let sample = load_scene_sample(&data.join("scenes/scene_0000")).unwrap();
    assert_eq!(sample.observations.len(), 3);

    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn freeze_without_backbone_is_a_config_error() {
    let root = tmp("freeze_cfg");
    let data = root.join("data");
    cmd_synth(&SynthArgs {
        set: "single".into(),
        scenes: 1,
        objects: None,
        width: 32,
        height: 32,
        seed: 1,
        out: data.clone(),
    })
    .unwrap();
    let err = cmd_train_grasp(&TrainGraspArgs {
        data,
        out: root.join("out"),
        seed: 1,
        backbone: None,
        freeze: true,
        epochs: 1,
        negatives: 7,
        lr: 1e-4,
        save_every: 0,
    })
    .unwrap_err();
    assert!(err.is_config_error());
    std::fs::remove_dir_all(&root).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_stays_in_unit_range(
        x in -10.0f32..10.0,
        y in -10.0f32..10.0,
        z in -10.0f32..10.0,
        m in 1usize..9,
    ) {
        for v in positional_encode(&[x, y, z], m) {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn volumetric_weights_partition_the_ray(
        densities in prop::collection::vec(0.0f32..200.0, 2..32),
        width in 0.001f32..0.06,
    ) {
        let n = densities.len();
        let colors = vec![[0.5f32; 3]; n];
        let deltas = vec![width; n];
        let (_, opacity) = volumetric_render(&colors, &densities, &deltas, [0.0; 3]);
        prop_assert!((0.0..=1.0 + 1e-6).contains(&opacity));
    }

    #[test]
    fn spawns_replay_under_their_seed(seed in 0u64..1000) {
        let set = make_object_set(ObjectSetName::MultiB).unwrap();
        let a = graspfield::scene::spawn_scene(&set, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = graspfield::scene::spawn_scene(&set, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
