//! Novel-view-synthesis pretraining: photometric MSE between rendered and
//! observed target pixels, with separate warmed-up Adam groups for the
//! encoder and the field core.

use super::{warmup_lr, OptimizerStates, TrainLogRow};
use crate::camera::{ray_for_pixel, ray_box_span, sample_along_ray, SampleMode};
use crate::dataset::{rays_hitting_box, SceneSample};
use crate::error::{Error, Result};
use crate::field::{
    build_render_batch, positional_encode_rows, stamp_params, FeatureSource, ModelParams, Trainable,
};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NvsConfig {
    /// Steps over which both learning rates ramp linearly from zero.
    pub warmup_steps: usize,
    pub lr_encoder_max: f64,
    pub lr_core_max: f64,
    /// Passes over the dataset; one (source, target) pair per step.
    pub epochs: usize,
    /// Target pixels sampled per step.
    pub rays_per_step: usize,
    pub n_samples_per_ray: usize,
    pub seed: u64,
    /// Save `checkpoint_step_<n>/` under this directory every
    /// `snapshot_every` steps (0 disables periodic checkpoints).
    #[serde(default)]
    pub snapshot_dir: Option<std::path::PathBuf>,
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for NvsConfig {
    fn default() -> Self {
        NvsConfig {
            warmup_steps: 10_000,
            lr_encoder_max: 1e-4,
            lr_core_max: 1e-5,
            epochs: 100,
            rays_per_step: 1024,
            n_samples_per_ray: 16,
            seed: 0,
            snapshot_dir: None,
            snapshot_every: 0,
        }
    }
}

impl NvsConfig {
    /// Desk-scale preset: 2000 steps over a 20-scene dataset with the
    /// warmup compressed to fit inside the run and a lighter ray budget.
    pub fn desk() -> Self {
        NvsConfig { warmup_steps: 1000, n_samples_per_ray: 12, ..NvsConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be >= 1".into()));
        }
        if self.lr_encoder_max <= 0.0 || self.lr_core_max <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.rays_per_step == 0 || self.n_samples_per_ray < 2 || self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs, rays and samples must be positive".into()));
        }
        Ok(())
    }
}

/// One training batch: a source view conditioning the field, a target view
/// supplying ground-truth pixels, and the target pixel subset to fit.
pub struct NvsStepInput<'a> {
    pub sample: &'a SceneSample,
    pub source_cam: usize,
    pub target_cam: usize,
    pub pixels: &'a [usize],
}

/// Runs one NVS optimizer step and returns the photometric loss. The rng
/// drives stratified depth sampling only.
pub fn nvs_step(
    batch: &NvsStepInput<'_>,
    params: &mut ModelParams,
    states: &mut OptimizerStates,
    config: &NvsConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let source = &batch.sample.observations[batch.source_cam];
    let target = &batch.sample.observations[batch.target_cam];
    let (lo, hi) = batch.sample.scene.inflated_box();
    let s = config.n_samples_per_ray;
    let rays = batch.pixels.len();
    if rays == 0 {
        return Err(Error::InvalidConfig("empty pixel subset".into()));
    }

    let mut positions32 = Vec::with_capacity(rays * s * 3);
    let mut dirs32 = Vec::with_capacity(rays * s * 3);
    let mut points = Vec::with_capacity(rays * s);
    let mut deltas = Vec::with_capacity(rays * s);
    let mut target_rgb = Vec::with_capacity(rays * 3);
    for &pix in batch.pixels {
        let (x, y) = (pix % target.intrinsics.width, pix / target.intrinsics.width);
        let ray = ray_for_pixel(x as f64, y as f64, &target.intrinsics, &target.extrinsics);
        let (near, far) = ray_box_span(&ray, lo, hi).ok_or_else(|| {
            Error::InvalidConfig(format!("pixel {pix} does not see the workspace box"))
        })?;
        let samples = sample_along_ray(&ray, near, far, s, SampleMode::Stratified, rng)?;
        for p in &samples.positions {
            positions32.extend([p[0] as f32, p[1] as f32, p[2] as f32]);
            points.push(*p);
        }
        for _ in 0..s {
            dirs32.extend([
                ray.direction[0] as f32,
                ray.direction[1] as f32,
                ray.direction[2] as f32,
            ]);
        }
        deltas.extend(samples.deltas.iter().map(|&d| d as f32));
        let i = pix * 3;
        target_rgb.extend_from_slice(&target.image.pixels[i..i + 3]);
    }

    let cfg = params.config.clone();
    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: true, core: true, head: false });
    let image = tape.constant(source.image.to_tensor());
    let map = crate::field::encoder_graph(&mut tape, &nodes.encoder, image, cfg.image_height, cfg.image_width)?;
    let pos_enc = tape.constant(positional_encode_rows(&positions32, 3, cfg.m_position));
    let dir_enc = tape.constant(positional_encode_rows(&dirs32, 3, cfg.m_direction));
    let uv = tape.constant(crate::field::project_rows_clamped(&points, &source.intrinsics, &source.extrinsics));
    let deltas_node = tape.constant(Tensor::new(vec![rays * s, 1], deltas)?);
    let render = build_render_batch(
        &mut tape,
        &cfg,
        &nodes,
        pos_enc,
        dir_enc,
        uv,
        deltas_node,
        s,
        batch.sample.scene.background_color,
        FeatureSource::Node(map),
    )?;
    let target_node = tape.constant(Tensor::new(vec![rays, 3], target_rgb)?);
    let diff = tape.sub(render.pixels, target_node)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    let loss = tape.scale(total, 1.0 / (rays * 3) as f32)?;
    let loss_value = tape.value(loss).data()[0];

    let grads = tape.backward(loss)?;
    let lr_enc = warmup_lr(config.lr_encoder_max, config.warmup_steps, step);
    let lr_core = warmup_lr(config.lr_core_max, config.warmup_steps, step);
    states.encoder.apply(&mut params.encoder, &nodes.encoder, &tape, &grads, lr_enc)?;
    states.core.apply(&mut params.core, &nodes.core, &tape, &grads, lr_core)?;
    Ok(loss_value)
}

/// Full NVS training loop: `epochs` shuffled passes over the dataset, one
/// random (source, target) pair per scene visit.
pub fn train_nvs(
    dataset: &[SceneSample],
    mut params: ModelParams,
    config: &NvsConfig,
) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::BadDataset("empty dataset".into()));
    }
    for s in dataset {
        if s.observations.len() < 2 {
            return Err(Error::BadDataset(format!("scene {} has fewer than 2 views", s.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states = OptimizerStates::new(&params);
    let mut log = Vec::with_capacity(config.epochs * dataset.len());

    // per (scene, camera) pixel pools restricted to box-hitting rays
    let pools: Vec<Vec<Vec<usize>>> = dataset
        .iter()
        .map(|s| {
            s.observations
                .iter()
                .map(|o| rays_hitting_box(&o.intrinsics, &o.extrinsics, &s.scene))
                .collect()
        })
        .collect();

    let mut step: u64 = 0;
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for scene_idx in order {
            let sample = &dataset[scene_idx];
            let n_cams = sample.observations.len();
            let source_cam = rng.gen_range(0..n_cams);
            let target_cam = rng.gen_range(0..n_cams);
            let pool = &pools[scene_idx][target_cam];
            let count = config.rays_per_step.min(pool.len());
            let pixels: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let batch = NvsStepInput { sample, source_cam, target_cam, pixels: &pixels };
            let loss = nvs_step(&batch, &mut params, &mut states, config, step, &mut rng)?;
            if step % 200 == 0 {
                eprintln!("nvs step {step}: loss {loss:.5}");
            }
            if let (Some(dir), every) = (&config.snapshot_dir, config.snapshot_every) {
                if every > 0 && (step + 1) % every as u64 == 0 {
                    crate::field::save_checkpoint(&params, &dir.join(format!("checkpoint_step_{}", step + 1)))?;
                }
            }
            log.push(TrainLogRow {
                step,
                loss,
                lr_encoder: warmup_lr(config.lr_encoder_max, config.warmup_steps, step),
                lr_core: warmup_lr(config.lr_core_max, config.warmup_steps, step),
                lr_head: 0.0,
            });
            step += 1;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ModelConfig;
    use crate::scene::{make_object_set, ObjectSetName};

    fn tiny_dataset(n: usize, wh: usize, seed: u64) -> Vec<SceneSample> {
        let set = make_object_set(ObjectSetName::Single).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| crate::dataset::synth_scene(&set, 1, wh, wh, &mut rng, format!("s{i}")).unwrap())
            .collect()
    }

    fn tiny_config(wh: usize) -> ModelConfig {
        ModelConfig {
            hidden_width: 32,
            core_blocks: 2,
            head_blocks: 1,
            feature_channels: 16,
            image_width: wh,
            image_height: wh,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn perfect_predictions_have_zero_loss_and_zero_gradients() {
        // a constant-color scene where the field can't matter: compare the
        // rendered pixel against itself by substituting the target pixels
        // with the render. Implemented via the loss identity: loss uses
        // (render - target)^2, so target == render gives exactly zero loss
        // and zero gradient for every parameter.
        let dataset = tiny_dataset(1, 32, 5);
        let params = ModelParams::init(tiny_config(32), 11).unwrap();
        let sample = &dataset[0];
        // render the first 8 box-hitting pixels with the current params
        let pool = rays_hitting_box(
            &sample.observations[0].intrinsics,
            &sample.observations[0].extrinsics,
            &sample.scene,
        );
        let pixels: Vec<usize> = pool.into_iter().take(8).collect();

        // build the same graph twice: once to harvest the rendered pixels,
        // once as a training step against them
        let mut doctored = sample.clone();
        let config = NvsConfig {
            epochs: 1,
            rays_per_step: 8,
            n_samples_per_ray: 4,
            seed: 3,
            ..NvsConfig::desk()
        };
        let mut p1 = params.clone();
        let mut st1 = OptimizerStates::new(&p1);
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let batch = NvsStepInput { sample, source_cam: 1, target_cam: 0, pixels: &pixels };
        // step at lr 0 (step index 0 of warmup) leaves params unchanged
        let _ = nvs_step(&batch, &mut p1, &mut st1, &config, 0, &mut rng1).unwrap();
        assert_eq!(p1.digest(), params.digest());

        // harvest render values for those pixels with the same rng stream,
        // then overwrite the target image and verify the loss vanishes
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let mut p2 = params.clone();
        let mut st2 = OptimizerStates::new(&p2);
        // reproduce the rendered pixels by running the identical step and
        // reading them from a probe image
        let probe = render_probe(&params, sample, &pixels, 4, &mut rng2).unwrap();
        for (&pix, rgb) in pixels.iter().zip(probe.chunks(3)) {
            doctored.observations[0].image.pixels[pix * 3..pix * 3 + 3].copy_from_slice(rgb);
        }
        let mut rng3 = ChaCha8Rng::seed_from_u64(9);
        let batch = NvsStepInput { sample: &doctored, source_cam: 1, target_cam: 0, pixels: &pixels };
        let loss = nvs_step(&batch, &mut p2, &mut st2, &config, 5_000_000, &mut rng3).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
        // gradients are zero, so even a full-lr step changes nothing
        assert_eq!(p2.digest(), params.digest());
    }

    // renders the given target pixels with the same sampling stream the
    // nvs step would use
    fn render_probe(
        params: &ModelParams,
        sample: &SceneSample,
        pixels: &[usize],
        s: usize,
        rng: &mut ChaCha8Rng,
    ) -> crate::error::Result<Vec<f32>> {
        let source = &sample.observations[1];
        let target = &sample.observations[0];
        let (lo, hi) = sample.scene.inflated_box();
        let cfg = &params.config;
        let mut positions32 = Vec::new();
        let mut dirs32 = Vec::new();
        let mut points = Vec::new();
        let mut deltas = Vec::new();
        for &pix in pixels {
            let (x, y) = (pix % target.intrinsics.width, pix / target.intrinsics.width);
            let ray = ray_for_pixel(x as f64, y as f64, &target.intrinsics, &target.extrinsics);
            let (near, far) = ray_box_span(&ray, lo, hi).unwrap();
            let samples = sample_along_ray(&ray, near, far, s, SampleMode::Stratified, rng)?;
            for p in &samples.positions {
                positions32.extend([p[0] as f32, p[1] as f32, p[2] as f32]);
                points.push(*p);
            }
            for _ in 0..s {
                dirs32.extend([
                    ray.direction[0] as f32,
                    ray.direction[1] as f32,
                    ray.direction[2] as f32,
                ]);
            }
            deltas.extend(samples.deltas.iter().map(|&d| d as f32));
        }
        let mut tape = Tape::new();
        let nodes = stamp_params(&mut tape, params, Trainable { encoder: false, core: false, head: false });
        let image = tape.constant(source.image.to_tensor());
        let map = crate::field::encoder_graph(&mut tape, &nodes.encoder, image, cfg.image_height, cfg.image_width)?;
        let pos_enc = tape.constant(positional_encode_rows(&positions32, 3, cfg.m_position));
        let dir_enc = tape.constant(positional_encode_rows(&dirs32, 3, cfg.m_direction));
        let uv = tape.constant(crate::field::project_rows_clamped(&points, &source.intrinsics, &source.extrinsics));
        let deltas_node = tape.constant(Tensor::new(vec![pixels.len() * s, 1], deltas)?);
        let render = build_render_batch(
            &mut tape,
            cfg,
            &nodes,
            pos_enc,
            dir_enc,
            uv,
            deltas_node,
            s,
            sample.scene.background_color,
            FeatureSource::Node(map),
        )?;
        Ok(tape.value(render.pixels).data().to_vec())
    }

    #[test]
    fn two_hundred_steps_reduce_the_loss_on_a_tiny_scene() {
        let dataset = tiny_dataset(1, 32, 6);
        let params = ModelParams::init(tiny_config(32), 12).unwrap();
        let config = NvsConfig {
            epochs: 200,
            rays_per_step: 128,
            n_samples_per_ray: 8,
            warmup_steps: 100,
            lr_encoder_max: 5e-4,
            lr_core_max: 5e-4,
            seed: 1,
            ..NvsConfig::desk()
        };
        let (_trained, log) = train_nvs(&dataset, params, &config).unwrap();
        assert_eq!(log.len(), 200);
        let first = log[0].loss;
        let last = log.last().unwrap().loss;
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let dataset = tiny_dataset(2, 32, 7);
        let params = ModelParams::init(tiny_config(32), 13).unwrap();
        let config = NvsConfig {
            epochs: 3,
            rays_per_step: 64,
            n_samples_per_ray: 4,
            warmup_steps: 10,
            seed: 21,
            ..NvsConfig::desk()
        };
        let (a, _) = train_nvs(&dataset, params.clone(), &config).unwrap();
        let (b, _) = train_nvs(&dataset, params, &config).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
