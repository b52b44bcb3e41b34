//! Grasp-head training: categorical cross-entropy over one positive and
//! many sampled negatives per scene, with the backbone frozen (transfer)
//! or trained jointly (the no-pretraining baseline).

use super::{OptimizerStates, TrainLogRow};
use crate::dataset::SceneSample;
use crate::error::{Error, Result};
use crate::field::{
    build_pose_bundle, compute_feature_map, encoder_graph, head_graph, head_input_for_fixed,
    stamp_params, theta_for_view, CameraObservation, FeatureSource, ModelParams, PoseInput,
    Trainable,
};
use crate::scene::{sample_negative_grasps, GraspLabel};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraspTrainConfig {
    pub lr: f64,
    pub negatives_per_scene: usize,
    pub epochs: usize,
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Save `checkpoint_step_<n>/` under this directory every
    /// `snapshot_every` steps (0 disables periodic checkpoints).
    #[serde(default)]
    pub snapshot_dir: Option<std::path::PathBuf>,
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for GraspTrainConfig {
    fn default() -> Self {
        GraspTrainConfig {
            lr: 1e-4,
            negatives_per_scene: 2047,
            epochs: 250,
            freeze_backbone: true,
            seed: 0,
            snapshot_dir: None,
            snapshot_every: 0,
        }
    }
}

impl GraspTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_scene == 0 {
            return Err(Error::InvalidConfig("need at least one negative per scene".into()));
        }
        if self.lr <= 0.0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("lr and epochs must be positive".into()));
        }
        Ok(())
    }
}

fn split_positive(labels: &[GraspLabel]) -> Result<(usize, Vec<[f64; 3]>, [f64; 3])> {
    let mut positive = None;
    for (i, l) in labels.iter().enumerate() {
        if l.success == 1 {
            if positive.is_some() {
                return Err(Error::InvalidConfig("more than one positive label in a candidate set".into()));
            }
            positive = Some(i);
        }
    }
    let pos = positive.ok_or_else(|| Error::InvalidConfig("candidate set has no positive label".into()))?;
    let xs: Vec<[f64; 3]> = labels.iter().map(|l| l.pose.x).collect();
    Ok((pos, xs, labels[pos].pose.d))
}

/// Cross-entropy of the softmax over candidate scores against the single
/// positive: `logsumexp(scores) - score_positive`.
fn loss_from_scores(tape: &mut Tape, scores: NodeId, positive: usize) -> Result<NodeId> {
    let lse = tape.log_sum_exp(scores)?;
    let pos = tape.gather_rows(scores, &[positive as i64])?;
    tape.sub(lse, pos)
}

/// Categorical cross-entropy over one labeled candidate set under one
/// observation. Exactly one label must be positive; all candidates share
/// the positive's approach direction.
pub fn grasp_loss(labels: &[GraspLabel], obs: &CameraObservation, params: &ModelParams) -> Result<f32> {
    obs.validate()?;
    let (positive, xs, direction) = split_positive(labels)?;
    let map = compute_feature_map(params, &obs.image)?;
    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: false, core: false, head: false });
    let bundle = build_pose_bundle(&mut tape, &params.config, PoseInput::Fixed(&xs), direction)?;
    let scores = theta_for_view(
        &mut tape,
        &params.config,
        &nodes,
        &bundle,
        &obs.intrinsics,
        &obs.extrinsics,
        FeatureSource::Cached(&map),
    )?;
    let loss = loss_from_scores(&mut tape, scores, positive)?;
    Ok(tape.value(loss).data()[0])
}

/// Cached per-(scene, camera) feature maps for frozen-backbone training.
struct FeatureCache {
    maps: Vec<Vec<Option<Tensor>>>,
}

impl FeatureCache {
    fn new(dataset: &[SceneSample]) -> Self {
        FeatureCache { maps: dataset.iter().map(|s| vec![None; s.observations.len()]).collect() }
    }

    fn get(&mut self, params: &ModelParams, dataset: &[SceneSample], scene: usize, cam: usize) -> Result<&Tensor> {
        if self.maps[scene][cam].is_none() {
            let map = compute_feature_map(params, &dataset[scene].observations[cam].image)?;
            self.maps[scene][cam] = Some(map);
        }
        Ok(self.maps[scene][cam].as_ref().unwrap())
    }
}

/// Frozen backbone: the core runs forward untracked, its output rows are
/// detached, and only the head graph carries gradients.
fn step_frozen(
    params: &mut ModelParams,
    states: &mut OptimizerStates,
    lr: f64,
    obs: &CameraObservation,
    map: &Tensor,
    labels: &[GraspLabel],
) -> Result<f32> {
    let (positive, xs, direction) = split_positive(labels)?;
    let cfg = params.config.clone();
    let head_in = head_input_for_fixed(params, &xs, direction, &obs.intrinsics, &obs.extrinsics, map)?;

    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: false, core: false, head: true });
    let input = tape.constant(head_in);
    let per_point = head_graph(&mut tape, &cfg, &nodes.head, input)?;
    let scores = tape.sum_groups(per_point, cfg.bundle_offsets.len())?;
    let loss = loss_from_scores(&mut tape, scores, positive)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    states.head.apply(&mut params.head, &nodes.head, &tape, &grads, lr)?;
    Ok(loss_value)
}

/// Joint training: encoder, core and head all receive gradients from the
/// grasp objective.
fn step_joint(
    params: &mut ModelParams,
    states: &mut OptimizerStates,
    lr: f64,
    obs: &CameraObservation,
    labels: &[GraspLabel],
) -> Result<f32> {
    let (positive, xs, direction) = split_positive(labels)?;
    let cfg = params.config.clone();
    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: true, core: true, head: true });
    let image = tape.constant(obs.image.to_tensor());
    let map = encoder_graph(&mut tape, &nodes.encoder, image, cfg.image_height, cfg.image_width)?;
    let bundle = build_pose_bundle(&mut tape, &cfg, PoseInput::Fixed(&xs), direction)?;
    let scores = theta_for_view(
        &mut tape,
        &cfg,
        &nodes,
        &bundle,
        &obs.intrinsics,
        &obs.extrinsics,
        FeatureSource::Node(map),
    )?;
    let loss = loss_from_scores(&mut tape, scores, positive)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    states.encoder.apply(&mut params.encoder, &nodes.encoder, &tape, &grads, lr)?;
    states.core.apply(&mut params.core, &nodes.core, &tape, &grads, lr)?;
    states.head.apply(&mut params.head, &nodes.head, &tape, &grads, lr)?;
    Ok(loss_value)
}

fn train_loop(
    dataset: &[SceneSample],
    mut params: ModelParams,
    config: &GraspTrainConfig,
) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::BadDataset("empty dataset".into()));
    }
    for s in dataset {
        if !s.labels.iter().any(|l| l.success == 1) {
            return Err(Error::BadDataset(format!("scene {} has no positive grasp label", s.id)));
        }
    }
    params.freeze_encoder = config.freeze_backbone;
    params.freeze_core = config.freeze_backbone;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states = OptimizerStates::new(&params);
    let mut cache = FeatureCache::new(dataset);
    let mut log = Vec::with_capacity(config.epochs * dataset.len());
    let mut step: u64 = 0;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for scene_idx in order {
            let sample = &dataset[scene_idx];
            let cam = rng.gen_range(0..sample.observations.len());
            // one positive from the stored labels plus fresh negatives
            let positive = sample
                .labels
                .iter()
                .find(|l| l.success == 1)
                .copied()
                .expect("validated above");
            let mut labels = vec![positive];
            labels.extend(sample_negative_grasps(&sample.scene, config.negatives_per_scene, &mut rng)?);

            let obs = &sample.observations[cam];
            let loss = if config.freeze_backbone {
                let map = cache.get(&params, dataset, scene_idx, cam)?.clone();
                step_frozen(&mut params, &mut states, config.lr, obs, &map, &labels)?
            } else {
                step_joint(&mut params, &mut states, config.lr, obs, &labels)?
            };
            if step % 250 == 0 {
                eprintln!("grasp step {step}: loss {loss:.4}");
            }
            if let (Some(dir), every) = (&config.snapshot_dir, config.snapshot_every) {
                if every > 0 && (step + 1) % every as u64 == 0 {
                    crate::field::save_checkpoint(&params, &dir.join(format!("checkpoint_step_{}", step + 1)))?;
                }
            }
            let lr_backbone = if config.freeze_backbone { 0.0 } else { config.lr };
            log.push(TrainLogRow {
                step,
                loss,
                lr_encoder: lr_backbone,
                lr_core: lr_backbone,
                lr_head: config.lr,
            });
            step += 1;
        }
    }
    Ok((params, log))
}

/// Transfer learning: freezes the backbone and trains only the grasp head.
/// The returned params carry the freeze flags they were trained under.
pub fn train_grasp(
    dataset: &[SceneSample],
    params: ModelParams,
    config: &GraspTrainConfig,
) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    train_loop(dataset, params, config)
}

/// The no-pretraining baseline: fresh parameters trained jointly on the
/// grasp objective with the same loop and budget.
pub fn train_joint_baseline(
    dataset: &[SceneSample],
    params: ModelParams,
    config: &GraspTrainConfig,
) -> Result<(ModelParams, Vec<TrainLogRow>)> {
    let cfg = GraspTrainConfig { freeze_backbone: false, ..config.clone() };
    train_loop(dataset, params, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{grasp_score, ModelConfig};
    use crate::scene::{make_object_set, nearest_valid_distance, GraspCandidate, ObjectSetName};

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

    fn tiny_train_config(freeze: bool) -> GraspTrainConfig {
        GraspTrainConfig {
            negatives_per_scene: 63,
            epochs: 2,
            freeze_backbone: freeze,
            seed: 5,
            ..GraspTrainConfig::default()
        }
    }

    #[test]
    fn equal_scores_give_ln_n_loss() {
        // zeroed head scores every candidate identically
        let dataset = tiny_dataset(1, 24, 1);
        let mut params = ModelParams::init(tiny_config(24), 2).unwrap();
        for pt in params.head.iter_mut() {
            for v in pt.data.iter_mut() {
                *v = 0.0;
            }
        }
        let sample = &dataset[0];
        let mut labels = vec![sample.labels[0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        labels.extend(sample_negative_grasps(&sample.scene, 2047, &mut rng).unwrap());
        let loss = grasp_loss(&labels, &sample.observations[0], &params).unwrap();
        let want = (2048.0f32).ln();
        assert!((loss - want).abs() < 1e-4, "{loss} vs {want}");
    }

    #[test]
    fn dominant_positive_score_drives_loss_to_zero() {
        // 3-candidate toy against a scalar softmax oracle
        let scores = [2.0f32, 0.0, 0.0];
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![3, 1], scores.to_vec()).unwrap(), false);
        let loss = loss_from_scores(&mut tape, s, 0).unwrap();
        let want = -(scores[0].exp() / scores.iter().map(|v| v.exp()).sum::<f32>()).ln();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-6);

        // and the limit: a huge positive score zeroes the loss
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![3, 1], vec![40.0, 0.0, 0.0]).unwrap(), false);
        let loss = loss_from_scores(&mut tape, s, 0).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-6);
    }

    #[test]
    fn duplicate_positives_are_rejected() {
        let dataset = tiny_dataset(1, 24, 4);
        let params = ModelParams::init(tiny_config(24), 5).unwrap();
        let sample = &dataset[0];
        let labels = vec![sample.labels[0], sample.labels[0]];
        assert!(grasp_loss(&labels, &sample.observations[0], &params).is_err());
    }

    #[test]
    fn freeze_keeps_backbone_bits_identical() {
        let dataset = tiny_dataset(2, 24, 6);
        let params = ModelParams::init(tiny_config(24), 7).unwrap();
        let enc_before = params.group_digest(&params.encoder);
        let core_before = params.group_digest(&params.core);
        let head_before = params.group_digest(&params.head);
        let (trained, log) = train_grasp(&dataset, params, &tiny_train_config(true)).unwrap();
        assert_eq!(log.len(), 4);
        assert_eq!(trained.group_digest(&trained.encoder), enc_before);
        assert_eq!(trained.group_digest(&trained.core), core_before);
        assert_ne!(trained.group_digest(&trained.head), head_before);
        assert!(trained.freeze_encoder && trained.freeze_core);
    }

    #[test]
    fn joint_baseline_moves_backbone_weights() {
        let dataset = tiny_dataset(1, 24, 8);
        let params = ModelParams::init(tiny_config(24), 9).unwrap();
        let enc_before = params.group_digest(&params.encoder);
        let core_before = params.group_digest(&params.core);
        let cfg = GraspTrainConfig { epochs: 1, ..tiny_train_config(false) };
        let (trained, _) = train_joint_baseline(&dataset, params, &cfg).unwrap();
        assert_ne!(trained.group_digest(&trained.encoder), enc_before);
        assert_ne!(trained.group_digest(&trained.core), core_before);
        assert!(!trained.freeze_encoder && !trained.freeze_core);
    }

    #[test]
    fn same_seed_trains_identical_weights() {
        let dataset = tiny_dataset(2, 24, 10);
        let params = ModelParams::init(tiny_config(24), 11).unwrap();
        let cfg = tiny_train_config(false);
        let (a, _) = train_joint_baseline(&dataset, params.clone(), &cfg).unwrap();
        let (b, _) = train_joint_baseline(&dataset, params, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn overfitting_one_scene_separates_positive_from_negatives() {
        // after enough steps on a single scene the positive outscores a
        // fresh batch of random negatives almost always
        let dataset = tiny_dataset(1, 24, 12);
        let params = ModelParams::init(tiny_config(24), 13).unwrap();
        let cfg = GraspTrainConfig {
            lr: 3e-4,
            negatives_per_scene: 255,
            epochs: 120,
            freeze_backbone: true,
            seed: 14,
            ..GraspTrainConfig::default()
        };
        let sample = &dataset[0];
        let probe_before = {
            let mut labels = vec![sample.labels[0]];
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            labels.extend(sample_negative_grasps(&sample.scene, 255, &mut rng).unwrap());
            grasp_loss(&labels, &sample.observations[0], &params).unwrap()
        };
        let (trained, log) = train_grasp(&dataset, params, &cfg).unwrap();
        let probe_after = {
            let mut labels = vec![sample.labels[0]];
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            labels.extend(sample_negative_grasps(&sample.scene, 255, &mut rng).unwrap());
            grasp_loss(&labels, &sample.observations[0], &trained).unwrap()
        };
        assert!(
            probe_after < probe_before,
            "probe loss did not improve: {probe_before} -> {probe_after}"
        );
        assert!(log.last().unwrap().loss < log[0].loss);

        let map = compute_feature_map(&trained, &sample.observations[0].image).unwrap();
        let pos_score = grasp_score(
            &sample.labels[0].pose,
            &sample.observations[0],
            &trained,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let negs = sample_negative_grasps(&sample.scene, 100, &mut rng).unwrap();
        let beaten = negs
            .iter()
            .filter(|l| {
                crate::field::grasp_score_with_map(&l.pose, &sample.observations[0], &trained, &map)
                    .unwrap()
                    < pos_score
            })
            .count();
        assert!(beaten >= 95, "positive only beats {beaten}/100 negatives");
        // sanity: those negatives really are far from the valid set
        for l in &negs {
            assert!(nearest_valid_distance(l.pose.x, &sample.scene).unwrap() > 0.005);
        }
        let _ = GraspCandidate::DOWN;
    }
}
