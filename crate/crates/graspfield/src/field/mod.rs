//! The neural grasp-success field.
//!
//! An image encoder turns one observation into a per-pixel feature map; a
//! coordinate MLP (the field core) maps encoded position, encoded direction
//! and the feature sampled at the projected position to color and density
//! for volumetric rendering; a grasp head reads the core's hidden states
//! and scores grasp success. The score of a grasp pose is the summed head
//! output over a 4-point bundle spaced along the approach direction.

mod checkpoint;
mod core;
mod encoder;
mod encoding;
mod volrender;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use core::{field_query, grasp_score, FieldOutput};
pub(crate) use core::{
    build_pose_bundle, build_theta, head_graph, head_input_for_fixed, project_rows_clamped,
    stamp_params, theta_for_view, FeatureSource, PoseInput, Trainable,
};
#[cfg(test)]
pub(crate) use core::grasp_score_with_map;
pub use encoder::{compute_feature_map, encode_image};
pub(crate) use encoder::encoder_graph;
pub use encoding::positional_encode;
pub(crate) use encoding::positional_encode_rows;
pub use volrender::{psnr, render_view, render_view_with_opacity, volumetric_render};
pub(crate) use volrender::build_render_batch;

pub use crate::scene::GraspCandidate;

use crate::camera::{CameraExtrinsics, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::scene::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One conditioning input: an image with known camera.
#[derive(Debug, Clone)]
pub struct CameraObservation {
    pub image: Image,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl CameraObservation {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.extrinsics.validate()?;
        if self.image.width != self.intrinsics.width || self.image.height != self.intrinsics.height {
            return Err(Error::ShapeMismatch {
                op: "observation",
                detail: format!(
                    "image {}x{} vs intrinsics {}x{}",
                    self.image.width, self.image.height, self.intrinsics.width, self.intrinsics.height
                ),
            });
        }
        Ok(())
    }
}

/// Architecture hyperparameters; they are burned into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frequency count for position encoding.
    pub m_position: usize,
    /// Frequency count for direction encoding.
    pub m_direction: usize,
    /// Channels of the per-pixel feature map.
    pub feature_channels: usize,
    /// Hidden width of the core and head MLPs.
    pub hidden_width: usize,
    /// Residual blocks in the field core.
    pub core_blocks: usize,
    /// Residual blocks in the grasp head.
    pub head_blocks: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Signed offsets (meters) of the pose bundle along the approach
    /// direction, centered on the candidate position with 2.5 mm spacing.
    pub bundle_offsets: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m_position: 6,
            m_direction: 4,
            feature_channels: 64,
            hidden_width: 128,
            core_blocks: 4,
            head_blocks: 2,
            image_width: 96,
            image_height: 96,
            bundle_offsets: vec![-0.00375, -0.00125, 0.00125, 0.00375],
        }
    }
}

impl ModelConfig {
    pub fn position_encoding_dim(&self) -> usize {
        2 * self.m_position * 3
    }

    pub fn direction_encoding_dim(&self) -> usize {
        2 * self.m_direction * 3
    }

    pub fn core_input_dim(&self) -> usize {
        self.position_encoding_dim() + self.direction_encoding_dim() + self.feature_channels
    }

    /// Core trunk output plus one skip per block.
    pub fn head_input_dim(&self) -> usize {
        self.hidden_width * (self.core_blocks + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_position == 0 || self.m_direction == 0 {
            return Err(Error::InvalidConfig("encoding frequency counts must be >= 1".into()));
        }
        if self.core_blocks == 0 || self.head_blocks == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidConfig("core/head sizes must be positive".into()));
        }
        if self.bundle_offsets.is_empty() {
            return Err(Error::InvalidConfig("bundle needs at least one offset".into()));
        }
        if self.image_width < 2 || self.image_height < 2 {
            return Err(Error::InvalidConfig("images must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// A named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        ParamTensor { name: name.into(), shape, data }
    }
}

/// All model weights, grouped by subnetwork, plus freeze flags consumed by
/// the training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<ParamTensor>,
    pub core: Vec<ParamTensor>,
    pub head: Vec<ParamTensor>,
    pub freeze_encoder: bool,
    pub freeze_core: bool,
}

/// Encoder conv stages: (in_channels, out_channels), 3x3, stride 2, pad 1.
pub(crate) const ENCODER_STAGES: [(usize, usize); 4] = [(3, 16), (16, 32), (32, 64), (64, 64)];

pub(crate) fn encoder_concat_channels() -> usize {
    ENCODER_STAGES.iter().map(|&(_, c)| c).sum()
}

impl ModelParams {
    /// Fresh parameters with fan-in-scaled uniform init; the head's output
    /// layer starts small so initial grasp scores are near zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |name: &str, fan_in: usize, fan_out: usize, gain: f32, out: &mut Vec<ParamTensor>| {
            let bound = gain * (6.0 / fan_in as f32).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            out.push(ParamTensor::new(format!("{name}.weight"), vec![fan_in, fan_out], w));
            out.push(ParamTensor::new(format!("{name}.bias"), vec![1, fan_out], vec![0.0; fan_out]));
        };

        let mut encoder = Vec::new();
        for (i, &(cin, cout)) in ENCODER_STAGES.iter().enumerate() {
            layer(&format!("encoder.stage{i}"), 9 * cin, cout, 1.0, &mut encoder);
        }
        layer("encoder.fuse", encoder_concat_channels(), config.feature_channels, 1.0, &mut encoder);

        let hw = config.hidden_width;
        let mut core = Vec::new();
        layer("core.input", config.core_input_dim(), hw, 1.0, &mut core);
        for b in 0..config.core_blocks {
            layer(&format!("core.block{b}.fc1"), hw, hw, 1.0, &mut core);
            layer(&format!("core.block{b}.fc2"), hw, hw, 1.0, &mut core);
        }
        layer("core.output", hw, 4, 1.0, &mut core);

        let mut head = Vec::new();
        layer("head.input", config.head_input_dim(), hw, 1.0, &mut head);
        for b in 0..config.head_blocks {
            layer(&format!("head.block{b}.fc1"), hw, hw, 1.0, &mut head);
            layer(&format!("head.block{b}.fc2"), hw, hw, 1.0, &mut head);
        }
        layer("head.output", hw, 1, 0.01, &mut head);

        let params = ModelParams {
            config,
            encoder,
            core,
            head,
            freeze_encoder: false,
            freeze_core: false,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks the dimension chain between all subnetworks.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expect = |pt: &ParamTensor, shape: &[usize]| -> Result<()> {
            if pt.shape != shape {
                return Err(Error::BadCheckpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    pt.name, pt.shape, shape
                )));
            }
            let numel: usize = pt.shape.iter().product();
            if numel != pt.data.len() {
                return Err(Error::BadCheckpoint(format!("{} data length mismatch", pt.name)));
            }
            Ok(())
        };

        let mut want: Vec<Vec<usize>> = Vec::new();
        for &(cin, cout) in ENCODER_STAGES.iter() {
            want.push(vec![9 * cin, cout]);
            want.push(vec![1, cout]);
        }
        want.push(vec![encoder_concat_channels(), self.config.feature_channels]);
        want.push(vec![1, self.config.feature_channels]);
        if self.encoder.len() != want.len() {
            return Err(Error::BadCheckpoint(format!(
                "encoder has {} tensors, expected {}",
                self.encoder.len(),
                want.len()
            )));
        }
        for (pt, shape) in self.encoder.iter().zip(&want) {
            expect(pt, shape)?;
        }

        let hw = self.config.hidden_width;
        let mut want: Vec<Vec<usize>> = vec![vec![self.config.core_input_dim(), hw], vec![1, hw]];
        for _ in 0..self.config.core_blocks {
            want.push(vec![hw, hw]);
            want.push(vec![1, hw]);
            want.push(vec![hw, hw]);
            want.push(vec![1, hw]);
        }
        want.push(vec![hw, 4]);
        want.push(vec![1, 4]);
        if self.core.len() != want.len() {
            return Err(Error::BadCheckpoint("core tensor count mismatch".into()));
        }
        for (pt, shape) in self.core.iter().zip(&want) {
            expect(pt, shape)?;
        }

        let mut want: Vec<Vec<usize>> = vec![vec![self.config.head_input_dim(), hw], vec![1, hw]];
        for _ in 0..self.config.head_blocks {
            want.push(vec![hw, hw]);
            want.push(vec![1, hw]);
            want.push(vec![hw, hw]);
            want.push(vec![1, hw]);
        }
        want.push(vec![hw, 1]);
        want.push(vec![1, 1]);
        if self.head.len() != want.len() {
            return Err(Error::BadCheckpoint("head tensor count mismatch".into()));
        }
        for (pt, shape) in self.head.iter().zip(&want) {
            expect(pt, shape)?;
        }
        Ok(())
    }

    pub fn all_tensors(&self) -> impl Iterator<Item = &ParamTensor> {
        self.encoder.iter().chain(self.core.iter()).chain(self.head.iter())
    }

    /// Order-independent content digest, used by freeze contracts.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for pt in self.all_tensors() {
            mix(pt.name.as_bytes());
            for v in &pt.data {
                mix(&v.to_le_bytes());
            }
        }
        h
    }

    pub fn group_digest(&self, group: &[ParamTensor]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for pt in group {
            for v in &pt.data {
                for &b in &v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}


#[doc(hidden)]
pub mod test_hooks {
    //! Graph-level access for gradient suites in integration tests.

    use super::core::{core_graph, head_graph, project_node, stamp_params, Trainable};
    use super::encoding::{encode_direction_row, posenc_node};
    use super::{FeatureSource, ModelParams, PoseInput};
    use crate::camera::{CameraExtrinsics, CameraIntrinsics};
    use crate::error::Result;
    use crate::tensor::{NodeId, Tape, Tensor};

    pub fn posenc(tape: &mut Tape, x: NodeId, m: usize) -> Result<NodeId> {
        posenc_node(tape, x, m)
    }


    pub fn project(tape: &mut Tape, x: NodeId, k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Result<NodeId> {
        project_node(tape, x, k, rt)
    }

    /// Grasp score of `[n, 3]` candidate positions as a scalar sum; the
    /// full encoded-position -> core -> head -> bundle-sum composition.
    pub fn theta_sum(
        tape: &mut Tape,
        x: NodeId,
        params: &ModelParams,
        direction: [f64; 3],
        k: &CameraIntrinsics,
        rt: &CameraExtrinsics,
        map: &Tensor,
    ) -> Result<NodeId> {
        let nodes = stamp_params(tape, params, Trainable { encoder: false, core: false, head: false });
        let theta = super::build_theta(
            tape,
            &params.config,
            &nodes,
            PoseInput::Node(x),
            direction,
            k,
            rt,
            FeatureSource::Cached(map),
        )?;
        tape.sum_all(theta)
    }

    /// Encoded position and direction through core and head with a fixed
    /// per-point feature row: the image-free composition.
    pub fn core_head_scalar(
        tape: &mut Tape,
        x: NodeId,
        params: &ModelParams,
        direction: [f64; 3],
        feature_row: &[f32],
    ) -> Result<NodeId> {
        let cfg = &params.config;
        let nodes = stamp_params(tape, params, Trainable { encoder: false, core: false, head: false });
        let n = tape.value(x).rows();
        let enc = posenc_node(tape, x, cfg.m_position)?;
        let dir = tape.constant(encode_direction_row(direction, cfg.m_direction));
        let dir = tape.broadcast_rows(dir, n)?;
        let feat = tape.constant(Tensor::row(feature_row.to_vec()));
        let feat = tape.broadcast_rows(feat, n)?;
        let input = tape.concat_cols(&[enc, dir, feat])?;
        let core = core_graph(tape, cfg, &nodes.core, input, false)?;
        let mut head_in = vec![core.trunk];
        head_in.extend(core.skips.iter().copied());
        let head_in = tape.concat_cols(&head_in)?;
        let scores = head_graph(tape, cfg, &nodes.head, head_in)?;
        tape.sum_all(scores)
    }

    /// Sum of grasp scores over several views for `[n, 3]` positions.
    #[allow(clippy::too_many_arguments)]
    pub fn objective_sum(
        tape: &mut Tape,
        x: NodeId,
        params: &ModelParams,
        direction: [f64; 3],
        views: &[(&CameraIntrinsics, &CameraExtrinsics, &Tensor)],
    ) -> Result<NodeId> {
        let nodes = stamp_params(tape, params, Trainable { encoder: false, core: false, head: false });
        let bundle = super::build_pose_bundle(tape, &params.config, PoseInput::Node(x), direction)?;
        let mut acc: Option<NodeId> = None;
        for (k, rt, map) in views {
            let theta = super::theta_for_view(
                tape,
                &params.config,
                &nodes,
                &bundle,
                k,
                rt,
                FeatureSource::Cached(map),
            )?;
            acc = Some(match acc {
                None => theta,
                Some(prev) => tape.add(prev, theta)?,
            });
        }
        tape.sum_all(acc.expect("at least one view"))
    }
}
