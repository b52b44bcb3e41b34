//! Field core and grasp head graphs.
//!
//! The core consumes concat(encoded position, encoded direction, pixel
//! feature), runs an input layer plus residual blocks, and emits color
//! (sigmoid) and density (softplus). Each block's output is kept as a skip;
//! the head reads concat(trunk, skips) per point and a grasp pose's score
//! is the summed head output over its bundle points.

use super::encoding::{encode_direction_row, posenc_node, positional_encode_rows};
use super::{CameraObservation, ModelConfig, ModelParams};
use crate::camera::{CameraExtrinsics, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::scene::GraspCandidate;
use crate::tensor::{NodeId, Tape, Tensor};

/// Depth floor for the differentiable projection; keeps 1/z finite if a
/// candidate drifts behind a camera. Desk cameras see the whole inflated
/// workspace at depth > 0.3 m, so the clamp is inert in normal use.
pub(crate) const MIN_CAMERA_DEPTH: f32 = 0.05;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Trainable {
    pub encoder: bool,
    pub core: bool,
    pub head: bool,
}

pub(crate) struct ParamNodes {
    pub encoder: Vec<NodeId>,
    pub core: Vec<NodeId>,
    pub head: Vec<NodeId>,
}

/// Places every parameter tensor on the tape; trainable groups become
/// tracked leaves.
pub(crate) fn stamp_params(tape: &mut Tape, params: &ModelParams, trainable: Trainable) -> ParamNodes {
    let stamp = |tape: &mut Tape, group: &[super::ParamTensor], tracked: bool| -> Vec<NodeId> {
        group
            .iter()
            .map(|pt| {
                let t = Tensor::new(pt.shape.clone(), pt.data.clone()).expect("param tensor");
                tape.leaf(t, tracked)
            })
            .collect()
    };
    ParamNodes {
        encoder: stamp(tape, &params.encoder, trainable.encoder),
        core: stamp(tape, &params.core, trainable.core),
        head: stamp(tape, &params.head, trainable.head),
    }
}

/// Two affine+relu layers with an identity shortcut.
fn residual_block(tape: &mut Tape, x: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId) -> Result<NodeId> {
    let h = tape.affine(x, w1, b1, true)?;
    let h = tape.affine(h, w2, b2, false)?;
    tape.add_relu(h, x)
}

pub(crate) struct CoreOutputs {
    pub trunk: NodeId,
    pub skips: Vec<NodeId>,
    pub color: Option<NodeId>,
    pub density: Option<NodeId>,
}

/// Field core graph over `[n, core_input_dim]` rows.
pub(crate) fn core_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    core_nodes: &[NodeId],
    input: NodeId,
    with_color_density: bool,
) -> Result<CoreOutputs> {
    let mut it = core_nodes.iter().copied();
    let mut next = || it.next().expect("core param count");
    let (w, b) = (next(), next());
    let mut h = tape.affine(input, w, b, true)?;
    let mut skips = Vec::with_capacity(cfg.core_blocks);
    for _ in 0..cfg.core_blocks {
        let (w1, b1, w2, b2) = (next(), next(), next(), next());
        h = residual_block(tape, h, w1, b1, w2, b2)?;
        skips.push(h);
    }
    let (wo, bo) = (next(), next());
    let (color, density) = if with_color_density {
        let out = tape.affine(h, wo, bo, false)?;
        let rgb_lin = tape.slice_cols(out, 0, 3)?;
        let sigma_lin = tape.slice_cols(out, 3, 1)?;
        (Some(tape.sigmoid(rgb_lin)?), Some(tape.softplus(sigma_lin)?))
    } else {
        (None, None)
    };
    Ok(CoreOutputs { trunk: h, skips, color, density })
}

/// Grasp head graph over `[n, head_input_dim]` rows; returns `[n, 1]`.
pub(crate) fn head_graph(tape: &mut Tape, cfg: &ModelConfig, head_nodes: &[NodeId], input: NodeId) -> Result<NodeId> {
    let mut it = head_nodes.iter().copied();
    let mut next = || it.next().expect("head param count");
    let (w, b) = (next(), next());
    let mut h = tape.affine(input, w, b, true)?;
    for _ in 0..cfg.head_blocks {
        let (w1, b1, w2, b2) = (next(), next(), next(), next());
        h = residual_block(tape, h, w1, b1, w2, b2)?;
    }
    let (wo, bo) = (next(), next());
    tape.affine(h, wo, bo, false)
}

pub(crate) enum PoseInput<'a> {
    /// `[n, 3]` tape node; gradients flow back to it.
    Node(NodeId),
    /// Fixed candidate positions.
    Fixed(&'a [[f64; 3]]),
}

pub(crate) enum FeatureSource<'a> {
    /// Feature-map node on this tape (encoder is part of the graph).
    Node(NodeId),
    /// Precomputed feature map (frozen encoder).
    Cached(&'a Tensor),
}

pub(crate) enum BundlePositions {
    Node(NodeId),
    Fixed(Vec<[f64; 3]>),
}

/// Bundle points for every candidate, plus shared encodings. Points are
/// candidate-major: candidate i occupies rows `i*b .. (i+1)*b`.
pub(crate) struct PoseBundle {
    pub positions: BundlePositions,
    pub pos_enc: NodeId,
    pub dir_enc: NodeId,
    pub points: usize,
}

/// Plain bundle positions for a fixed pose.
pub(crate) fn bundle_positions(x: [f64; 3], d: [f64; 3], offsets: &[f64]) -> Vec<[f64; 3]> {
    offsets
        .iter()
        .map(|&s| [x[0] + s * d[0], x[1] + s * d[1], x[2] + s * d[2]])
        .collect()
}

pub(crate) fn build_pose_bundle(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pose: PoseInput<'_>,
    direction: [f64; 3],
) -> Result<PoseBundle> {
    let b = cfg.bundle_offsets.len();
    let (positions, pos_enc, n) = match pose {
        PoseInput::Node(x) => {
            let n = tape.value(x).rows();
            if tape.value(x).cols() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "pose_bundle",
                    detail: format!("positions must be [n, 3], got {:?}", tape.value(x).shape()),
                });
            }
            let idx: Vec<i64> = (0..n as i64).flat_map(|i| std::iter::repeat(i).take(b)).collect();
            let repeated = tape.gather_rows(x, &idx)?;
            let mut offs = Vec::with_capacity(n * b * 3);
            for _ in 0..n {
                for &s in &cfg.bundle_offsets {
                    offs.push((s * direction[0]) as f32);
                    offs.push((s * direction[1]) as f32);
                    offs.push((s * direction[2]) as f32);
                }
            }
            let offs = tape.constant(Tensor::new(vec![n * b, 3], offs)?);
            let bundle = tape.add(repeated, offs)?;
            let enc = posenc_node(tape, bundle, cfg.m_position)?;
            (BundlePositions::Node(bundle), enc, n)
        }
        PoseInput::Fixed(xs) => {
            let n = xs.len();
            let mut pts = Vec::with_capacity(n * b);
            for x in xs {
                pts.extend(bundle_positions(*x, direction, &cfg.bundle_offsets));
            }
            let flat: Vec<f32> = pts.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
            let enc = positional_encode_rows(&flat, 3, cfg.m_position);
            let enc = tape.constant(enc);
            (BundlePositions::Fixed(pts), enc, n)
        }
    };
    let dir_row = tape.constant(encode_direction_row(direction, cfg.m_direction));
    let dir_enc = tape.broadcast_rows(dir_row, n * b)?;
    Ok(PoseBundle { positions, pos_enc, dir_enc, points: b })
}

/// Differentiable pinhole projection of `[n, 3]` world points to `[n, 2]`
/// pixel coordinates, with the depth floored at `MIN_CAMERA_DEPTH`.
pub(crate) fn project_node(tape: &mut Tape, x: NodeId, k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Result<NodeId> {
    let mut rt_t = [0.0f32; 9];
    for r in 0..3 {
        for c in 0..3 {
            rt_t[c * 3 + r] = rt.rotation[r][c] as f32;
        }
    }
    let rot = tape.constant(Tensor::new(vec![3, 3], rt_t.to_vec())?);
    let trans = tape.constant(Tensor::row(vec![
        rt.translation[0] as f32,
        rt.translation[1] as f32,
        rt.translation[2] as f32,
    ]));
    let cam = tape.matmul(x, rot)?;
    let cam = tape.add(cam, trans)?;
    let xc = tape.slice_cols(cam, 0, 1)?;
    let yc = tape.slice_cols(cam, 1, 1)?;
    let zc = tape.slice_cols(cam, 2, 1)?;
    // z' = relu(z - floor) + floor
    let shifted = tape.add_scalar(zc, -MIN_CAMERA_DEPTH)?;
    let relu = tape.relu(shifted)?;
    let zsafe = tape.add_scalar(relu, MIN_CAMERA_DEPTH)?;
    let inv = tape.recip(zsafe)?;
    let xn = tape.mul(xc, inv)?;
    let yn = tape.mul(yc, inv)?;
    let u = tape.scale(xn, k.fx as f32)?;
    let u = tape.add_scalar(u, k.cx as f32)?;
    let v = tape.scale(yn, k.fy as f32)?;
    let v = tape.add_scalar(v, k.cy as f32)?;
    tape.concat_cols(&[u, v])
}

/// Plain projection with the same depth clamp, for fixed points.
pub(crate) fn project_rows_clamped(points: &[[f64; 3]], k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Tensor {
    let mut uv = Vec::with_capacity(points.len() * 2);
    for p in points {
        let c = rt.to_camera(*p);
        let xc = c[0] as f32;
        let yc = c[1] as f32;
        let zc = (c[2] as f32).max(MIN_CAMERA_DEPTH);
        uv.push(k.fx as f32 * xc / zc + k.cx as f32);
        uv.push(k.fy as f32 * yc / zc + k.cy as f32);
    }
    Tensor::new(vec![points.len(), 2], uv).expect("uv rows")
}

/// Core forward up to the grasp head's input: `[n*points, head_input_dim]`
/// rows of concat(trunk, skips) for every bundle point.
pub(crate) fn head_input_for_view(
    tape: &mut Tape,
    cfg: &ModelConfig,
    param_nodes: &ParamNodes,
    bundle: &PoseBundle,
    k: &CameraIntrinsics,
    rt: &CameraExtrinsics,
    features: FeatureSource<'_>,
) -> Result<NodeId> {
    let uv = match &bundle.positions {
        BundlePositions::Node(node) => project_node(tape, *node, k, rt)?,
        BundlePositions::Fixed(pts) => {
            let t = project_rows_clamped(pts, k, rt);
            tape.constant(t)
        }
    };
    let map = match features {
        FeatureSource::Node(n) => n,
        FeatureSource::Cached(t) => tape.constant(t.clone()),
    };
    let feats = tape.bilinear(map, uv, cfg.image_height, cfg.image_width)?;
    let input = tape.concat_cols(&[bundle.pos_enc, bundle.dir_enc, feats])?;
    let core = core_graph(tape, cfg, &param_nodes.core, input, false)?;
    let mut head_in = vec![core.trunk];
    head_in.extend(core.skips.iter().copied());
    tape.concat_cols(&head_in)
}

/// Per-candidate grasp score for one observation: head output summed over
/// each candidate's bundle points. Returns `[n_candidates, 1]`.
pub(crate) fn theta_for_view(
    tape: &mut Tape,
    cfg: &ModelConfig,
    param_nodes: &ParamNodes,
    bundle: &PoseBundle,
    k: &CameraIntrinsics,
    rt: &CameraExtrinsics,
    features: FeatureSource<'_>,
) -> Result<NodeId> {
    let head_in = head_input_for_view(tape, cfg, param_nodes, bundle, k, rt, features)?;
    let scores = head_graph(tape, cfg, &param_nodes.head, head_in)?;
    tape.sum_groups(scores, bundle.points)
}

/// Detached head-input rows for fixed poses under a frozen backbone; the
/// caller feeds them into a fresh head-only graph.
pub(crate) fn head_input_for_fixed(
    params: &ModelParams,
    xs: &[[f64; 3]],
    direction: [f64; 3],
    k: &CameraIntrinsics,
    rt: &CameraExtrinsics,
    map: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: false, core: false, head: false });
    let bundle = build_pose_bundle(&mut tape, &params.config, PoseInput::Fixed(xs), direction)?;
    let node = head_input_for_view(
        &mut tape,
        &params.config,
        &nodes,
        &bundle,
        k,
        rt,
        FeatureSource::Cached(map),
    )?;
    Ok(tape.value(node).clone())
}

/// Single-view convenience wrapper used by the public ops.
pub(crate) fn build_theta(
    tape: &mut Tape,
    cfg: &ModelConfig,
    param_nodes: &ParamNodes,
    pose: PoseInput<'_>,
    direction: [f64; 3],
    k: &CameraIntrinsics,
    rt: &CameraExtrinsics,
    features: FeatureSource<'_>,
) -> Result<NodeId> {
    let bundle = build_pose_bundle(tape, cfg, pose, direction)?;
    theta_for_view(tape, cfg, param_nodes, &bundle, k, rt, features)
}

/// Field output at a single query point.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    /// RGB in [0, 1].
    pub color: [f32; 3],
    /// Non-negative density.
    pub density: f32,
    /// One hidden vector per core block.
    pub skips: Vec<Vec<f32>>,
    /// Final core hidden vector.
    pub trunk: Vec<f32>,
}

/// Evaluates the field at one position/direction under one observation.
/// Off-image projections clamp to the border feature rather than erroring.
pub fn field_query(
    x: [f64; 3],
    d: [f64; 3],
    obs: &CameraObservation,
    params: &ModelParams,
) -> Result<FieldOutput> {
    obs.validate()?;
    params.validate()?;
    let map = super::encoder::compute_feature_map(params, &obs.image)?;
    field_query_with_map(x, d, obs, params, &map)
}

pub(crate) fn field_query_with_map(
    x: [f64; 3],
    d: [f64; 3],
    obs: &CameraObservation,
    params: &ModelParams,
    map: &Tensor,
) -> Result<FieldOutput> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: false, core: false, head: false });
    let flat = [x[0] as f32, x[1] as f32, x[2] as f32];
    let pos_enc = tape.constant(positional_encode_rows(&flat, 3, cfg.m_position));
    let dir_enc = tape.constant(encode_direction_row(d, cfg.m_direction));
    let uv = tape.constant(project_rows_clamped(&[x], &obs.intrinsics, &obs.extrinsics));
    let map_node = tape.constant(map.clone());
    let feats = tape.bilinear(map_node, uv, cfg.image_height, cfg.image_width)?;
    let input = tape.concat_cols(&[pos_enc, dir_enc, feats])?;
    let core = core_graph(&mut tape, cfg, &nodes.core, input, true)?;
    let color = tape.value(core.color.expect("color requested")).data();
    let density = tape.value(core.density.expect("density requested")).data()[0];
    Ok(FieldOutput {
        color: [color[0], color[1], color[2]],
        density,
        skips: core.skips.iter().map(|&s| tape.value(s).data().to_vec()).collect(),
        trunk: tape.value(core.trunk).data().to_vec(),
    })
}

/// Grasp-success score of one pose under one observation, the summed head
/// output over the pose's bundle points. Unnormalized.
pub fn grasp_score(g: &GraspCandidate, obs: &CameraObservation, params: &ModelParams) -> Result<f32> {
    g.validate()?;
    obs.validate()?;
    let map = super::encoder::compute_feature_map(params, &obs.image)?;
    grasp_score_with_map(g, obs, params, &map)
}

pub(crate) fn grasp_score_with_map(
    g: &GraspCandidate,
    obs: &CameraObservation,
    params: &ModelParams,
    map: &Tensor,
) -> Result<f32> {
    let mut tape = Tape::new();
    let nodes = stamp_params(&mut tape, params, Trainable { encoder: false, core: false, head: false });
    let theta = build_theta(
        &mut tape,
        &params.config,
        &nodes,
        PoseInput::Fixed(&[g.x]),
        g.d,
        &obs.intrinsics,
        &obs.extrinsics,
        FeatureSource::Cached(map),
    )?;
    Ok(tape.value(theta).data()[0])
}
